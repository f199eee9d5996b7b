"""Overlapping task-group experts fused into one large-vocabulary classifier.

The pipeline, end to end:

1. ``ontology`` scores inter-class affinity (taxonomy hop counts or a
   feature kernel) and spectrally partitions the classes into categories,
   yielding a leaf order that keeps confusable classes adjacent.
2. ``taskgroups`` slides overlapping circular windows along that order,
   giving each expert a subset of classes plus a "not-in-group" output.
3. ``expert`` trains one encoder-plus-multi-task-softmax model per group,
   coupling member weights through a similarity-graph Laplacian.
4. ``fusion`` stacks the diverse expert outputs into full-length score
   vectors and fits the final softmax over all classes (or concatenates
   encodings for the early-fusion baseline).
5. ``harness`` runs the whole thing, evaluates top-k accuracy, and sweeps
   ablation grids; ``cli`` exposes it all as subcommands.
"""

from .dataset import Dataset, SynthSpec, generate_synthetic, load_features, save_features, split
from .errors import (
    ExpertMixError,
    InvalidArgumentError,
    InvalidDatasetError,
    InvalidLabelError,
    InvariantError,
    ParseError,
    PipelineStageError,
    TrainingFailureError,
    UnknownClassError,
)
from .expert import (
    Backbone,
    ExpertModel,
    SimilarityState,
    TrainConfig,
    forward,
    gradient,
    load_expert,
    loss,
    sample_not_in_group,
    save_expert,
    similarity_matrix,
    train_expert,
)
from .fusion import (
    EarlyFusionModel,
    HeadConfig,
    LinearSoftmax,
    MixtureModel,
    StackedFeature,
    early_fusion_train,
    expert_scores,
    load_mixture,
    predict,
    save_mixture,
    stack_features,
    train_stacking_head,
)
from .harness import (
    AblationGrid,
    ExperimentConfig,
    MonolithicModel,
    Report,
    per_class_accuracy,
    run_ablation,
    run_pipeline,
    topk_accuracy,
    train_monolithic,
)
from .ontology import (
    AffinityMatrix,
    KernelConfig,
    TaxonomyTree,
    TwoLayerOntology,
    build_semantic_matrix,
    build_two_layer_ontology,
    semantic_affinity,
    spectral_partition,
    visual_affinity_matrix,
)
from .taskgroups import (
    GroupingPlan,
    TaskGroup,
    generate_groups,
    group_count,
    membership,
    random_groups,
)

__version__ = "0.1.0"
