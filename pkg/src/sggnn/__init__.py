"""Similarity-guided graph neural network scoring over embedding corpora.

The package trains a pairwise relation model (embedding head, squared-
difference features, batch norm, sigmoid classifier) and refines its
probe-gallery scores by passing deep messages between gallery items, with
fusion weights guided by supervised gallery-gallery similarities. It ships
synthetic corpus generation, a two-stage trainer, retrieval evaluation
(mAP / CMC) with re-ranking baselines, and a CLI around all of it.
"""

from .corpus import (
    EmbeddingCorpus,
    EmbeddingItem,
    SynthConfig,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .errors import ConfigError, DataFormatError, NumericError, SggnnError
from .evaluation import (
    METHODS,
    EvalConfig,
    Metrics,
    RankingResult,
    SweepPoint,
    SweepRow,
    average_precision,
    default_sweep_grid,
    evaluate,
    l2_rank,
    random_walk_rank,
    sensitivity_sweep,
    sggnn_rank,
)
from .graph import (
    BatchGraph,
    FusionConfig,
    compute_messages,
    edge_weights_compat,
    edge_weights_sg,
    fuse,
    sggnn_forward,
)
from .params import (
    BatchNormParams,
    ClassifierParams,
    CompatParams,
    EmbedHeadParams,
    MessageNetParams,
    ModelParams,
    load_checkpoint,
    save_checkpoint,
)
from .relation import (
    RelationFeature,
    bce_loss,
    embed,
    pairwise_scores,
    relation_feature,
    score,
)
from .trainer import (
    BatchSampler,
    MiniBatch,
    OptimizerState,
    SamplerConfig,
    TrainSchedule,
    adam_step,
    sample_batch,
    stage1_train,
    stage2_train,
)

__version__ = "0.1.0"
