"""Scene-context retrieval toolkit.

Layout-aware chi-square distances over annotated label maps, binarized
nearest-neighbor affinities with hard-negative pair mining, a small
shared-weight pair embedding trained on precomputed descriptors, exact
Euclidean retrieval with F-beta scoring, and non-parametric spatial /
global class priors pooled from retrieved annotations.
"""

from .dataset import (
    ClassFrequency,
    ClassTable,
    Dataset,
    DatasetError,
    DescriptorSet,
    LabelMap,
    class_frequency,
    load_manifest,
    save_dataset,
)
from .pyramid import (
    PyramidHistogram,
    build_pyramid,
    chi_square,
    ground_truth_distance,
    map_distances,
    pairwise_distances,
    rare_class_weights,
)
from .pairs import AffinityMatrix, PairBatch, PairSampler, build_affinity, rank_of, sample_pairs
from .embed import EmbeddingModel, TrainConfig, TrainingDiverged, init_model, pair_loss, train
from .retrieval import FeatureIndex, RetrievalResult, build_index, f_beta_retrieval, knn_query
from .prior import bilinear_resize, global_prior, spatial_prior
from .encode import EncoderParams, conv1x1_duplicate, feature_encode, prior_encode

__version__ = "0.1.0"
