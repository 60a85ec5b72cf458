"""Morph-aware metric learning and morphing-attack robustness benchmarking.

The package trains face-style embedding models with a quadruplet loss that
sees face morphs during training, and scores the resulting models with
MinMax/ProdAvg MMPMR vulnerability metrics anchored at a fixed FNMR.
"""

__version__ = "0.1.0"

from morphbench.data_model import (
    DatasetManifest,
    ImageStore,
    ManifestError,
    SampleRecord,
    SyntheticConfig,
    load_manifest,
    save_manifest,
    synth_generate,
    validate_manifest,
)
from morphbench.losses import LossConfig, quadruplet_loss, sq_euclidean, triplet_loss
from morphbench.metrics import (
    MorphScoreSet,
    ThresholdResult,
    VerificationProtocol,
    cosine,
    fmr,
    fnmr,
    minmax_mmpmr,
    prodavg_mmpmr,
    solve_threshold,
)
from morphbench.morphgen import MorphMethod, MorphPairProtocol, blend_morph, latent_morph
from morphbench.sampler import Quadruplet, SamplerConfig, build_quadruplets, build_triplets
from morphbench.trainer import BackboneSpec, EmbeddingStore, TrainConfig, build_model, embed_all, train
