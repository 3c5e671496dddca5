"""Margin-softmax losses on the hypersphere, with a teacher-student gate and
a decoder that reconstructs class mean images from embeddings.

Subpackage map:

    margins     target-logit curves, margin probabilities, DLoss, principle audit
    net         dense encoder/decoder nets, spherical classifier head, checkpoints
    generative  decoder targets, SSIM, GLoss
    gate        teacher top-k acceptance and gradient filtering
    data        synthetic blob identities, noise injection, dataset export
    config      experiment configuration, serialization, hashing
    metrics     verification / identification evaluation
    training    SGD loops for teacher and student
    experiments run orchestration (train, eval, compare)
    gradcheck   analytic gradients vs central differences
    cli         command line entry point
"""

from latse.margins import (
    AngleBatch,
    Family,
    MarginSpec,
    PrincipleReport,
    ProbDist,
    check_principles,
    dloss,
    emit_curves,
    margin_probability,
    target_logit,
)
from latse.net import (
    ClassifierWeights,
    DegenerateEmbeddingError,
    EmbeddingBatch,
    NetParams,
    Topology,
    cos_angles,
    encode,
    init_centers,
    init_params,
)
from latse.config import ConfigError, ExperimentConfig, default_config

__version__ = "0.1.0"
