"""Bimodal sigmoid towers with feature fusion and bilinear softmax heads."""

from .bilinear import (
    FACTORED,
    FACTORED_SHARED,
    FULL,
    BilinearClassifier,
    BilinearHead,
    HeadGradients,
    LabelTree,
    VariantError,
    deltas,
    head_gradients,
    init_head,
    materialize_w,
    param_count,
    posterior,
    posterior_batch,
)
from .data import (
    Dataset,
    FormatError,
    PlantedModel,
    SynthSpec,
    VersionError,
    generate_synthetic,
    generate_with_planted,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .fusion import Ensemble, FusedClassifier, average_posteriors, fuse_features
from .linalg import (
    ShapeError,
    frobenius_norm,
    frobenius_project,
    hadamard,
    matmul,
)
from .mlp import (
    ForwardTrace,
    MlpTower,
    SoftmaxLayer,
    TowerGradients,
    UnimodalClassifier,
    backward,
    forward,
    init_tower,
    sigmoid,
    sigmoid_prime,
    softmax,
)
from .training import (
    GradCheckReport,
    Metrics,
    TrainConfig,
    build_model,
    cross_entropy,
    evaluate,
    grad_check,
    sgd_step,
    train_joint,
    train_model,
)

__version__ = "0.1.0"
