"""Objective, SGD with ascent updates and Frobenius projection, joint training,
gradient checking, and evaluation metrics.

The objective throughout is the mean log-likelihood

    E = (1/N) sum_i log p(y_i | x1_i, x2_i),

a negative quantity that training *ascends* (theta <- theta + eta dE/dtheta);
the reported metric is its negation NLL = -E. After every step the factored
heads' U1, U2 are rescaled onto the Frobenius ball of radius lambda.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bilinear import (
    FACTORED,
    FACTORED_SHARED,
    FULL,
    VARIANTS,
    BilinearClassifier,
    LabelTree,
    init_head,
)
from .data import Dataset
from .fusion import FusedClassifier
from .linalg import frobenius_norm
from .mlp import (
    STANDALONE_SOFTMAX,
    UnimodalClassifier,
    init_softmax_layer,
    init_tower,
)

logger = logging.getLogger("bimodalnet.training")

PROB_FLOOR = 1e-300
EVAL_CHUNK = 1024

MODES = ("audio", "visual", "fused", "bilinear")

# fixed seed-stream slots so every component draws from its own child stream
_SEED_TOWER_A = 0
_SEED_TOWER_V = 1
_SEED_HEAD = 2
_SEED_TOP = 3
_SEED_OUT = 4
_SEED_SHUFFLE = 5


def _child_seed(seed: int, slot: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), slot])


@dataclass
class TrainConfig:
    mode: str = "bilinear"
    variant: str = FACTORED_SHARED
    dims_a: tuple[int, ...] = ()       # tower layer dims (input..final hidden)
    dims_v: tuple[int, ...] = ()
    fused_dim: int = 0                 # F, factored variants only
    fusion_top: tuple[int, ...] = ()   # hidden dims of the fused top; () = softmax only
    arch: str = ""                     # original bracketed notation, informational
    learning_rate: float = 0.1
    epochs: int = 10
    minibatch_size: int = 32
    init_scale: float = 0.05
    seed: int = 0
    lam: float = 2.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        # 0 is allowed so a run can be replayed as a no-op (projection still applies)
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        self.dims_a = tuple(int(d) for d in self.dims_a)
        self.dims_v = tuple(int(d) for d in self.dims_v)
        self.fusion_top = tuple(int(d) for d in self.fusion_top)


@dataclass
class Metrics:
    leaf_error: float
    group_error: float
    nll: float

    def record(self, epoch: int, split: str) -> dict:
        return {
            "epoch": epoch,
            "split": split,
            "leaf_error": self.leaf_error,
            "group_error": self.group_error,
            "nll": self.nll,
        }


def cross_entropy(posteriors, targets) -> float:
    """Mean log-probability of the targets (the ascended objective E).

    Probabilities are clamped at 1e-300 before the log; clamping is flagged
    in the run log. The reported metric is NLL = -E.
    """
    probs = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    targets = np.asarray(targets)
    if probs.shape[0] != targets.shape[0]:
        raise ValueError(
            f"{probs.shape[0]} posteriors vs {targets.shape[0]} targets"
        )
    p = probs[np.arange(probs.shape[0]), targets]
    clamped = np.maximum(p, PROB_FLOOR)
    if np.any(p < PROB_FLOOR):
        logger.warning(
            "clamped %d zero posterior(s) at %g before log", int((p < PROB_FLOOR).sum()),
            PROB_FLOOR,
        )
    return float(np.log(clamped).mean())


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             learning_rate: float, lam: float,
             project: tuple[str, ...] = ()) -> dict[str, np.ndarray]:
    """In-place ascent update of every parameter, then Frobenius projection
    of the named matrices onto the ball of radius lam."""
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        params[name] += learning_rate * g
    for name in project:
        if name in params:
            u = params[name]
            norm = frobenius_norm(u)
            if norm > lam:
                u *= lam / norm
    return params


def evaluate(model, dataset: Dataset, chunk: int = EVAL_CHUNK) -> Metrics:
    """Leaf/group argmax error rates (ties to the lowest index) and NLL."""
    if dataset.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    indicator = dataset.tree.indicator()
    group_targets = dataset.tree.group_of[dataset.y]
    leaf_wrong = 0
    group_wrong = 0
    log_sum = 0.0
    for start in range(0, dataset.n, chunk):
        stop = min(start + chunk, dataset.n)
        probs = model.posterior_batch(dataset.x1[start:stop], dataset.x2[start:stop])
        y = dataset.y[start:stop]
        leaf_wrong += int((np.argmax(probs, axis=1) != y).sum())
        group_probs = probs @ indicator
        group_wrong += int((np.argmax(group_probs, axis=1) != group_targets[start:stop]).sum())
        log_sum += np.log(np.maximum(probs[np.arange(stop - start), y], PROB_FLOOR)).sum()
    return Metrics(
        leaf_error=leaf_wrong / dataset.n,
        group_error=group_wrong / dataset.n,
        nll=-log_sum / dataset.n,
    )


def build_model(config: TrainConfig, d1: int, d2: int, num_classes: int,
                tree: Optional[LabelTree] = None, warm_towers=None):
    """Construct the model a config describes, seeded deterministically.

    ``warm_towers`` optionally supplies pre-trained (tower_a, tower_v) for
    the fused and bilinear modes; either entry may be None.
    """
    scale = config.init_scale
    warm_a, warm_v = warm_towers if warm_towers is not None else (None, None)

    def feature_tower(dims, warm, slot, expected_input):
        if warm is not None:
            if warm.input_dim != expected_input:
                raise ValueError(
                    f"warm-start tower expects input {warm.input_dim}, "
                    f"dataset provides {expected_input}"
                )
            return warm.copy()
        if not dims:
            raise ValueError(f"mode {config.mode!r} needs tower dims for both modalities")
        if dims[0] != expected_input:
            raise ValueError(
                f"architecture input dim {dims[0]} does not match dataset dim {expected_input}"
            )
        return init_tower(dims, _child_seed(config.seed, slot), scale)

    if config.mode in ("audio", "visual"):
        dims = config.dims_a if config.mode == "audio" else config.dims_v
        expected = d1 if config.mode == "audio" else d2
        slot = _SEED_TOWER_A if config.mode == "audio" else _SEED_TOWER_V
        tower = feature_tower(dims, None, slot, expected)
        tower.output_mode = STANDALONE_SOFTMAX
        out = init_softmax_layer(tower.feature_dim, num_classes,
                                 _child_seed(config.seed, _SEED_OUT), scale)
        return UnimodalClassifier(tower, out, 1 if config.mode == "audio" else 2,
                                  seed=config.seed, arch=config.arch)

    tower_a = feature_tower(config.dims_a, warm_a, _SEED_TOWER_A, d1)
    tower_v = feature_tower(config.dims_v, warm_v, _SEED_TOWER_V, d2)

    if config.mode == "fused":
        fused_dim = tower_a.feature_dim + tower_v.feature_dim
        top = None
        out_in = fused_dim
        if config.fusion_top:
            top = init_tower((fused_dim,) + config.fusion_top,
                             _child_seed(config.seed, _SEED_TOP), scale)
            out_in = top.feature_dim
        out = init_softmax_layer(out_in, num_classes,
                                 _child_seed(config.seed, _SEED_OUT), scale)
        return FusedClassifier(tower_a, tower_v, out, top,
                               seed=config.seed, arch=config.arch)

    # bilinear-joint
    if config.variant == FACTORED_SHARED and tree is None:
        raise ValueError("factored-shared variant needs the dataset's label tree")
    head = init_head(
        config.variant, tower_a.feature_dim, tower_v.feature_dim, num_classes,
        fused_dim=config.fused_dim if config.variant != FULL else None,
        tree=tree, seed=_child_seed(config.seed, _SEED_HEAD),
        scale=scale, lam=config.lam,
    )
    return BilinearClassifier(tower_a, tower_v, head, seed=config.seed, arch=config.arch)


def train_model(model, config: TrainConfig, train_set: Dataset,
                eval_set: Optional[Dataset] = None) -> list[dict]:
    """Minibatch SGD on a prebuilt model; returns the per-epoch metric records.

    Samples are reshuffled each epoch by the config's seeded PRNG; batch
    gradients are fixed-order means, so identical (config, dataset) runs are
    bit-identical. Divergence (non-finite E) aborts with the parameters
    rolled back to the last finished epoch.
    """
    if train_set.num_classes != model.num_classes:
        raise ValueError(
            f"dataset has {train_set.num_classes} classes, model {model.num_classes}"
        )
    rng = np.random.default_rng(_child_seed(config.seed, _SEED_SHUFFLE))
    params = model.trainable_params()
    records: list[dict] = []

    def epoch_records(epoch: int):
        m = evaluate(model, train_set)
        recs = [m.record(epoch, train_set.split)]
        if eval_set is not None:
            recs.append(evaluate(model, eval_set).record(epoch, eval_set.split))
        return np.isfinite(m.nll), recs

    records.extend(epoch_records(0)[1])
    snapshot = {k: v.copy() for k, v in params.items()}
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_set.n)
        diverged = False
        for start in range(0, train_set.n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            loglik, grads = model.loglik_and_grads(
                train_set.x1[idx], train_set.x2[idx], train_set.y[idx]
            )
            if not np.isfinite(loglik):
                diverged = True
                break
            try:
                sgd_step(params, grads, config.learning_rate, config.lam,
                         model.project_names())
            except ValueError as exc:
                if "non-finite" not in str(exc):
                    raise
                diverged = True
                break
        finite = False
        if not diverged:
            finite, recs = epoch_records(epoch)
        if diverged or not finite:
            for k, v in params.items():
                v[...] = snapshot[k]
            records.append({"epoch": epoch, "event": "diverged"})
            logger.warning("divergence at epoch %d; restored epoch %d parameters",
                           epoch, epoch - 1)
            break
        records.extend(recs)
        snapshot = {k: v.copy() for k, v in params.items()}
    return records


def train_joint(config: TrainConfig, train_set: Dataset,
                eval_set: Optional[Dataset] = None, warm_towers=None):
    """Build the configured model and train it; returns (model, records)."""
    model = build_model(config, train_set.d1, train_set.d2,
                        train_set.num_classes, train_set.tree, warm_towers)
    records = train_model(model, config, train_set, eval_set)
    return model, records


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    num_checked: int
    h: float

    def passed(self, threshold: float = 1e-5) -> bool:
        return self.max_rel_error < threshold


def grad_check(model, sample, h: float = 1e-5) -> GradCheckReport:
    """Central finite differences of E = log p(y | x1, x2) for one sample,
    against the model's analytic gradients, over every trainable parameter."""
    x1, x2, y = sample
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    targets = np.asarray([int(y)])

    def objective() -> float:
        probs = model.posterior_batch(x1, x2)
        return float(np.log(max(probs[0, int(y)], PROB_FLOOR)))

    _, grads = model.loglik_and_grads(x1, x2, targets)
    worst = (0.0, "", ())
    checked = 0
    for name, arr in model.trainable_params().items():
        analytic = grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            e_plus = objective()
            arr[idx] = orig - h
            e_minus = objective()
            arr[idx] = orig
            fd = (e_plus - e_minus) / (2.0 * h)
            rel = abs(analytic[idx] - fd) / max(1.0, abs(fd))
            checked += 1
            if rel > worst[0]:
                worst = (rel, name, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], checked, h)
