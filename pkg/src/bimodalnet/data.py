"""Datasets, model persistence, and the planted-interaction synthetic task.

Dataset files are a fixed little-endian binary layout; model files are a
short ASCII header followed by a raw float64 payload. Both round-trip
bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .bilinear import (
    FACTORED,
    FACTORED_SHARED,
    FULL,
    BilinearClassifier,
    BilinearHead,
    LabelTree,
)
from .fusion import FusedClassifier
from .mlp import (
    HIDDEN_FEATURES,
    STANDALONE_SOFTMAX,
    MlpTower,
    SoftmaxLayer,
    UnimodalClassifier,
)

DATASET_MAGIC = b"BMDATSET"
DATASET_VERSION = 1
MODEL_MAGIC = "bimodalnet-model"
MODEL_VERSION = "v1"

# Planted-logit margins: the bilinear (group) signal must dominate the
# per-leaf linear signal or group identity leaks into linear decoders.
GROUP_MARGIN = 3.0
LINEAR_MARGIN = 1.0

SPLITS = ("train", "test")


class FormatError(ValueError):
    """File contents are not a valid serialized artifact."""


class VersionError(FormatError):
    """File was written by an unsupported format version."""


@dataclass
class Dataset:
    """Labeled bimodal samples (x1_i, x2_i, y_i) plus the label tree."""

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    tree: LabelTree
    split: str = "train"

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.x2 = np.asarray(self.x2, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x1.ndim != 2 or self.x2.ndim != 2 or self.y.ndim != 1:
            raise ValueError("x1/x2 must be 2-D sample rows and y 1-D labels")
        if not (self.x1.shape[0] == self.x2.shape[0] == self.y.shape[0]):
            raise ValueError(
                f"sample counts disagree: x1 {self.x1.shape[0]}, "
                f"x2 {self.x2.shape[0]}, y {self.y.shape[0]}"
            )
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.tree.num_leaves):
            raise ValueError(
                f"labels must lie in [0, {self.tree.num_leaves}), "
                f"got range [{self.y.min()}, {self.y.max()}]"
            )
        if not (np.all(np.isfinite(self.x1)) and np.all(np.isfinite(self.x2))):
            raise ValueError("features must be finite")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def d1(self) -> int:
        return int(self.x1.shape[1])

    @property
    def d2(self) -> int:
        return int(self.x2.shape[1])

    @property
    def num_classes(self) -> int:
        return self.tree.num_leaves

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.split == other.split
            and self.tree == other.tree
            and np.array_equal(self.x1, other.x1)
            and np.array_equal(self.x2, other.x2)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the planted-interaction generator.

    ``linear_scale`` rescales the per-leaf linear terms; 0 leaves the labels
    a pure function of the bilinear interaction (only sensible when every
    group has a single leaf).
    """

    d1: int
    d2: int
    num_classes: int
    num_groups: int
    n_train: int
    n_test: int
    noise_std: float
    interaction_rank: int
    seed: int
    linear_scale: float = 1.0

    def __post_init__(self):
        if min(self.d1, self.d2, self.num_classes, self.num_groups,
               self.n_train, self.n_test, self.interaction_rank) < 1:
            raise ValueError("all dims, counts and the interaction rank must be >= 1")
        if self.num_classes % self.num_groups:
            raise ValueError(
                f"{self.num_classes} classes do not divide into {self.num_groups} groups"
            )
        if self.interaction_rank > min(self.d1, self.d2):
            raise ValueError(
                f"interaction_rank {self.interaction_rank} exceeds min(d1, d2) = "
                f"{min(self.d1, self.d2)}"
            )
        if self.noise_std < 0 or self.linear_scale < 0:
            raise ValueError("noise_std and linear_scale must be >= 0")


@dataclass
class PlantedModel:
    """The generator's own scoring rule, which labels the stored features.

    Each group owns a rank-R interaction tensor built from unit projection
    columns; for an even number of groups, consecutive groups 2k, 2k+1 share
    one tensor with opposite signs (so two groups reduces to the sign of a
    single projection product), and for an odd number every group draws its
    own tensor. Each leaf's bilinear tensor therefore has rank R, and leaves
    under one group differ only by "slot" linear terms reused across groups.
    """

    proj1: np.ndarray        # (d1, n_tensors * R), unit columns
    proj2: np.ndarray        # (d2, n_tensors * R)
    rank: int
    antipodal: bool          # groups 2k, 2k+1 share tensor k with +- signs
    group_margin: float
    lin1: np.ndarray         # (C, d1)
    lin2: np.ndarray         # (C, d2)
    tree: LabelTree

    def group_scores(self, x1, x2) -> np.ndarray:
        prods = (x1 @ self.proj1) * (x2 @ self.proj2)
        per_tensor = prods.reshape(len(prods), -1, self.rank).sum(axis=2)
        if not self.antipodal:
            return per_tensor
        n, half = per_tensor.shape
        return np.stack([per_tensor, -per_tensor], axis=2).reshape(n, 2 * half)

    def logits(self, x1, x2) -> np.ndarray:
        per_group = self.group_margin * self.group_scores(x1, x2)
        return per_group[:, self.tree.group_of] + x1 @ self.lin1.T + x2 @ self.lin2.T

    def predict(self, x1, x2) -> np.ndarray:
        return np.argmax(self.logits(x1, x2), axis=1)


def _unit_columns(rng, d: int, k: int) -> np.ndarray:
    # orthonormal when k <= d; otherwise independent unit directions
    raw = rng.standard_normal((d, k))
    if k <= d:
        q, _ = np.linalg.qr(raw)
        return np.ascontiguousarray(q[:, :k])
    return raw / np.linalg.norm(raw, axis=0, keepdims=True)


def generate_with_planted(spec: SynthSpec):
    """Like generate_synthetic but also returns the planted scoring rule."""
    rng = np.random.default_rng(spec.seed)
    tree = LabelTree.balanced(spec.num_classes, spec.num_groups)
    r = spec.interaction_rank
    g = spec.num_groups
    antipodal = g % 2 == 0
    n_dirs = (g // 2 if antipodal else g) * r
    proj1 = _unit_columns(rng, spec.d1, n_dirs)
    proj2 = _unit_columns(rng, spec.d2, n_dirs)
    # Slot directions are reused across groups and kept orthogonal to the
    # interaction directions, so the leaf argmax factorizes exactly into
    # (group argmax) x (slot argmax). Group tensors are sign-symmetric or
    # exchangeable and slot directions exchangeable, hence every leaf is
    # equally likely, and no linear decoder on [x1; x2] sees the group.
    slots = spec.num_classes // spec.num_groups
    lin_scale1 = spec.linear_scale * LINEAR_MARGIN / np.sqrt(spec.d1)
    lin_scale2 = spec.linear_scale * LINEAR_MARGIN / np.sqrt(spec.d2)
    slot1 = rng.standard_normal((slots, spec.d1))
    slot2 = rng.standard_normal((slots, spec.d2))
    slot1 = lin_scale1 * (slot1 - (slot1 @ proj1) @ np.linalg.pinv(proj1))
    slot2 = lin_scale2 * (slot2 - (slot2 @ proj2) @ np.linalg.pinv(proj2))
    lin1 = np.tile(slot1, (spec.num_groups, 1))
    lin2 = np.tile(slot2, (spec.num_groups, 1))
    planted = PlantedModel(proj1, proj2, r, antipodal, GROUP_MARGIN, lin1, lin2, tree)

    # Features are noisy measurements; the planted rule labels the features
    # as stored, so the planted model reproduces the labels exactly.
    n = spec.n_train + spec.n_test
    x1 = rng.standard_normal((n, spec.d1))
    x2 = rng.standard_normal((n, spec.d2))
    if spec.noise_std > 0:
        x1 = x1 + spec.noise_std * rng.standard_normal(x1.shape)
        x2 = x2 + spec.noise_std * rng.standard_normal(x2.shape)
    y = planted.predict(x1, x2)
    cut = spec.n_train
    train = Dataset(x1[:cut].copy(), x2[:cut].copy(), y[:cut].copy(), tree, "train")
    test = Dataset(x1[cut:].copy(), x2[cut:].copy(), y[cut:].copy(), tree, "test")
    return train, test, planted


def generate_synthetic(spec: SynthSpec):
    """Seeded (train, test) draw: Gaussian features labeled by a planted
    rank-R bilinear interaction per group plus per-leaf linear terms, with
    feature noise added after labeling."""
    train, test, _ = generate_with_planted(spec)
    return train, test


# ---------------------------------------------------------------- datasets

_DS_HEAD = struct.Struct("<8sIBQIIII")  # magic, version, split, n, d1, d2, C, G


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, nbytes: int, what: str) -> bytes:
        if self.off + nbytes > len(self.buf):
            raise FormatError(
                f"truncated file: needed {nbytes} bytes for {what} "
                f"at byte offset {self.off}, have {len(self.buf) - self.off}"
            )
        out = self.buf[self.off:self.off + nbytes]
        self.off += nbytes
        return out

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype, count=count).copy()

    def done(self, what: str):
        if self.off != len(self.buf):
            raise FormatError(
                f"{len(self.buf) - self.off} trailing bytes after {what} "
                f"at byte offset {self.off}"
            )


def save_dataset(dataset: Dataset, path) -> None:
    head = _DS_HEAD.pack(
        DATASET_MAGIC, DATASET_VERSION, SPLITS.index(dataset.split),
        dataset.n, dataset.d1, dataset.d2,
        dataset.num_classes, dataset.tree.num_groups,
    )
    parts = [
        head,
        dataset.tree.group_of.astype("<i4").tobytes(),
        np.ascontiguousarray(dataset.x1, dtype="<f8").tobytes(),
        np.ascontiguousarray(dataset.x2, dtype="<f8").tobytes(),
        dataset.y.astype("<i4").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    magic, version, split_id, n, d1, d2, c, g = _DS_HEAD.unpack(
        cur.take(_DS_HEAD.size, "header")
    )
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0: not a dataset file")
    if version != DATASET_VERSION:
        raise VersionError(
            f"unsupported dataset version {version}, expected {DATASET_VERSION}"
        )
    if c < 1:
        raise FormatError(f"invalid header: class count must be >= 1, got {c}")
    if not 1 <= g <= c:
        raise FormatError(f"invalid header: need 1 <= groups <= classes, got G={g} C={c}")
    if d1 < 1 or d2 < 1:
        raise FormatError(f"invalid header: feature dims must be >= 1, got ({d1}, {d2})")
    if split_id >= len(SPLITS):
        raise FormatError(f"invalid header: unknown split id {split_id}")
    group_of = cur.array("<i4", c, "leaf-to-group table")
    x1 = cur.array("<f8", n * d1, "first-modality features").reshape(n, d1)
    x2 = cur.array("<f8", n * d2, "second-modality features").reshape(n, d2)
    y = cur.array("<i4", n, "labels")
    cur.done("labels")
    try:
        tree = LabelTree(group_of.astype(np.int64), g)
        return Dataset(x1, x2, y.astype(np.int64), tree, SPLITS[split_id])
    except ValueError as exc:
        raise FormatError(f"invalid dataset contents: {exc}") from exc


# ------------------------------------------------------------------ models

def _csv(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _tower_meta(tower: MlpTower) -> str:
    return _csv(tower.layer_dims)


def _model_metadata(model) -> list[tuple[str, str]]:
    meta: list[tuple[str, str]] = [
        ("kind", model.kind),
        ("classes", str(model.num_classes)),
        ("seed", str(int(getattr(model, "seed", 0)))),
        ("arch", str(getattr(model, "arch", ""))),
    ]
    if model.kind == "unimodal":
        meta.append(("modality", str(model.modality)))
        meta.append(("dims", _tower_meta(model.tower)))
    elif model.kind == "fused":
        meta.append(("dims_a", _tower_meta(model.tower_a)))
        meta.append(("dims_v", _tower_meta(model.tower_v)))
        meta.append(("top_dims", _tower_meta(model.top) if model.top is not None else ""))
    elif model.kind == "bilinear":
        head = model.head
        meta.append(("variant", head.variant))
        meta.append(("dims_a", _tower_meta(model.tower1)))
        meta.append(("dims_v", _tower_meta(model.tower2)))
        if head.variant != FULL:
            meta.append(("fused_dim", str(head.fused_dim)))
        meta.append(("lambda", repr(float(head.lam))))
        if head.tree is not None:
            meta.append(("groups", str(head.tree.num_groups)))
            meta.append(("group_of", _csv(head.tree.group_of)))
    else:
        raise ValueError(f"cannot serialize model kind {model.kind!r}")
    return meta


def save_model(model, path) -> None:
    """Write an ASCII header plus a raw float64 little-endian payload."""
    arrays = model.params()
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}"]
    for key, value in _model_metadata(model):
        if "\n" in value:
            raise ValueError(f"metadata value for {key!r} must be single-line")
        lines.append(f"{key}: {value}")
    for name, arr in arrays.items():
        lines.append(f"array: {name} {_csv(arr.shape)}")
    lines.append("binary")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values()
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _parse_model_header(buf: bytes):
    marker = b"\nbinary\n"
    idx = buf.find(marker)
    if idx < 0:
        raise FormatError("missing binary marker: not a model file or truncated header")
    try:
        text = buf[:idx].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"non-ASCII header byte at offset {exc.start}") from exc
    lines = text.split("\n")
    tokens = lines[0].split(" ")
    if not tokens or tokens[0] != MODEL_MAGIC:
        raise FormatError(f"bad magic line {lines[0]!r}: not a bimodalnet model file")
    if len(tokens) != 2 or tokens[1] != MODEL_VERSION:
        raise VersionError(
            f"unsupported model version {lines[0]!r}, expected {MODEL_MAGIC} {MODEL_VERSION}"
        )
    meta: dict[str, str] = {}
    array_specs: list[tuple[str, tuple[int, ...]]] = []
    for line in lines[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        if key == "array":
            name, _, shape_csv = value.partition(" ")
            try:
                shape = tuple(int(t) for t in shape_csv.split(","))
            except ValueError as exc:
                raise FormatError(f"malformed array shape in {line!r}") from exc
            array_specs.append((name, shape))
        else:
            meta[key] = value
    return meta, array_specs, idx + len(marker)


def _read_arrays(buf: bytes, specs, payload_off: int) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    off = payload_off
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(buf):
            raise FormatError(
                f"truncated payload: needed {nbytes} bytes for array {name!r} "
                f"at byte offset {off}"
            )
        arrays[name] = (
            np.frombuffer(buf, dtype="<f8", count=count, offset=off)
            .astype(np.float64)
            .reshape(shape)
        )
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after payload at offset {off}")
    return arrays


def _dims_from(meta: dict[str, str], key: str) -> tuple[int, ...]:
    raw = meta.get(key, "")
    if raw == "":
        return ()
    try:
        return tuple(int(t) for t in raw.split(","))
    except ValueError as exc:
        raise FormatError(f"malformed {key!r} header field {raw!r}") from exc


def _take_tower(arrays: dict[str, np.ndarray], prefix: str,
                dims: tuple[int, ...], output_mode: str) -> MlpTower:
    weights, biases = [], []
    for l in range(len(dims) - 1):
        try:
            weights.append(arrays.pop(f"{prefix}.W{l}"))
            biases.append(arrays.pop(f"{prefix}.b{l}"))
        except KeyError as exc:
            raise FormatError(f"missing array for tower layer {prefix}.{l}") from exc
    try:
        return MlpTower(dims, weights, biases, output_mode)
    except ValueError as exc:
        raise FormatError(f"inconsistent tower {prefix!r}: {exc}") from exc


def _require(arrays: dict[str, np.ndarray], name: str) -> np.ndarray:
    try:
        return arrays.pop(name)
    except KeyError as exc:
        raise FormatError(f"missing array {name!r}") from exc


def load_model(path):
    """Rebuild a saved classifier; posteriors of the result are bit-identical."""
    with open(path, "rb") as fh:
        buf = fh.read()
    meta, specs, payload_off = _parse_model_header(buf)
    arrays = _read_arrays(buf, specs, payload_off)
    kind = meta.get("kind", "")
    classes = int(meta.get("classes", "0"))
    seed = int(meta.get("seed", "0"))
    arch = meta.get("arch", "")
    try:
        if kind == "unimodal":
            dims = _dims_from(meta, "dims")
            tower = _take_tower(arrays, "tower", dims, STANDALONE_SOFTMAX)
            out = SoftmaxLayer(_require(arrays, "out.W"), _require(arrays, "out.b"))
            model = UnimodalClassifier(tower, out, int(meta.get("modality", "1")),
                                       seed=seed, arch=arch)
        elif kind == "fused":
            tower_a = _take_tower(arrays, "tower_a", _dims_from(meta, "dims_a"), HIDDEN_FEATURES)
            tower_v = _take_tower(arrays, "tower_v", _dims_from(meta, "dims_v"), HIDDEN_FEATURES)
            top_dims = _dims_from(meta, "top_dims")
            top = _take_tower(arrays, "top", top_dims, HIDDEN_FEATURES) if top_dims else None
            out = SoftmaxLayer(_require(arrays, "out.W"), _require(arrays, "out.b"))
            model = FusedClassifier(tower_a, tower_v, out, top, seed=seed, arch=arch)
        elif kind == "bilinear":
            tower1 = _take_tower(arrays, "tower1", _dims_from(meta, "dims_a"), HIDDEN_FEATURES)
            tower2 = _take_tower(arrays, "tower2", _dims_from(meta, "dims_v"), HIDDEN_FEATURES)
            variant = meta.get("variant", "")
            tree = None
            if "group_of" in meta:
                tree = LabelTree(
                    np.asarray(_dims_from(meta, "group_of"), dtype=np.int64),
                    int(meta.get("groups", "0")),
                )
            kwargs = dict(
                v1=_require(arrays, "head.V1"), v2=_require(arrays, "head.V2"),
                b=_require(arrays, "head.b"),
                lam=float(meta.get("lambda", "2.0")), tree=tree,
            )
            if variant == FULL:
                kwargs["w_stack"] = _require(arrays, "head.W")
            elif variant in (FACTORED, FACTORED_SHARED):
                kwargs["u1"] = _require(arrays, "head.U1")
                kwargs["u2"] = _require(arrays, "head.U2")
                kwargs["w"] = _require(arrays, "head.w")
            else:
                raise FormatError(f"unknown bilinear variant {variant!r}")
            head = BilinearHead(variant, tower1.feature_dim, tower2.feature_dim,
                                classes, **kwargs)
            model = BilinearClassifier(tower1, tower2, head, seed=seed, arch=arch)
        else:
            raise FormatError(f"unknown model kind {kind!r}")
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"inconsistent model contents: {exc}") from exc
    if arrays:
        raise FormatError(f"unused arrays in payload: {sorted(arrays)}")
    if model.num_classes != classes:
        raise FormatError(
            f"header says {classes} classes but parameters imply {model.num_classes}"
        )
    return model
