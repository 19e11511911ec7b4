"""Frozen toy encoders plus the small trainable heads that bridge them.

The student maps precomputed tile-feature vectors to an embedding space;
the teacher maps expression profiles to its own embedding space. Both are
seeded MLPs whose weights never change after construction. The projector
(student dim -> teacher dim) and the classifier head are the trainable
pieces attached during alignment.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import as_matrix, gelu_array
from .errors import ShapeError

STUDENT_D_IN = 32
STUDENT_HIDDEN = (64, 64)
STUDENT_D_EMB = 48
TEACHER_HIDDEN = (64,)
TEACHER_D_EMB = 32
PROJECTOR_HIDDEN = 64


@dataclass(frozen=True)
class DenseLayer:
    """One frozen dense layer: out = act(x @ w + b)."""

    name: str
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (1, fan_out)
    activation: str  # "gelu" or "linear"


def _init_layers(rng: np.random.Generator, dims: list[int],
                 prefix: str) -> tuple[DenseLayer, ...]:
    """Kaiming-style seeded init; hidden layers GELU, final layer linear."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        b = rng.normal(0.0, 0.02, size=(1, fan_out))
        w.flags.writeable = False
        b.flags.writeable = False
        act = "gelu" if i < len(dims) - 2 else "linear"
        layers.append(DenseLayer(name=f"{prefix}{i}", w=w, b=b, activation=act))
    return tuple(layers)


def _mlp_forward(layers: tuple[DenseLayer, ...], x: np.ndarray) -> np.ndarray:
    h = x
    for layer in layers:
        h = h @ layer.w + layer.b
        if layer.activation == "gelu":
            h = gelu_array(h)
    return h


def _fingerprint(layers: tuple[DenseLayer, ...]) -> str:
    digest = hashlib.sha256()
    for layer in layers:
        digest.update(layer.w.tobytes())
        digest.update(layer.b.tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class StudentBackbone:
    """Frozen image-feature encoder; adapter deltas attach to its layers."""

    layers: tuple[DenseLayer, ...]
    d_in: int
    d_emb: int

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> DenseLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"backbone has no layer named {name!r}")

    def n_weight_params(self) -> int:
        """Weight-matrix entries only; bias vectors are not adapter targets."""
        return sum(layer.w.size for layer in self.layers)

    def fingerprint(self) -> str:
        return _fingerprint(self.layers)


@dataclass(frozen=True)
class TeacherModel:
    """Frozen expression encoder. Counts are log1p-compressed before the
    MLP so large values cannot saturate the activations."""

    layers: tuple[DenseLayer, ...]
    n_genes: int
    d_emb: int

    def fingerprint(self) -> str:
        return _fingerprint(self.layers)


def init_student(seed, d_in: int = STUDENT_D_IN,
                 hidden_dims=STUDENT_HIDDEN,
                 d_emb: int = STUDENT_D_EMB) -> StudentBackbone:
    """Seeded frozen student; identical seeds give bit-identical weights."""
    dims = [d_in, *hidden_dims, d_emb]
    if any(d < 1 for d in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    return StudentBackbone(layers=_init_layers(rng, dims, "dense"),
                           d_in=d_in, d_emb=d_emb)


def init_teacher(seed, n_genes: int, hidden_dims=TEACHER_HIDDEN,
                 d_emb: int = TEACHER_D_EMB) -> TeacherModel:
    """Seeded frozen teacher over expression profiles."""
    dims = [n_genes, *hidden_dims, d_emb]
    if any(d < 1 for d in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    return TeacherModel(layers=_init_layers(rng, dims, "tdense"),
                        n_genes=n_genes, d_emb=d_emb)


def forward_student(backbone: StudentBackbone, adapters, batch) -> np.ndarray:
    """Deterministic (evaluation-mode) forward. With adapters attached the
    effective weight of a targeted layer is w + delta; without adapters
    this is the plain frozen path."""
    x = as_matrix(batch, "batch")
    if x.shape[1] != backbone.d_in:
        raise ShapeError(f"batch width {x.shape[1]} does not match "
                         f"student d_in {backbone.d_in}")
    deltas = {}
    if adapters is not None:
        deltas = adapters.materialize(backbone)
    h = x
    for layer in backbone.layers:
        w = layer.w
        delta = deltas.get(layer.name)
        if delta is not None:
            w = w + delta
        h = h @ w + layer.b
        if layer.activation == "gelu":
            h = gelu_array(h)
    return h


def forward_teacher(teacher: TeacherModel, expr_batch) -> np.ndarray:
    """Deterministic teacher embeddings; never recorded on a tape."""
    x = as_matrix(expr_batch, "expr_batch")
    if x.shape[1] != teacher.n_genes:
        raise ShapeError(f"batch width {x.shape[1]} does not match "
                         f"teacher n_genes {teacher.n_genes}")
    return _mlp_forward(teacher.layers, np.log1p(x))


@dataclass
class Projector:
    """Trainable two-layer bridge from student to teacher embedding dims."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return gelu_array(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def params(self) -> dict[str, np.ndarray]:
        return {"projector.w1": self.w1, "projector.b1": self.b1,
                "projector.w2": self.w2, "projector.b2": self.b2}


@dataclass
class ClassifierHead:
    """Trainable linear head producing pseudo-label logits."""

    w: np.ndarray
    b: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.w.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w + self.b

    def params(self) -> dict[str, np.ndarray]:
        return {"classifier.w": self.w, "classifier.b": self.b}


def init_projector(seed, d_in: int, d_out: int,
                   hidden: int = PROJECTOR_HIDDEN) -> Projector:
    rng = np.random.default_rng(seed)
    return Projector(
        w1=rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, hidden)),
        b1=np.zeros((1, hidden)),
        w2=rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, d_out)),
        b2=np.zeros((1, d_out)),
    )


def init_classifier(seed, d_in: int, n_classes: int) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    return ClassifierHead(
        w=rng.normal(0.0, 0.02, size=(d_in, n_classes)),
        b=np.zeros((1, n_classes)),
    )
