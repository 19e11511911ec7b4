"""Parameter-efficient delta parameterizations for the frozen student.

Three kinds are supported:

* ``bone`` -- block-affine deltas. The target weight is viewed as b x b
  tiles; every tile in tile-column j shares one trainable block B_j, and
  the delta tile is W_tile @ B_j + B_j. Zero blocks give a delta of
  exactly zero, so training starts at the frozen model. This is the
  adapter the ``peka`` alias refers to.
* ``lora`` -- delta = (alpha / r) * B @ A with B zero-initialized.
  Dropout applies to the activation path during training only, never to
  the materialized delta.
* ``adalora`` -- SVD-form delta P diag(lam * mask) Q whose active ranks
  shrink over training following an importance schedule.

Deltas are pure functions of the adapter state; a freshly attached
adapter of any kind leaves every forward output unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .autodiff import Tape, Tensor, dropout, matmul, mul, scale
from .encoders import DenseLayer, StudentBackbone
from .errors import ConfigError, ShapeError

ADAPTER_KINDS = ("none", "bone", "lora", "adalora")

DEFAULT_BLOCK_SIZE = 4
DEFAULT_RANK = 8
# rank and alpha are scaled together from the reference setting (256, 32)
# so the effective delta coefficient alpha / r stays at 0.125
DEFAULT_ALPHA = 1.0
DEFAULT_DROPOUT = 0.1
DEFAULT_ADALORA_R0 = 8
ADALORA_ORTHO_WEIGHT = 0.1
ADALORA_EMA_DECAY = 0.85


def normalize_kind(kind: str) -> str:
    """Map user-facing adapter names to canonical kinds; 'peka' is the
    block-affine adapter."""
    kind = kind.strip().lower()
    if kind == "peka":
        return "bone"
    if kind not in ADAPTER_KINDS:
        raise ConfigError(f"unknown adapter kind {kind!r}; "
                          f"expected one of {ADAPTER_KINDS} or 'peka'")
    return kind


@dataclass(frozen=True)
class AdapterSpec:
    """Hyperparameters for attaching one adapter kind."""

    kind: str = "bone"
    block_size: int = DEFAULT_BLOCK_SIZE
    rank: int = DEFAULT_RANK
    alpha: float = DEFAULT_ALPHA
    dropout: float = DEFAULT_DROPOUT
    adalora_r0: int = DEFAULT_ADALORA_R0
    adalora_target_rank: int | None = None  # default r0 // 2

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.adalora_r0 < 1:
            raise ConfigError(f"adalora_r0 must be >= 1, got {self.adalora_r0}")
        target = self.adalora_target_rank
        if target is not None and not 1 <= target <= self.adalora_r0:
            raise ConfigError(f"adalora_target_rank must be in [1, {self.adalora_r0}], "
                              f"got {target}")

    @property
    def target_rank(self) -> int:
        if self.adalora_target_rank is not None:
            return self.adalora_target_rank
        return max(1, self.adalora_r0 // 2)


@dataclass
class BoneAdapter:
    """Block-affine adapter; ``blocks`` stores [B_0 | B_1 | ...] side by
    side as one (b, cols) array, column group j owning columns
    j*b:(j+1)*b."""

    target: str
    block_size: int
    blocks: np.ndarray

    @property
    def block_list(self) -> list[np.ndarray]:
        b = self.block_size
        g = self.blocks.shape[1] // b
        return [self.blocks[:, j * b:(j + 1) * b] for j in range(g)]

    def n_trainable(self) -> int:
        return self.blocks.size

    def params(self) -> dict[str, np.ndarray]:
        return {f"adapter.{self.target}.blocks": self.blocks}

    def delta(self, w: np.ndarray) -> np.ndarray:
        """Delta tile (i, j) = W_tile(i, j) @ B_j + B_j."""
        b = self.block_size
        n, m = w.shape
        if self.blocks.shape != (b, m):
            raise ShapeError(f"bone blocks for layer {self.target!r} have shape "
                             f"{self.blocks.shape}, expected {(b, m)}")
        # tiles stacked as (row-tile, col-tile, b, b) so matmul broadcasts
        w_tiles = w.reshape(n // b, b, m // b, b).transpose(0, 2, 1, 3)
        group_blocks = self.blocks.reshape(b, m // b, b).transpose(1, 0, 2)
        delta = w_tiles @ group_blocks + group_blocks
        return delta.transpose(0, 2, 1, 3).reshape(n, m)

    def effective_matmul(self, tape: Tape, x: Tensor, w_const: Tensor,
                         tensors: dict[str, Tensor], training: bool,
                         rng) -> Tensor:
        blocks_t = _leaf(tape, tensors, f"adapter.{self.target}.blocks", self.blocks)
        delta = _bone_delta_tensor(tape, blocks_t, w_const.value, self.block_size)
        return matmul(x, w_const + delta)


def _bone_delta_tensor(tape: Tape, blocks: Tensor, w: np.ndarray,
                       b: int) -> Tensor:
    """Tape node for the block-affine delta; w is frozen and carries no
    gradient."""
    n, m = w.shape
    w_tiles = w.reshape(n // b, b, m // b, b).transpose(0, 2, 1, 3)
    group_blocks = blocks.value.reshape(b, m // b, b).transpose(1, 0, 2)
    delta = w_tiles @ group_blocks + group_blocks
    value = delta.transpose(0, 2, 1, 3).reshape(n, m)

    def backward(g: np.ndarray) -> None:
        g_tiles = g.reshape(n // b, b, m // b, b).transpose(0, 2, 1, 3)
        dgroups = (w_tiles.transpose(0, 1, 3, 2) @ g_tiles).sum(axis=0) \
            + g_tiles.sum(axis=0)
        blocks.accumulate(dgroups.transpose(1, 0, 2).reshape(b, m))

    return tape.record(value, (blocks,), backward)


@dataclass
class LoraAdapter:
    """Low-rank adapter: delta = (alpha / r) * b_up @ a_down."""

    target: str
    rank: int
    alpha: float
    dropout_rate: float
    a: np.ndarray  # (r, fan_out), seeded Gaussian
    b: np.ndarray  # (fan_in, r), zero-initialized

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def n_trainable(self) -> int:
        return self.a.size + self.b.size

    def params(self) -> dict[str, np.ndarray]:
        return {f"adapter.{self.target}.a": self.a,
                f"adapter.{self.target}.b": self.b}

    def delta(self, w: np.ndarray) -> np.ndarray:
        if (self.b.shape[0], self.a.shape[1]) != w.shape:
            raise ShapeError(f"lora matrices for layer {self.target!r} produce "
                             f"{(self.b.shape[0], self.a.shape[1])}, "
                             f"expected {w.shape}")
        return self.scaling * (self.b @ self.a)

    def effective_matmul(self, tape: Tape, x: Tensor, w_const: Tensor,
                         tensors: dict[str, Tensor], training: bool,
                         rng) -> Tensor:
        a_t = _leaf(tape, tensors, f"adapter.{self.target}.a", self.a)
        b_t = _leaf(tape, tensors, f"adapter.{self.target}.b", self.b)
        if training and self.dropout_rate > 0.0:
            low = matmul(dropout(x, self.dropout_rate, rng), b_t)
            return matmul(x, w_const) + scale(matmul(low, a_t), self.scaling)
        return matmul(x, w_const + scale(matmul(b_t, a_t), self.scaling))


@dataclass
class AdaLoraAdapter:
    """SVD-form adapter with importance-driven rank pruning.

    ``mask`` permanently zeroes pruned singular directions; ``importance``
    is an EMA of |lam_i * dL/dlam_i| used to pick which directions to
    drop at scheduled steps.
    """

    target: str
    r0: int
    p: np.ndarray  # (fan_in, r0)
    lam: np.ndarray  # (1, r0), zero-initialized
    q: np.ndarray  # (r0, fan_out)
    mask: np.ndarray  # (1, r0) of {0.0, 1.0}
    importance: np.ndarray  # (r0,)
    schedule: list[tuple[int, int]] = field(default_factory=list)
    ema_decay: float = ADALORA_EMA_DECAY

    @property
    def active_rank(self) -> int:
        return int(self.mask.sum())

    def n_trainable(self) -> int:
        return self.p.size + self.lam.size + self.q.size

    def params(self) -> dict[str, np.ndarray]:
        return {f"adapter.{self.target}.p": self.p,
                f"adapter.{self.target}.lam": self.lam,
                f"adapter.{self.target}.q": self.q}

    def delta(self, w: np.ndarray) -> np.ndarray:
        if (self.p.shape[0], self.q.shape[1]) != w.shape:
            raise ShapeError(f"adalora matrices for layer {self.target!r} produce "
                             f"{(self.p.shape[0], self.q.shape[1])}, "
                             f"expected {w.shape}")
        return (self.p * (self.lam * self.mask)) @ self.q

    def effective_matmul(self, tape: Tape, x: Tensor, w_const: Tensor,
                         tensors: dict[str, Tensor], training: bool,
                         rng) -> Tensor:
        p_t = _leaf(tape, tensors, f"adapter.{self.target}.p", self.p)
        lam_t = _leaf(tape, tensors, f"adapter.{self.target}.lam", self.lam)
        q_t = _leaf(tape, tensors, f"adapter.{self.target}.q", self.q)
        masked = mul(lam_t, tape.constant(self.mask))
        delta = matmul(mul(p_t, masked), q_t)
        return matmul(x, w_const + delta)

    def update_importance(self, lam_grad: np.ndarray) -> None:
        sensitivity = np.abs(self.lam * lam_grad).ravel()
        self.importance = (self.ema_decay * self.importance
                           + (1.0 - self.ema_decay) * sensitivity)


def adalora_step_schedule(adapter: AdaLoraAdapter, global_step: int) -> None:
    """Apply any pruning event scheduled at this exact step. Keeps the
    highest-importance active ranks; ties keep the lowest index. Masking
    is permanent."""
    for step, target in adapter.schedule:
        if step != global_step:
            continue
        active = np.flatnonzero(adapter.mask.ravel() > 0.0)
        if target > active.size:
            raise ValueError(f"schedule target rank {target} exceeds "
                             f"{active.size} active ranks on {adapter.target!r}")
        order = sorted(active, key=lambda i: (-adapter.importance[i], i))
        keep = set(order[:target])
        new_mask = np.zeros_like(adapter.mask)
        new_mask[0, sorted(keep)] = 1.0
        adapter.mask = new_mask


Adapter = BoneAdapter | LoraAdapter | AdaLoraAdapter


@dataclass
class AdapterSet:
    """At most one adapter per layer; all adapters share one kind."""

    kind: str
    adapters: dict[str, Adapter] = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "AdapterSet":
        return cls(kind="none")

    def get(self, layer_name: str) -> Adapter | None:
        return self.adapters.get(layer_name)

    def materialize(self, backbone: StudentBackbone) -> dict[str, np.ndarray]:
        """Layer name -> delta array, shape-checked against the backbone."""
        deltas = {}
        for name, adapter in self.adapters.items():
            layer = backbone.layer(name)
            deltas[name] = adapter.delta(layer.w)
        return deltas

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for adapter in self.adapters.values():
            out.update(adapter.params())
        return out

    def n_trainable(self) -> int:
        return sum(a.n_trainable() for a in self.adapters.values())


def _leaf(tape: Tape, tensors: dict[str, Tensor], name: str,
          array: np.ndarray) -> Tensor:
    if name not in tensors:
        tensors[name] = tape.parameter(array)
    return tensors[name]


def _resolve_layers(backbone: StudentBackbone,
                    layer_names) -> list[DenseLayer]:
    if layer_names is None:
        return list(backbone.layers)
    layers = []
    for name in layer_names:
        try:
            layers.append(backbone.layer(name))
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    return layers


def attach_bone(backbone: StudentBackbone, layer_names=None,
                block_size: int = DEFAULT_BLOCK_SIZE) -> AdapterSet:
    """One zero-initialized block-affine adapter per targeted layer.
    The block size must divide both dimensions of every target."""
    adapters: dict[str, Adapter] = {}
    for layer in _resolve_layers(backbone, layer_names):
        n, m = layer.w.shape
        if n % block_size or m % block_size:
            raise ConfigError(
                f"block size {block_size} does not divide layer "
                f"{layer.name!r} of shape {n}x{m}")
        adapters[layer.name] = BoneAdapter(
            target=layer.name, block_size=block_size,
            blocks=np.zeros((block_size, m)))
    return AdapterSet(kind="bone", adapters=adapters)


def attach_lora(backbone: StudentBackbone, layer_names=None,
                r: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA,
                dropout_rate: float = DEFAULT_DROPOUT, seed=0) -> AdapterSet:
    """Low-rank adapters with seeded-Gaussian A and zero B."""
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout must be in [0, 1), got {dropout_rate}")
    rng = np.random.default_rng(seed)
    adapters: dict[str, Adapter] = {}
    for layer in _resolve_layers(backbone, layer_names):
        n, m = layer.w.shape
        if not 1 <= r <= min(n, m):
            raise ConfigError(f"rank {r} out of range [1, {min(n, m)}] for "
                              f"layer {layer.name!r} of shape {n}x{m}")
        adapters[layer.name] = LoraAdapter(
            target=layer.name, rank=r, alpha=alpha, dropout_rate=dropout_rate,
            a=rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, m)),
            b=np.zeros((n, r)))
    return AdapterSet(kind="lora", adapters=adapters)


def attach_adalora(backbone: StudentBackbone, layer_names=None,
                   r0: int = DEFAULT_ADALORA_R0, seed=0,
                   schedule=()) -> AdapterSet:
    """SVD-form adapters with zero singular values, so the fresh delta is
    exactly zero; the shared schedule drives later rank pruning."""
    rng = np.random.default_rng(seed)
    adapters: dict[str, Adapter] = {}
    for layer in _resolve_layers(backbone, layer_names):
        n, m = layer.w.shape
        if not 1 <= r0 <= min(n, m):
            raise ConfigError(f"initial rank {r0} out of range [1, {min(n, m)}] "
                              f"for layer {layer.name!r} of shape {n}x{m}")
        adapters[layer.name] = AdaLoraAdapter(
            target=layer.name, r0=r0,
            p=rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, r0)),
            lam=np.zeros((1, r0)),
            q=rng.normal(0.0, 1.0 / np.sqrt(r0), size=(r0, m)),
            mask=np.ones((1, r0)),
            importance=np.zeros(r0),
            schedule=list(schedule))
    return AdapterSet(kind="adalora", adapters=adapters)


def attach(backbone: StudentBackbone, spec: AdapterSpec, seed=0,
           schedule=()) -> AdapterSet:
    """Attach adapters of the requested kind to every dense layer."""
    if spec.kind == "none":
        return AdapterSet.empty()
    if spec.kind == "bone":
        return attach_bone(backbone, block_size=spec.block_size)
    if spec.kind == "lora":
        return attach_lora(backbone, r=spec.rank, alpha=spec.alpha,
                           dropout_rate=spec.dropout, seed=seed)
    return attach_adalora(backbone, r0=spec.adalora_r0, seed=seed,
                          schedule=schedule)


def merge(backbone: StudentBackbone, adapters: AdapterSet) -> StudentBackbone:
    """New backbone with w <- w + delta per targeted layer. Merging the
    same set twice applies the delta twice."""
    deltas = adapters.materialize(backbone)
    layers = []
    for layer in backbone.layers:
        delta = deltas.get(layer.name)
        w = layer.w if delta is None else layer.w + delta
        w = np.array(w)
        b = np.array(layer.b)
        w.flags.writeable = False
        b.flags.writeable = False
        layers.append(DenseLayer(name=layer.name, w=w, b=b,
                                 activation=layer.activation))
    return StudentBackbone(layers=tuple(layers), d_in=backbone.d_in,
                           d_emb=backbone.d_emb)


def trainable_fraction(backbone: StudentBackbone,
                       adapters: AdapterSet) -> float:
    """Adapter parameters over backbone weight-matrix parameters, reduced
    as an exact rational before the final division."""
    ratio = Fraction(adapters.n_trainable(), backbone.n_weight_params())
    return float(ratio)


def orthogonality_penalty(tensors: dict[str, Tensor],
                          adapters: AdapterSet) -> Tensor | None:
    """Sum of ||P^T P - I||_F^2 + ||Q Q^T - I||_F^2 over adalora adapters,
    built on the tape that owns ``tensors``."""
    if adapters.kind != "adalora":
        return None
    from .autodiff import sum_squares  # local to avoid import cycle noise

    total = None
    for adapter in adapters.adapters.values():
        p_t = tensors[f"adapter.{adapter.target}.p"]
        q_t = tensors[f"adapter.{adapter.target}.q"]
        tape = p_t.tape
        eye = tape.constant(np.eye(adapter.r0))
        term = sum_squares(matmul(p_t.T, p_t) - eye) \
            + sum_squares(matmul(q_t, q_t.T) - eye)
        total = term if total is None else total + term
    return total
