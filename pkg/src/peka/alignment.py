"""Knowledge-transfer training: pseudo-labels from the teacher's embedding
space, the distillation + structure-alignment objective, and the loop
that updates only adapters, projector, and classifier head.

Teacher embeddings are computed once for the whole dataset before the
first epoch and treated as constants from then on; pseudo-labels are
likewise built once, since the frozen teacher never changes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import (ADALORA_ORTHO_WEIGHT, AdapterSet, AdapterSpec,
                       adalora_step_schedule, attach, orthogonality_penalty)
from .autodiff import Tape, Tensor, cross_entropy_logits, kl_const, matmul
from .core import AdamState, adam_step, softmax_with_temperature
from .encoders import (ClassifierHead, Projector, StudentBackbone,
                       TeacherModel, forward_teacher, init_classifier,
                       init_projector)
from .errors import ConfigError, NanLossError, ShapeError


@dataclass(frozen=True)
class AlignmentConfig:
    """Training settings; the weights, temperature, and cluster count of
    the composite objective plus optimizer bookkeeping."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    tau: float = 1.0
    clusters: int = 10
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 7

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ConfigError("loss weights cannot both be zero")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.clusters < 2:
            raise ConfigError(f"cluster count must be >= 2, got {self.clusters}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


@dataclass(frozen=True)
class PseudoLabeler:
    """Nearest-centroid assignment over the teacher's embedding space;
    ties go to the lowest centroid index."""

    centroids: np.ndarray

    def assign(self, embeddings: np.ndarray) -> np.ndarray:
        d2 = ((embeddings[:, None, :] - self.centroids[None]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


def build_pseudo_labels(teacher_emb: np.ndarray, n_clusters: int,
                        seed) -> tuple[np.ndarray, np.ndarray]:
    """K-means over teacher embeddings (k-means++ seeding, at most 100
    Lloyd iterations, centroid-shift tolerance 1e-6), deterministic for a
    given seed. Returns (labels, centroids)."""
    x = np.asarray(teacher_emb, dtype=np.float64)
    n = x.shape[0]
    if n_clusters < 1:
        raise ConfigError(f"cluster count must be >= 1, got {n_clusters}")
    if n < n_clusters:
        raise ConfigError(f"{n} samples cannot form {n_clusters} clusters")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plusplus(x, n_clusters, rng)
    labeler = PseudoLabeler(centroids)
    labels = labeler.assign(x)
    for _ in range(100):
        new_centroids = centroids.copy()
        for j in range(n_clusters):
            members = labels == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
        new_centroids = _fill_empty_clusters(x, labels, new_centroids)
        shift = float(np.linalg.norm(new_centroids - centroids))
        centroids = new_centroids
        labels = PseudoLabeler(centroids).assign(x)
        if shift < 1e-6:
            break
    return labels, centroids


def _kmeans_plusplus(x: np.ndarray, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    for j in range(1, k):
        d2 = ((x[:, None, :] - centroids[None, :j]) ** 2).sum(axis=2).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
    return centroids


def _fill_empty_clusters(x: np.ndarray, labels: np.ndarray,
                         centroids: np.ndarray) -> np.ndarray:
    """Reseat empty clusters on the points farthest from their assigned
    centroid, lowest cluster index first, so the result is deterministic."""
    empty = [j for j in range(centroids.shape[0]) if not (labels == j).any()]
    if not empty:
        return centroids
    d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
    taken: set[int] = set()
    for j in empty:
        order = np.argsort(-d2, kind="stable")
        idx = next(int(i) for i in order if int(i) not in taken)
        taken.add(idx)
        centroids[j] = x[idx]
    return centroids


# -- losses --------------------------------------------------------------


def _leaf(tape: Tape, tensors: dict[str, Tensor], name: str,
          array: np.ndarray) -> Tensor:
    if name not in tensors:
        tensors[name] = tape.parameter(array)
    return tensors[name]


def _projector_forward(tape: Tape, x: Tensor, projector: Projector,
                       tensors: dict[str, Tensor]) -> Tensor:
    w1 = _leaf(tape, tensors, "projector.w1", projector.w1)
    b1 = _leaf(tape, tensors, "projector.b1", projector.b1)
    w2 = _leaf(tape, tensors, "projector.w2", projector.w2)
    b2 = _leaf(tape, tensors, "projector.b2", projector.b2)
    return (matmul(x, w1) + b1).gelu() @ w2 + b2


def _classifier_forward(tape: Tape, x: Tensor, classifier: ClassifierHead,
                        tensors: dict[str, Tensor]) -> Tensor:
    w = _leaf(tape, tensors, "classifier.w", classifier.w)
    b = _leaf(tape, tensors, "classifier.b", classifier.b)
    return matmul(x, w) + b


def _student_forward_tape(tape: Tape, backbone: StudentBackbone,
                          adapters: AdapterSet, x: Tensor,
                          tensors: dict[str, Tensor], training: bool,
                          dropout_rng) -> Tensor:
    h = x
    for layer in backbone.layers:
        w_const = tape.constant(layer.w)
        adapter = adapters.get(layer.name)
        if adapter is None:
            z = matmul(h, w_const)
        else:
            z = adapter.effective_matmul(tape, h, w_const, tensors,
                                         training, dropout_rng)
        z = z + tape.constant(layer.b)
        h = z.gelu() if layer.activation == "gelu" else z
    return h


def kd_loss(student_emb: Tensor, projector: Projector, teacher_emb,
            tau: float, tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Distillation loss: project the student embedding to the teacher's
    dimension, soften both sides at temperature tau, and take the mean
    row-wise KL(teacher || student). The teacher side is a constant."""
    teacher_emb = np.asarray(teacher_emb, dtype=np.float64)
    if teacher_emb.shape[0] != student_emb.shape[0]:
        raise ShapeError(f"batch mismatch: {student_emb.shape[0]} student rows "
                         f"vs {teacher_emb.shape[0]} teacher rows")
    if teacher_emb.shape[1] != projector.d_out:
        raise ShapeError(f"teacher dim {teacher_emb.shape[1]} does not match "
                         f"projector output {projector.d_out}")
    probs = softmax_with_temperature(teacher_emb, tau)
    return _kd_from_probs(student_emb, projector, probs, tau,
                          tensors if tensors is not None else {})


def _kd_from_probs(student_emb: Tensor, projector: Projector,
                   teacher_probs: np.ndarray, tau: float,
                   tensors: dict[str, Tensor]) -> Tensor:
    from .autodiff import softmax_t

    projected = _projector_forward(student_emb.tape, student_emb,
                                   projector, tensors)
    return kl_const(teacher_probs, softmax_t(projected, tau))


def struct_loss(student_emb: Tensor, classifier: ClassifierHead, labels,
                tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Mean cross-entropy of the classifier head's logits against the
    pseudo-labels."""
    logits = _classifier_forward(student_emb.tape, student_emb, classifier,
                                 tensors if tensors is not None else {})
    return cross_entropy_logits(logits, labels)


def total_loss(kd, struct, lambda1: float, lambda2: float):
    """Weighted sum of the two objective components; works on floats and
    on tape tensors alike."""
    return lambda1 * kd + lambda2 * struct


@dataclass
class BatchLoss:
    objective: Tensor  # what the optimizer minimizes (may include penalty)
    two_term: Tensor  # the weighted KD + structure loss on the same tape
    kd: float
    struct: float
    tensors: dict[str, Tensor]

    @property
    def total(self) -> float:
        return self.two_term.item()


def _batch_loss(backbone: StudentBackbone, adapters: AdapterSet,
                projector: Projector, classifier: ClassifierHead,
                x_batch: np.ndarray, teacher_probs: np.ndarray,
                labels: np.ndarray, cfg: AlignmentConfig,
                training: bool = False, dropout_rng=None) -> BatchLoss:
    tape = Tape()
    tensors: dict[str, Tensor] = {}
    x = tape.constant(x_batch)
    emb = _student_forward_tape(tape, backbone, adapters, x, tensors,
                                training, dropout_rng)
    kd = _kd_from_probs(emb, projector, teacher_probs, cfg.tau, tensors)
    st = struct_loss(emb, classifier, labels, tensors)
    two_term = total_loss(kd, st, cfg.lambda1, cfg.lambda2)
    objective = two_term
    penalty = orthogonality_penalty(tensors, adapters)
    if penalty is not None:
        objective = two_term + ADALORA_ORTHO_WEIGHT * penalty
    return BatchLoss(objective=objective, two_term=two_term,
                     kd=kd.item(), struct=st.item(), tensors=tensors)


def objective_value(backbone: StudentBackbone, adapters: AdapterSet,
                    projector: Projector, classifier: ClassifierHead,
                    x_batch: np.ndarray, teacher_probs: np.ndarray,
                    labels: np.ndarray, cfg: AlignmentConfig,
                    include_penalty: bool = False) -> float:
    """Plain-array evaluation of the training objective, independent of
    the tape; this is the route finite differences sample."""
    from .encoders import forward_student

    emb = forward_student(backbone, adapters, x_batch)
    proj = projector.forward(emb)
    q = softmax_with_temperature(proj, cfg.tau)
    mask = teacher_probs > 0.0
    kd = float(np.sum(teacher_probs[mask]
                      * (np.log(teacher_probs[mask]) - np.log(q[mask])))
               / x_batch.shape[0])
    logits = classifier.logits(emb)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    struct = float(np.mean(lse - logits[np.arange(logits.shape[0]), labels]))
    value = total_loss(kd, struct, cfg.lambda1, cfg.lambda2)
    if include_penalty and adapters.kind == "adalora":
        pen = 0.0
        for adapter in adapters.adapters.values():
            ppi = adapter.p.T @ adapter.p - np.eye(adapter.r0)
            qqi = adapter.q @ adapter.q.T - np.eye(adapter.r0)
            pen += float((ppi * ppi).sum() + (qqi * qqi).sum())
        value += ADALORA_ORTHO_WEIGHT * pen
    return value


def make_loss_fns(backbone: StudentBackbone, adapters: AdapterSet,
                  projector: Projector, classifier: ClassifierHead,
                  x_batch: np.ndarray, teacher_emb: np.ndarray,
                  labels: np.ndarray, cfg: AlignmentConfig,
                  include_penalty: bool = False):
    """Deterministic (dropout-free) loss and gradient closures over the
    full trainable set, for finite-difference audits. The loss closure is
    a tape-free array evaluation; the gradient closure runs the tape.

    Returns (loss_fn, grad_fn, params) where both closures accept a
    name -> array mapping with the same keys as ``params``.
    """
    params = {**adapters.params(), **projector.params(), **classifier.params()}
    teacher_probs = softmax_with_temperature(teacher_emb, cfg.tau)

    def _load(values) -> None:
        for name, arr in params.items():
            arr[...] = values[name]

    def loss_fn(values) -> float:
        _load(values)
        return objective_value(backbone, adapters, projector, classifier,
                               x_batch, teacher_probs, labels, cfg,
                               include_penalty)

    def grad_fn(values):
        _load(values)
        result = _batch_loss(backbone, adapters, projector, classifier,
                             x_batch, teacher_probs, labels, cfg)
        target = result.objective if include_penalty else result.two_term
        target.tape.backward(target)
        return {name: target.tape.grad(result.tensors[name])
                for name in params}

    return loss_fn, grad_fn, params


@dataclass(frozen=True)
class EpochStats:
    kd: float
    struct: float
    total: float


@dataclass
class AlignedModel:
    """Frozen backbone plus the trained adapters, projector, and
    classifier head, with the per-epoch loss history."""

    backbone: StudentBackbone
    adapters: AdapterSet
    projector: Projector
    classifier: ClassifierHead
    config: AlignmentConfig
    adapter_spec: AdapterSpec
    history: list[EpochStats] = field(default_factory=list)

    def embed(self, batch, projected: bool = False) -> np.ndarray:
        from .encoders import forward_student

        emb = forward_student(self.backbone, self.adapters, batch)
        if projected:
            emb = self.projector.forward(emb)
        return emb

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "kd_loss", "struct_loss", "total_loss"])
            for i, rec in enumerate(self.history):
                writer.writerow([i, f"{rec.kd:.6g}", f"{rec.struct:.6g}",
                                 f"{rec.total:.6g}"])


def train_alignment(backbone: StudentBackbone, teacher: TeacherModel,
                    dataset, adapter_spec: AdapterSpec,
                    config: AlignmentConfig) -> AlignedModel:
    """Run the knowledge-transfer stage and return the adapted model.

    Only adapter, projector, and classifier parameters receive Adam
    updates; the backbone and teacher stay frozen. With adapter kind
    ``none`` the model is a pass-through: no optimization runs and the
    echoed config shows zero epochs.
    """
    n = dataset.img_features.shape[0]
    if n == 0:
        raise ConfigError("dataset is empty")
    if dataset.img_features.shape[1] != backbone.d_in:
        raise ShapeError(f"dataset feature width {dataset.img_features.shape[1]} "
                         f"does not match student d_in {backbone.d_in}")
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    kmeans_seed, shuffle_seed, dropout_seed, adapter_seed, head_seed = seeds

    teacher_emb = forward_teacher(teacher, dataset.expr_counts)
    labels, _ = build_pseudo_labels(teacher_emb, config.clusters, kmeans_seed)
    teacher_probs = softmax_with_temperature(teacher_emb, config.tau)

    projector = init_projector(head_seed, backbone.d_emb, teacher.d_emb)
    classifier = init_classifier(head_seed, backbone.d_emb, config.clusters)

    epochs = config.epochs
    steps_per_epoch = -(-n // config.batch_size)
    schedule = ()
    if adapter_spec.kind == "adalora" and epochs > 0:
        prune_at = max(1, (epochs * steps_per_epoch) // 2)
        schedule = ((prune_at, adapter_spec.target_rank),)
    adapters = attach(backbone, adapter_spec, seed=adapter_seed,
                      schedule=schedule)
    if adapter_spec.kind == "none":
        epochs = 0

    params = {**adapters.params(), **projector.params(), **classifier.params()}
    states = {name: AdamState.for_param(arr) for name, arr in params.items()}
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    history: list[EpochStats] = []
    global_step = 0
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        kd_sum = 0.0
        struct_sum = 0.0
        n_steps = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            result = _batch_loss(backbone, adapters, projector, classifier,
                                 dataset.img_features[idx],
                                 teacher_probs[idx], labels[idx], config,
                                 training=True, dropout_rng=dropout_rng)
            if not np.isfinite(result.total):
                raise NanLossError(f"non-finite loss at epoch {epoch} "
                                   f"step {n_steps}")
            tape = result.objective.tape
            tape.backward(result.objective)
            for name, arr in params.items():
                grad = tape.grad(result.tensors[name])
                arr[...] = adam_step(arr, grad, states[name], config.lr)
            global_step += 1
            if adapters.kind == "adalora":
                for adapter in adapters.adapters.values():
                    lam_name = f"adapter.{adapter.target}.lam"
                    adapter.update_importance(tape.grad(result.tensors[lam_name]))
                    adalora_step_schedule(adapter, global_step)
            kd_sum += result.kd
            struct_sum += result.struct
            n_steps += 1
        kd_mean = kd_sum / n_steps
        struct_mean = struct_sum / n_steps
        history.append(EpochStats(
            kd=kd_mean, struct=struct_mean,
            total=total_loss(kd_mean, struct_mean,
                             config.lambda1, config.lambda2)))

    return AlignedModel(
        backbone=backbone, adapters=adapters, projector=projector,
        classifier=classifier, config=replace(config, epochs=epochs),
        adapter_spec=adapter_spec, history=history)
