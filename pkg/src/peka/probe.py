"""Linear-decodability evaluation of an embedding: select the most
variable genes, reduce the embedding with PCA, fit a ridge head, and
score per-gene Pearson correlation under k-fold cross-validation.

Expression is log1p-transformed both for variance ranking and as the
regression target. A constant prediction or truth vector makes the
correlation undefined; such cells are reported as 0 with an explicit
flag and excluded from means rather than silently coerced.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import svd_thin
from .errors import ConfigError, ShapeError, SingularMatrixError

DEFAULT_PCA_K = 256
DEFAULT_RIDGE_LAMBDA = 1.0
DEFAULT_FOLDS = 5
DEFAULT_HVG = 50


def select_hvg(expr: np.ndarray, n_top: int) -> list[int]:
    """Indices of the n_top genes with the largest log1p-count variance,
    in descending order; ties keep the lower index."""
    expr = np.asarray(expr, dtype=np.float64)
    n, n_genes = expr.shape
    if n < 2:
        raise ConfigError(f"need at least 2 samples to rank variance, got {n}")
    if not 1 <= n_top <= n_genes:
        raise ConfigError(f"n_top {n_top} out of range [1, {n_genes}]")
    variances = np.log1p(expr).var(axis=0)
    order = np.argsort(-variances, kind="stable")
    return [int(i) for i in order[:n_top]]


@dataclass
class PcaModel:
    mean: np.ndarray  # (1, d)
    components: np.ndarray  # (k, d), rows orthonormal
    singular_values: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components.T

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components + self.mean


def fit_pca(x: np.ndarray, k: int) -> PcaModel:
    """Mean-centered SVD; components are the top-k right singular
    vectors."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ConfigError(f"k out of range: {k} not in [1, {min(n, d)}]")
    mean = x.mean(axis=0, keepdims=True)
    _, s, v = svd_thin(x - mean, k)
    return PcaModel(mean=mean, components=v.T, singular_values=s)


@dataclass
class RidgeModel:
    weights: np.ndarray  # (k, n_targets)
    intercept: np.ndarray  # (1, n_targets)
    ridge_lambda: float

    def predict(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weights + self.intercept


def fit_ridge(z: np.ndarray, y: np.ndarray, lam: float) -> RidgeModel:
    """Closed-form ridge on centered features and targets, solved with a
    Cholesky factorization rather than an explicit inverse. The intercept
    absorbs the feature and target means, so it equals the target mean
    whenever z is centered."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if z.shape[0] != y.shape[0]:
        raise ShapeError(f"{z.shape[0]} feature rows vs {y.shape[0]} target rows")
    if z.shape[0] < 1:
        raise ConfigError("ridge needs at least one sample")
    if lam < 0:
        raise ConfigError(f"ridge lambda must be >= 0, got {lam}")
    z_mean = z.mean(axis=0, keepdims=True)
    y_mean = y.mean(axis=0, keepdims=True)
    zc = z - z_mean
    yc = y - y_mean
    gram = zc.T @ zc + lam * np.eye(z.shape[1])
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "normal equations are singular; use a ridge lambda > 0") from exc
    rhs = zc.T @ yc
    weights = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    intercept = y_mean - z_mean @ weights
    return RidgeModel(weights=weights, intercept=intercept, ridge_lambda=lam)


@dataclass
class ProbeModel:
    """PCA basis plus ridge head, fit on one training split."""

    pca: PcaModel
    ridge: RidgeModel

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.ridge.predict(self.pca.transform(x))


def fit_probe(embeddings: np.ndarray, targets: np.ndarray, pca_k: int,
              ridge_lambda: float) -> ProbeModel:
    pca = fit_pca(embeddings, pca_k)
    ridge = fit_ridge(pca.transform(embeddings), targets, ridge_lambda)
    return ProbeModel(pca=pca, ridge=ridge)


class PccResult(NamedTuple):
    value: float
    defined: bool


def pearson_pcc(pred, truth) -> PccResult:
    """Pearson correlation between two vectors. A constant vector on
    either side makes the correlation undefined: the value is reported
    as 0.0 with defined=False."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    if pred.shape[0] < 2:
        raise ConfigError("correlation needs at least 2 samples")
    px = pred - pred.mean()
    py = truth - truth.mean()
    denom = np.sqrt((px * px).sum()) * np.sqrt((py * py).sum())
    if denom == 0.0:
        return PccResult(0.0, False)
    return PccResult(float((px * py).sum() / denom), True)


@dataclass
class GenePcc:
    per_fold: list[float]
    undefined: list[bool]

    @property
    def mean(self) -> float | None:
        defined = [v for v, u in zip(self.per_fold, self.undefined) if not u]
        if not defined:
            return None
        return float(np.mean(defined))


@dataclass
class EvalReport:
    """Per-gene, per-fold correlations plus their means and the resolved
    evaluation settings."""

    hvg_names: list[str]
    fold_count: int
    per_gene: dict[str, GenePcc]
    mean_pcc: float
    undefined_cells: int
    excluded_genes: list[str]
    config: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gene", "fold", "pcc", "undefined_flag"])
            for name in self.hvg_names:
                rec = self.per_gene[name]
                for fold, (value, undef) in enumerate(
                        zip(rec.per_fold, rec.undefined)):
                    writer.writerow([name, fold, f"{value:.6f}", int(undef)])
            for name in self.hvg_names:
                rec = self.per_gene[name]
                mean = rec.mean
                writer.writerow([name, "mean",
                                 "" if mean is None else f"{mean:.6f}",
                                 int(mean is None)])
            writer.writerow(["ALL", "mean", f"{self.mean_pcc:.6f}", 0])
            writer.writerow(["ALL", "undefined_cells",
                             str(self.undefined_cells), ""])

    def to_text(self) -> str:
        lines = [f"{'gene':<10} " + " ".join(f"fold{f:<2}" for f in
                                             range(self.fold_count))
                 + "   mean"]
        for name in self.hvg_names:
            rec = self.per_gene[name]
            cells = " ".join(
                " undef" if undef else f"{value:6.3f}"
                for value, undef in zip(rec.per_fold, rec.undefined))
            mean = rec.mean
            mean_txt = " undef" if mean is None else f"{mean:6.3f}"
            lines.append(f"{name:<10} {cells}  {mean_txt}")
        lines.append(f"mean PCC over {len(self.hvg_names) - len(self.excluded_genes)}"
                     f" genes: {self.mean_pcc:.4f}")
        if self.undefined_cells:
            lines.append(f"undefined cells: {self.undefined_cells}; "
                         f"genes excluded from mean: {len(self.excluded_genes)}")
        return "\n".join(lines) + "\n"


def resolve_pca_k(requested: int | None, n_train: int, d: int) -> int:
    """Clamp the requested component count so small splits degrade
    gracefully."""
    k = DEFAULT_PCA_K if requested is None else requested
    return max(1, min(k, n_train - 1, d))


def fold_assignment(n: int, folds: int, seed) -> list[np.ndarray]:
    """Seeded shuffled split into ``folds`` test index sets whose sizes
    differ by at most one; every sample lands in exactly one."""
    rng = np.random.default_rng(seed)
    return np.array_split(rng.permutation(n), folds)


def cross_validate(embeddings: np.ndarray, expr: np.ndarray, hvg_idx,
                   folds: int = DEFAULT_FOLDS, seed=0,
                   pca_k: int | None = None,
                   ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
                   gene_names=None) -> EvalReport:
    """Seeded shuffled k-fold evaluation: fit the probe on each training
    split, predict the held-out split, and score per-gene PCC on the
    log1p-transformed expression panel."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    expr = np.asarray(expr, dtype=np.float64)
    n = embeddings.shape[0]
    if expr.shape[0] != n:
        raise ShapeError(f"{n} embedding rows vs {expr.shape[0]} expression rows")
    if folds < 2:
        raise ConfigError(f"folds must be >= 2, got {folds}")
    if n < folds:
        raise ConfigError(f"{n} samples cannot fill {folds} folds")
    hvg_idx = [int(i) for i in hvg_idx]
    if any(not 0 <= i < expr.shape[1] for i in hvg_idx):
        raise ConfigError("HVG index out of range")
    if gene_names is None:
        names = [f"G{i + 1:04d}" for i in hvg_idx]
    else:
        names = [gene_names[i] for i in hvg_idx]

    targets = np.log1p(expr[:, hvg_idx])
    rng = np.random.default_rng(seed)
    assignment = np.array_split(rng.permutation(n), folds)
    for part in assignment:
        if part.size < 2:
            raise ConfigError(f"a fold would hold {part.size} test samples; "
                              f"use fewer folds")

    per_gene = {name: GenePcc(per_fold=[], undefined=[]) for name in names}
    for test_idx in assignment:
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        train_idx = np.flatnonzero(mask)
        k = resolve_pca_k(pca_k, train_idx.size, embeddings.shape[1])
        probe = fit_probe(embeddings[train_idx], targets[train_idx],
                          k, ridge_lambda)
        pred = probe.predict(embeddings[test_idx])
        truth = targets[test_idx]
        for g, name in enumerate(names):
            value, defined = pearson_pcc(pred[:, g], truth[:, g])
            per_gene[name].per_fold.append(value)
            per_gene[name].undefined.append(not defined)

    gene_means = {name: rec.mean for name, rec in per_gene.items()}
    excluded = [name for name, mean in gene_means.items() if mean is None]
    kept = [mean for mean in gene_means.values() if mean is not None]
    if not kept:
        raise ConfigError("every gene produced undefined correlations")
    undefined_cells = sum(sum(rec.undefined) for rec in per_gene.values())
    return EvalReport(
        hvg_names=names,
        fold_count=folds,
        per_gene=per_gene,
        mean_pcc=float(np.mean(kept)),
        undefined_cells=undefined_cells,
        excluded_genes=excluded,
        config={"folds": folds,
                "seed": int(seed) if isinstance(seed, (int, np.integer)) else str(seed),
                "pca_k": pca_k, "ridge_lambda": ridge_lambda,
                "n_samples": n, "n_hvg": len(hvg_idx)},
    )


def read_eval_csv(path) -> tuple[dict[str, list[float]], float]:
    """Reload the per-fold PCC cells and summary mean from a report CSV;
    used to re-render and audit persisted results."""
    cells: dict[str, list[float]] = {}
    mean_pcc = None
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "gene":
                continue
            gene, fold, value = row[0], row[1], row[2]
            if gene == "ALL" and fold == "mean":
                mean_pcc = float(value)
            elif fold not in ("mean", "undefined_cells") and value != "":
                cells.setdefault(gene, []).append(float(value))
    if mean_pcc is None:
        raise ValueError(f"no summary row found in {path}")
    return cells, mean_pcc
