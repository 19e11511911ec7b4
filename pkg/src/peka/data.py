"""Synthetic paired-modality data and its on-disk formats.

The generator draws a latent mixture of Gaussians, emits Poisson
expression counts from all latent dimensions, and builds image features
from only the first ``d_shared`` latent dimensions through a fixed tanh
MLP plus noise. Expression variation driven by the non-shared dimensions
is therefore invisible to the image modality by construction, which is
the dial that makes adapter-vs-baseline comparisons meaningful.

Image noise is heteroscedastic: even-indexed channels carry the latent
signal with mild noise, odd-indexed channels are noise-dominated
(their noise scale is ``_DISTRACTOR_GAIN`` times larger), modeling the
many low-information dimensions of real tile embeddings. ``noise_img``
scales the whole profile, so a zero setting makes the image features an
exactly deterministic function of the shared latents.

Binary format (little-endian): magic ``PEKD``, version u32, n u32,
d_in u32, G u32, n*d_in float64 image features (row-major), n*G float64
expression counts, then G gene names each prefixed with a u16 byte
length.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigError, HeaderMismatchError,
                     ShapeError, TruncatedFileError, UnsupportedVersionError)

log = logging.getLogger(__name__)

MAGIC = b"PEKD"
FORMAT_VERSION = 1

# latent mixture geometry: cluster centers are wider in the dimensions the
# image cannot see, so cluster identity carries real expression value;
# within-cluster scatter is unit in shared dims, tighter in unseen dims
_CENTER_SHARED = 2.5
_CENTER_UNSEEN = 3.5
_WITHIN_UNSEEN = 0.6
_LOADING_SCALE = 1.4
_GENE_OFFSET_STD = 0.7
_IMG_HIDDEN = 64
_DISTRACTOR_GAIN = 15.0  # odd image channels are this much noisier

DEFAULT_MIN_TOTAL_COUNTS = 10
DEFAULT_MIN_GENES_DETECTED = 3


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 2000
    d_latent: int = 8
    d_shared: int = 4
    d_in: int = 32
    n_genes: int = 60
    cluster_count: int = 10
    noise_img: float = 0.1
    noise_expr: float = 0.0
    rate_scale: float = 3.0
    seed: int = 7

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.d_latent < 1:
            raise ConfigError(f"d_latent must be >= 1, got {self.d_latent}")
        if not 0 <= self.d_shared <= self.d_latent:
            raise ConfigError(f"d_shared {self.d_shared} must be in "
                              f"[0, d_latent={self.d_latent}]")
        if self.d_in < 1 or self.n_genes < 1:
            raise ConfigError("d_in and n_genes must be >= 1")
        if self.cluster_count < 1:
            raise ConfigError(f"cluster_count must be >= 1, got {self.cluster_count}")
        if self.noise_img < 0 or self.noise_expr < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.rate_scale <= 0:
            raise ConfigError(f"rate_scale must be positive, got {self.rate_scale}")


@dataclass
class PairedDataset:
    """Aligned image-feature and expression-count rows; row i of both
    matrices describes the same sample."""

    img_features: np.ndarray  # (n, d_in)
    expr_counts: np.ndarray  # (n, G), entries >= 0
    gene_names: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.img_features.ndim != 2 or self.expr_counts.ndim != 2:
            raise ShapeError("dataset matrices must be 2-D")
        if self.img_features.shape[0] != self.expr_counts.shape[0]:
            raise ShapeError(f"row mismatch: {self.img_features.shape[0]} image "
                             f"rows vs {self.expr_counts.shape[0]} expression rows")
        if len(self.gene_names) != self.expr_counts.shape[1]:
            raise ShapeError(f"{len(self.gene_names)} gene names for "
                             f"{self.expr_counts.shape[1]} expression columns")
        if not np.isfinite(self.img_features).all():
            raise ValueError("image features contain non-finite entries")
        if not np.isfinite(self.expr_counts).all():
            raise ValueError("expression counts contain non-finite entries")
        if np.any(self.expr_counts < 0):
            raise ValueError("expression counts must be non-negative")

    @property
    def n(self) -> int:
        return self.img_features.shape[0]

    @property
    def n_genes(self) -> int:
        return self.expr_counts.shape[1]

    @property
    def d_in(self) -> int:
        return self.img_features.shape[1]


def default_gene_names(n_genes: int) -> list[str]:
    return [f"G{i + 1:04d}" for i in range(n_genes)]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def generate_synthetic(cfg: GeneratorConfig) -> PairedDataset:
    """Draw one dataset from the latent-factor model; bit-identical for a
    given config."""
    rng = np.random.default_rng(cfg.seed)
    centers = rng.normal(0.0, 1.0, size=(cfg.cluster_count, cfg.d_latent))
    centers[:, :cfg.d_shared] *= _CENTER_SHARED
    centers[:, cfg.d_shared:] *= _CENTER_UNSEEN
    loadings = rng.normal(0.0, _LOADING_SCALE / np.sqrt(cfg.d_latent),
                          size=(cfg.n_genes, cfg.d_latent))
    offsets = rng.normal(0.0, _GENE_OFFSET_STD, size=(1, cfg.n_genes))
    n_signal = cfg.d_in - cfg.d_in // 2
    v1 = rng.normal(0.0, 1.0, size=(cfg.d_shared, _IMG_HIDDEN))
    c1 = rng.normal(0.0, 0.3, size=(1, _IMG_HIDDEN))
    v2 = rng.normal(0.0, np.sqrt(2.0 / _IMG_HIDDEN),
                    size=(_IMG_HIDDEN, n_signal))
    c2 = rng.normal(0.0, 0.3, size=(1, n_signal))

    assignments = rng.integers(cfg.cluster_count, size=cfg.n)
    within = np.ones(cfg.d_latent)
    within[cfg.d_shared:] = _WITHIN_UNSEEN
    z = centers[assignments] \
        + rng.normal(0.0, 1.0, size=(cfg.n, cfg.d_latent)) * within

    logits = z @ loadings.T + offsets
    if cfg.noise_expr > 0:
        logits = logits + rng.normal(0.0, cfg.noise_expr, size=logits.shape)
    rates = cfg.rate_scale * _softplus(logits)
    counts = rng.poisson(rates).astype(np.float64)

    img = np.zeros((cfg.n, cfg.d_in))
    img[:, 0::2] = np.tanh(z[:, :cfg.d_shared] @ v1 + c1) @ v2 + c2
    if cfg.noise_img > 0:
        noise_scale = np.full(cfg.d_in, cfg.noise_img)
        noise_scale[1::2] *= _DISTRACTOR_GAIN
        img = img + rng.normal(0.0, 1.0, size=img.shape) * noise_scale

    return PairedDataset(
        img_features=np.ascontiguousarray(img),
        expr_counts=np.ascontiguousarray(counts),
        gene_names=default_gene_names(cfg.n_genes),
        provenance={"generator": asdict(cfg)},
    )


def qc_filter(ds: PairedDataset, min_total_counts: float = DEFAULT_MIN_TOTAL_COUNTS,
              min_genes_detected: int = DEFAULT_MIN_GENES_DETECTED) -> PairedDataset:
    """Keep rows with enough total counts and enough detected (nonzero)
    genes; order is preserved. An empty result is an error."""
    if min_total_counts < 0 or min_genes_detected < 0:
        raise ConfigError("QC thresholds must be >= 0")
    totals = ds.expr_counts.sum(axis=1)
    detected = (ds.expr_counts > 0).sum(axis=1)
    keep = (totals >= min_total_counts) & (detected >= min_genes_detected)
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ConfigError(
            f"QC removed every sample (min_total_counts={min_total_counts}, "
            f"min_genes_detected={min_genes_detected})")
    log.info("qc_filter kept %d of %d samples", n_kept, ds.n)
    provenance = dict(ds.provenance)
    provenance["qc"] = {"min_total_counts": min_total_counts,
                        "min_genes_detected": min_genes_detected,
                        "kept": n_kept, "dropped": ds.n - n_kept}
    return PairedDataset(
        img_features=np.ascontiguousarray(ds.img_features[keep]),
        expr_counts=np.ascontiguousarray(ds.expr_counts[keep]),
        gene_names=list(ds.gene_names),
        provenance=provenance,
    )


def save_dataset(ds: PairedDataset, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, ds.n, ds.d_in,
                             ds.n_genes))
        fh.write(np.ascontiguousarray(ds.img_features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.expr_counts, dtype="<f8").tobytes())
        for name in ds.gene_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"file ends inside {what}: wanted {count} "
                                 f"bytes, got {len(data)}")
    return data


def load_dataset(path) -> PairedDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"{path} does not start with {MAGIC!r} "
                                f"(got {magic!r})")
        version, n, d_in, n_genes = struct.unpack(
            "<IIII", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"{path} is format version {version}; "
                                          f"this build reads {FORMAT_VERSION}")
        if n < 1 or d_in < 1 or n_genes < 1:
            raise HeaderMismatchError(f"{path} header has a zero dimension: "
                                      f"n={n}, d_in={d_in}, G={n_genes}")
        img = np.frombuffer(
            _read_exact(fh, 8 * n * d_in, "image features"),
            dtype="<f8").reshape(n, d_in).copy()
        expr = np.frombuffer(
            _read_exact(fh, 8 * n * n_genes, "expression counts"),
            dtype="<f8").reshape(n, n_genes).copy()
        names = []
        for i in range(n_genes):
            (length,) = struct.unpack("<H", _read_exact(fh, 2, f"gene name {i}"))
            names.append(_read_exact(fh, length, f"gene name {i}").decode("utf-8"))
        trailing = fh.read(1)
        if trailing:
            raise HeaderMismatchError(f"{path} has trailing bytes beyond the "
                                      f"payload promised by its header")
    return PairedDataset(img_features=img, expr_counts=expr, gene_names=names,
                         provenance={"origin": str(path)})


def load_dataset_csv(path) -> PairedDataset:
    """Import from CSV with a ``sample_id`` column, ``img_0..img_{d-1}``
    feature columns, and one column per gene name."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        if not header or header[0] != "sample_id":
            raise ConfigError(f"{path} must start with a 'sample_id' column")
        img_cols = [i for i, name in enumerate(header) if name.startswith("img_")]
        if not img_cols:
            raise ConfigError(f"{path} has no img_* columns")
        expected = [f"img_{j}" for j in range(len(img_cols))]
        got = [header[i] for i in img_cols]
        if got != expected:
            raise ConfigError(f"img_* columns must be contiguous and ordered; "
                              f"got {got}")
        gene_cols = [i for i in range(1, len(header)) if i not in img_cols]
        gene_names = [header[i] for i in gene_cols]
        if not gene_names:
            raise ConfigError(f"{path} has no gene columns")
        img_rows, expr_rows = [], []
        for row in reader:
            if not row:
                continue
            img_rows.append([float(row[i]) for i in img_cols])
            expr_rows.append([float(row[i]) for i in gene_cols])
    if not img_rows:
        raise ConfigError(f"{path} holds no samples")
    return PairedDataset(
        img_features=np.asarray(img_rows, dtype=np.float64),
        expr_counts=np.asarray(expr_rows, dtype=np.float64),
        gene_names=gene_names,
        provenance={"origin": str(path), "format": "csv"},
    )
