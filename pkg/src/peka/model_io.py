"""Versioned binary container for aligned models.

Layout (little-endian): magic ``PEKM``, version u32, a u32-length-prefixed
JSON config blob (structure, hyperparameters, history), a u32 section
count, then one section per named matrix: u16 name length, UTF-8 name,
rows u32, cols u32, row-major float64 data. One format serves every
adapter kind.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .adapters import (AdaLoraAdapter, AdapterSet, AdapterSpec, BoneAdapter,
                       LoraAdapter)
from .alignment import AlignedModel, AlignmentConfig, EpochStats
from .encoders import ClassifierHead, DenseLayer, Projector, StudentBackbone
from .errors import (BadMagicError, HeaderMismatchError, TruncatedFileError,
                     UnsupportedVersionError)

MAGIC = b"PEKM"
FORMAT_VERSION = 1


def _collect_sections(model: AlignedModel) -> dict[str, np.ndarray]:
    sections: dict[str, np.ndarray] = {}
    for layer in model.backbone.layers:
        sections[f"backbone.{layer.name}.w"] = layer.w
        sections[f"backbone.{layer.name}.b"] = layer.b
    for name, adapter in model.adapters.adapters.items():
        sections.update(adapter.params())
        if isinstance(adapter, AdaLoraAdapter):
            sections[f"adapter.{name}.mask"] = adapter.mask
            sections[f"adapter.{name}.importance"] = \
                adapter.importance.reshape(1, -1)
    sections.update(model.projector.params())
    sections.update(model.classifier.params())
    return sections


def _config_blob(model: AlignedModel) -> dict:
    spec = model.adapter_spec
    return {
        "format": "peka-aligned-model",
        "layers": [{"name": layer.name, "activation": layer.activation}
                   for layer in model.backbone.layers],
        "d_in": model.backbone.d_in,
        "d_emb": model.backbone.d_emb,
        "adapter_spec": {
            "kind": spec.kind,
            "block_size": spec.block_size,
            "rank": spec.rank,
            "alpha": spec.alpha,
            "dropout": spec.dropout,
            "adalora_r0": spec.adalora_r0,
            "adalora_target_rank": spec.adalora_target_rank,
        },
        "adalora_schedules": {
            name: list(map(list, adapter.schedule))
            for name, adapter in model.adapters.adapters.items()
            if isinstance(adapter, AdaLoraAdapter)
        },
        "alignment_config": {
            "lambda1": model.config.lambda1,
            "lambda2": model.config.lambda2,
            "tau": model.config.tau,
            "clusters": model.config.clusters,
            "epochs": model.config.epochs,
            "batch_size": model.config.batch_size,
            "lr": model.config.lr,
            "seed": model.config.seed,
        },
        "history": [[rec.kd, rec.struct, rec.total] for rec in model.history],
    }


def save_model(model: AlignedModel, path) -> None:
    blob = json.dumps(_config_blob(model), sort_keys=True).encode("utf-8")
    sections = _collect_sections(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"file ends inside {what}: wanted {count} "
                                 f"bytes, got {len(data)}")
    return data


def _read_sections(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "section count"))
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "section name"))
        name = _read_exact(fh, name_len, "section name").decode("utf-8")
        rows, cols = struct.unpack("<II", _read_exact(fh, 8, f"{name} shape"))
        data = np.frombuffer(_read_exact(fh, 8 * rows * cols, name),
                             dtype="<f8").reshape(rows, cols).copy()
        sections[name] = data
    return sections


def load_model(path) -> AlignedModel:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"{path} does not start with {MAGIC!r} "
                                f"(got {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"{path} is format version {version}; "
                                          f"this build reads {FORMAT_VERSION}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        blob = json.loads(_read_exact(fh, blob_len, "config blob"))
        sections = _read_sections(fh)
        if fh.read(1):
            raise HeaderMismatchError(f"{path} has trailing bytes beyond the "
                                      f"declared sections")

    layers = []
    for entry in blob["layers"]:
        name = entry["name"]
        try:
            w = sections[f"backbone.{name}.w"]
            b = sections[f"backbone.{name}.b"]
        except KeyError as exc:
            raise HeaderMismatchError(f"{path} config references layer "
                                      f"{name!r} with no weight section") from exc
        w.flags.writeable = False
        b.flags.writeable = False
        layers.append(DenseLayer(name=name, w=w, b=b,
                                 activation=entry["activation"]))
    backbone = StudentBackbone(layers=tuple(layers), d_in=blob["d_in"],
                               d_emb=blob["d_emb"])

    raw_spec = blob["adapter_spec"]
    spec = AdapterSpec(**raw_spec)
    adapters = AdapterSet(kind=spec.kind)
    for layer in layers:
        prefix = f"adapter.{layer.name}"
        if spec.kind == "bone" and f"{prefix}.blocks" in sections:
            adapters.adapters[layer.name] = BoneAdapter(
                target=layer.name, block_size=spec.block_size,
                blocks=sections[f"{prefix}.blocks"])
        elif spec.kind == "lora" and f"{prefix}.a" in sections:
            adapters.adapters[layer.name] = LoraAdapter(
                target=layer.name, rank=spec.rank, alpha=spec.alpha,
                dropout_rate=spec.dropout,
                a=sections[f"{prefix}.a"], b=sections[f"{prefix}.b"])
        elif spec.kind == "adalora" and f"{prefix}.p" in sections:
            schedule = [tuple(item) for item in
                        blob["adalora_schedules"].get(layer.name, [])]
            adapters.adapters[layer.name] = AdaLoraAdapter(
                target=layer.name, r0=spec.adalora_r0,
                p=sections[f"{prefix}.p"], lam=sections[f"{prefix}.lam"],
                q=sections[f"{prefix}.q"], mask=sections[f"{prefix}.mask"],
                importance=sections[f"{prefix}.importance"].ravel().copy(),
                schedule=schedule)

    projector = Projector(w1=sections["projector.w1"],
                          b1=sections["projector.b1"],
                          w2=sections["projector.w2"],
                          b2=sections["projector.b2"])
    classifier = ClassifierHead(w=sections["classifier.w"],
                                b=sections["classifier.b"])
    config = AlignmentConfig(**blob["alignment_config"])
    history = [EpochStats(kd=kd, struct=st, total=tot)
               for kd, st, tot in blob["history"]]
    return AlignedModel(backbone=backbone, adapters=adapters,
                        projector=projector, classifier=classifier,
                        config=config, adapter_spec=spec, history=history)
