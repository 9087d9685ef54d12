"""Versioned binary checkpoints with bit-exact round trips.

Layout: magic, format version, a length-prefixed canonical-JSON header
(architecture, tensor names and shapes, auxiliary metadata, blob digest),
then the raw float64 little-endian tensor blobs in header order. The file is
fully deterministic for identical contents, so save -> load -> save
reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .denoiser import ConditionEmbeddingTable, DenoiserArch, DenoiserParams
from .projector import Projector, ProjectorArch
from .world import ConceptVocabulary

MAGIC = b"CDWB"
FORMAT_VERSION = 1

Array = np.ndarray


class CheckpointError(RuntimeError):
    pass


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write(path: str | Path, header: dict, tensors: list[tuple[str, Array]]) -> None:
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in tensors]
    header["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    hbytes = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def _read(path: str | Path) -> tuple[dict, dict[str, Array]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version > FORMAT_VERSION:
        raise CheckpointError(
            f"{path} was written by format version {version}; this build reads <= {FORMAT_VERSION}"
        )
    hlen = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path} has a corrupt header: {err}") from err
    blob = raw[16 + hlen :]
    expected = sum(int(np.prod(t["shape"])) for t in header["tensors"]) * 8
    if len(blob) != expected:
        raise CheckpointError(
            f"{path} is corrupt: blob holds {len(blob)} bytes, header expects {expected}"
        )
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CheckpointError(f"{path} is corrupt: blob checksum mismatch")
    tensors: dict[str, Array] = {}
    offset = 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) * 8
        arr = np.frombuffer(blob[offset : offset + size], dtype="<f8").reshape(t["shape"])
        tensors[t["name"]] = arr.astype(np.float64).copy()
        offset += size
    return header, tensors


# -- denoiser -------------------------------------------------------------------


def save_denoiser(params: DenoiserParams, path: str | Path, extra: dict | None = None) -> None:
    arch = params.arch
    vocab = params.table.vocabulary
    header = {
        "kind": "denoiser",
        "arch": {
            "data_dim": arch.data_dim,
            "embed_dim": arch.embed_dim,
            "hidden_width": arch.hidden_width,
            "hidden_layers": arch.hidden_layers,
            "time_enc_dim": arch.time_enc_dim,
            "input_scale": arch.input_scale,
        },
        "vocabulary": {
            "subject_axis": list(vocab.subject_axis),
            "context_axis": list(vocab.context_axis),
            "personal_id": vocab.personal_id,
            "null_id": vocab.null_id,
        },
        "ids": list(params.table.ids),
        "trainable_mask": [bool(b) for b in params.table.trainable_mask],
        "extra": extra or {},
    }
    tensors = [(name, params.weights[name].data) for name in sorted(params.weights)]
    tensors.append(("embeddings", params.table.table.data))
    _write(path, header, tensors)


def load_denoiser(path: str | Path) -> tuple[DenoiserParams, dict]:
    header, tensors = _read(path)
    if header.get("kind") != "denoiser":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} checkpoint, not a denoiser")
    arch = DenoiserArch(**header["arch"])
    v = header["vocabulary"]
    vocab = ConceptVocabulary(
        subject_axis=tuple(v["subject_axis"]),
        context_axis=tuple(v["context_axis"]),
        personal_id=v["personal_id"],
        null_id=v["null_id"],
    )
    table = ConditionEmbeddingTable(
        vocabulary=vocab,
        ids=tuple(header["ids"]),
        table=ad.parameter(tensors.pop("embeddings")),
        trainable_mask=np.array(header["trainable_mask"], dtype=bool),
    )
    weights = {name: ad.parameter(arr) for name, arr in tensors.items()}
    return DenoiserParams(arch=arch, weights=weights, table=table), header.get("extra", {})


# -- projector ------------------------------------------------------------------


def save_projector(proj: Projector, path: str | Path) -> None:
    header = {
        "kind": "projector",
        "arch": {
            "data_dim": proj.arch.data_dim,
            "concept_dim": proj.arch.concept_dim,
            "out_dim": proj.arch.out_dim,
            "hidden_width": proj.arch.hidden_width,
            "input_scale": proj.arch.input_scale,
        },
        "temperature": proj.temperature,
        "feature_ids": sorted(proj.concept_features),
        "extra": {},
    }
    tensors = [(f"data_{k}", proj.data_weights[k]) for k in sorted(proj.data_weights)]
    tensors += [(f"concept_{k}", proj.concept_weights[k]) for k in sorted(proj.concept_weights)]
    tensors += [(f"feature_{cid}", proj.concept_features[cid]) for cid in header["feature_ids"]]
    _write(path, header, tensors)


def load_projector(path: str | Path) -> Projector:
    header, tensors = _read(path)
    if header.get("kind") != "projector":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} checkpoint, not a projector")
    data_w = {k[len("data_") :]: v for k, v in tensors.items() if k.startswith("data_")}
    concept_w = {k[len("concept_") :]: v for k, v in tensors.items() if k.startswith("concept_")}
    features = {k[len("feature_") :]: v for k, v in tensors.items() if k.startswith("feature_")}
    return Projector(
        arch=ProjectorArch(**header["arch"]),
        temperature=header["temperature"],
        data_weights=data_w,
        concept_weights=concept_w,
        concept_features=features,
    )
