"""Ensemble checkpoint container.

Layout::

    SDCT-CKPT <version>\\n
    index <n-bytes> sha256 <hex digest of index + payload>\\n
    <n-bytes of JSON index>
    <tensor payload, little-endian float64, in index order>

The JSON index is written with sorted keys and no whitespace, so saving a
loaded checkpoint reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, SdctNetModel
from .pipeline import EnsembleModel, Member, TrainConfig
from .svm import RbfSvmModel

MAGIC = "SDCT-CKPT"
VERSION = 1
_SVM_ARRAYS = ("support_vectors", "dual_coefs", "mean", "scale")


class CheckpointError(ValueError):
    pass


def _tensor_blocks(ensemble: EnsembleModel) -> list[tuple[str, np.ndarray]]:
    blocks = []
    for i, m in enumerate(ensemble.members):
        for k, v in sorted(m.net.state_dict().items()):
            blocks.append((f"m{i}.net.{k}", v))
        for k in _SVM_ARRAYS:
            blocks.append((f"m{i}.svm.{k}", getattr(m.svm, k)))
    return blocks


def encode(ensemble: EnsembleModel, seed: int | None = None) -> bytes:
    blocks = _tensor_blocks(ensemble)
    tensors, chunks, offset = [], [], 0
    for name, arr in blocks:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    index = {
        "backbone": ensemble.backbone.to_dict(),
        "config_digest": ensemble.backbone.digest(),
        "train_config": ensemble.train_config.to_dict(),
        "seed": ensemble.train_config.seed if seed is None else int(seed),
        "theta": float(ensemble.theta),
        "k": ensemble.k,
        "model_dtype": str(ensemble.members[0].net.dtype),
        "svm": [
            {"bias": m.svm.bias, "gamma": m.svm.gamma, "C": m.svm.C, "converged": bool(m.svm.converged),
             "n_iter": int(m.svm.n_iter)}
            for m in ensemble.members
        ],
        "tensors": tensors,
        "payload_bytes": len(payload),
        "dtype": "<f8",
    }
    body = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    digest = hashlib.sha256(body + payload).hexdigest()
    header = f"{MAGIC} {VERSION}\nindex {len(body)} sha256 {digest}\n".encode()
    return header + body + payload


def save_checkpoint(ensemble: EnsembleModel, path, seed: int | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ensemble, seed))
    os.replace(tmp, path)
    return path


def _read_line(buf: bytes, start: int) -> tuple[str, int]:
    end = buf.find(b"\n", start)
    if end < 0:
        raise CheckpointError("truncated checkpoint header")
    return buf[start:end].decode("ascii", errors="replace"), end + 1


def decode(buf: bytes, expected_config: BackboneConfig | None = None) -> EnsembleModel:
    first, pos = _read_line(buf, 0)
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError("not an SDCT checkpoint")
    if parts[1] != str(VERSION):
        raise CheckpointError(f"checkpoint format version {parts[1]} is not supported (this build reads {VERSION})")
    second, pos = _read_line(buf, pos)
    fields = second.split()
    if len(fields) != 4 or fields[0] != "index" or fields[2] != "sha256" or not fields[1].isdigit():
        raise CheckpointError("malformed checkpoint header")
    n = int(fields[1])
    body = buf[pos:pos + n]
    payload = buf[pos + n:]
    if len(body) != n:
        raise CheckpointError("truncated checkpoint index")
    if hashlib.sha256(body + payload).hexdigest() != fields[3]:
        raise CheckpointError("checkpoint digest mismatch (file truncated or corrupt)")
    index = json.loads(body)
    if len(payload) != index["payload_bytes"]:
        raise CheckpointError("checkpoint payload length mismatch")

    backbone = BackboneConfig.from_dict(index["backbone"])
    if backbone.digest() != index["config_digest"]:
        raise CheckpointError("backbone config digest mismatch")
    if expected_config is not None and expected_config.digest() != backbone.digest():
        raise CheckpointError(
            f"checkpoint was trained with a different backbone config ({backbone.to_dict()}); refusing to load"
        )

    arrays = {}
    for t in index["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)

    members = []
    for i, s in enumerate(index["svm"]):
        net = SdctNetModel(backbone, seed=0, dtype=index["model_dtype"])
        prefix = f"m{i}.net."
        net.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        svm = RbfSvmModel(
            **{k: arrays[f"m{i}.svm.{k}"] for k in _SVM_ARRAYS},
            bias=float(s["bias"]), gamma=float(s["gamma"]), C=float(s["C"]),
            converged=bool(s["converged"]), n_iter=int(s["n_iter"]),
        )
        members.append(Member(net, svm))
    return EnsembleModel(members, float(index["theta"]), backbone, TrainConfig.from_dict(index["train_config"]))


def load_checkpoint(path, expected_config: BackboneConfig | None = None) -> EnsembleModel:
    return decode(Path(path).read_bytes(), expected_config)
