"""Versioned binary checkpoints.

Layout: magic ``RCKP``, u32 format version, u64 manifest length, a
canonical-JSON manifest (config, embedder identity, normalization
stats, step counter, tensor directory), then raw little-endian tensor
payloads in directory order.  Floats round-trip bit-exactly; saving a
loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .cell_codec import NormStats
from .errors import ConfigError, DataError
from .rt_model import ModelConfig, RTModel

MAGIC = b"RCKP"
FORMAT_VERSION = 1

_TO_CODE = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_FROM_CODE = {"<f4": torch.float32, "<f8": torch.float64, "<i8": torch.int64}


def json_fingerprint(payload) -> str:
    """Stable short hash of a JSON-serializable payload: sha256 of the
    canonical encoding (sorted keys, no whitespace), first 16 hex chars."""
    import hashlib

    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    config: ModelConfig
    embedder: str
    step: int
    stats: NormStats
    model_state: dict          # name -> tensor, model.state_dict() order
    opt_state: dict            # flat "param.slot" -> tensor, may be empty

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


def checkpoint_from(model: RTModel, stats: NormStats, step: int,
                    embedder_identity: str,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    ) -> Checkpoint:
    """Snapshot model weights (and optimizer moments when given) into an
    in-memory checkpoint; tensors are cloned so later steps cannot
    mutate the snapshot."""
    model_state = {
        k: v.detach().clone() for k, v in model.state_dict().items()
    }
    opt_state: dict[str, torch.Tensor] = {}
    if optimizer is not None:
        by_param = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = by_param[id(p)]
                for slot, val in state.items():
                    t = val if torch.is_tensor(val) else torch.tensor(float(val))
                    opt_state[f"{name}.{slot}"] = t.detach().clone()
    return Checkpoint(model.cfg, embedder_identity, step, stats,
                      model_state, opt_state)


def _stats_to_json(stats: NormStats) -> dict:
    return {
        "col_mean": {str(k): v for k, v in sorted(stats.col_mean.items())},
        "col_std": {str(k): v for k, v in sorted(stats.col_std.items())},
        "dt_mean": stats.dt_mean,
        "dt_std": stats.dt_std,
    }


def _stats_from_json(d: dict) -> NormStats:
    return NormStats(
        col_mean={int(k): float(v) for k, v in d["col_mean"].items()},
        col_std={int(k): float(v) for k, v in d["col_std"].items()},
        dt_mean=float(d["dt_mean"]),
        dt_std=float(d["dt_std"]),
    )


def _tensor_bytes(t: torch.Tensor) -> bytes:
    code = _TO_CODE.get(t.dtype)
    if code is None:
        raise ConfigError(f"unsupported checkpoint tensor dtype {t.dtype}")
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(np.dtype(code), copy=False).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the checkpoint; parent directories are created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    payloads = []
    for section, tensors in (("model", ckpt.model_state),
                             ("opt", ckpt.opt_state)):
        for name, t in tensors.items():
            directory.append({
                "section": section,
                "name": name,
                "shape": list(t.shape),
                "dtype": _TO_CODE.get(t.dtype),
            })
            payloads.append(_tensor_bytes(t))
    manifest = {
        "config": json.loads(ckpt.config.canonical_json()),
        "config_hash": ckpt.config_hash,
        "embedder": ckpt.embedder,
        "step": ckpt.step,
        "stats": _stats_to_json(ckpt.stats),
        "tensors": directory,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)


def load_checkpoint(path, expect_embedder: Optional[str] = None,
                    expect_config: Optional[ModelConfig] = None) -> Checkpoint:
    """Read and validate a checkpoint file.

    Mismatched embedder identity or model config hash is a hard error:
    weights are meaningless under a different tokenizer or architecture.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise DataError(
            f"{path}: checkpoint format version {version}, "
            f"expected {FORMAT_VERSION}")
    (mlen,) = struct.unpack_from("<Q", buf, 8)
    if 16 + mlen > len(buf):
        raise DataError(f"{path}: truncated checkpoint (manifest)")
    try:
        manifest = json.loads(buf[16:16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint manifest: {e}") from None
    cfg = ModelConfig.from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise DataError(f"{path}: config hash does not match stored config")
    if expect_embedder is not None and manifest["embedder"] != expect_embedder:
        raise ConfigError(
            f"checkpoint was written with embedder "
            f"{manifest['embedder']!r}, loader expects {expect_embedder!r}")
    if expect_config is not None and cfg.config_hash() != expect_config.config_hash():
        raise ConfigError(
            "checkpoint config hash does not match the requested config")
    model_state: dict[str, torch.Tensor] = {}
    opt_state: dict[str, torch.Tensor] = {}
    off = 16 + mlen
    for rec in manifest["tensors"]:
        dtype = np.dtype(rec["dtype"])
        n = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        nbytes = n * dtype.itemsize
        if off + nbytes > len(buf):
            raise DataError(
                f"{path}: truncated checkpoint (tensor {rec['name']})")
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off)
        off += nbytes
        t = torch.from_numpy(arr.copy()).to(_FROM_CODE[rec["dtype"]])
        t = t.reshape(rec["shape"])
        (model_state if rec["section"] == "model" else opt_state)[rec["name"]] = t
    if off != len(buf):
        raise DataError(f"{path}: trailing bytes after tensor payloads")
    return Checkpoint(cfg, manifest["embedder"], int(manifest["step"]),
                      _stats_from_json(manifest["stats"]),
                      model_state, opt_state)


def apply_state(model: RTModel, ckpt: Checkpoint) -> None:
    """Load checkpoint weights into an existing model, reporting the
    first shape mismatch by tensor name."""
    own = model.state_dict()
    for name, t in own.items():
        if name not in ckpt.model_state:
            raise ConfigError(f"checkpoint is missing tensor {name!r}")
        have = tuple(ckpt.model_state[name].shape)
        want = tuple(t.shape)
        if have != want:
            raise ConfigError(
                f"tensor {name!r}: checkpoint shape {list(have)} does not "
                f"fit model shape {list(want)}")
    extra = set(ckpt.model_state) - set(own)
    if extra:
        raise ConfigError(f"checkpoint has unknown tensor {sorted(extra)[0]!r}")
    model.load_state_dict(ckpt.model_state)


def restore_model(ckpt: Checkpoint) -> RTModel:
    """Build a model with the checkpoint's own config and weights."""
    model = RTModel(ckpt.config)
    apply_state(model, ckpt)
    return model


def restore_optimizer(optimizer: torch.optim.Optimizer, model: RTModel,
                      ckpt: Checkpoint) -> None:
    """Reinstall saved moments into a freshly built optimizer."""
    if not ckpt.opt_state:
        return
    slots: dict[str, dict[str, torch.Tensor]] = {}
    for key, t in ckpt.opt_state.items():
        pname, slot = key.rsplit(".", 1)
        slots.setdefault(pname, {})[slot] = t.clone()
    params = dict(model.named_parameters())
    for pname, state in slots.items():
        if pname not in params:
            raise ConfigError(f"optimizer state for unknown parameter {pname!r}")
        optimizer.state[params[pname]] = state
