"""Bit-exact binary checkpoint format.

Layout: an 8-byte little-endian header length, a canonical-JSON header
``{"format_version", "config"?, "tensors": [{name, shape, byte_offset,
byte_len}], ...}``, then one raw little-endian float32 blob. Tensor entries
are sorted by name and the JSON is emitted with sorted keys and no
whitespace, so save -> load -> save reproduces files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import BatchNormState, Tensor
from .errors import CheckpointError
from .model import ModelConfig, ModelParams, SiameseModel, parameter_shapes

FORMAT_VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    """Write named float arrays plus JSON metadata to ``path``."""
    header = dict(meta or {})
    header["format_version"] = FORMAT_VERSION
    table = []
    blob = bytearray()
    for name in sorted(arrays):
        data = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        raw = data.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(data.shape),
                "byte_offset": len(blob),
                "byte_len": len(raw),
            }
        )
        blob.extend(raw)
    header["tensors"] = table
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays dict, metadata dict)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"checkpoint too short: {path}")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"truncated checkpoint header: {path}")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})"
        )
    blob = raw[8 + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        start = entry["byte_offset"]
        stop = start + entry["byte_len"]
        if stop > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} runs past end of blob")
        arr = np.frombuffer(blob[start:stop], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    meta = {k: v for k, v in header.items() if k != "tensors"}
    return arrays, meta


def checkpoint_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config_dict):
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# model state <-> array dict
# ---------------------------------------------------------------------------


def model_state_arrays(params, prefix=""):
    """Flatten learnable tensors and batch-norm buffers into named arrays."""
    arrays = {prefix + name: t.data for name, t in params.tensors.items()}
    for i, st in enumerate(params.bn_states):
        arrays[f"{prefix}stem.bn{i}.running_mean"] = st.running_mean
        arrays[f"{prefix}stem.bn{i}.running_var"] = st.running_var
    return arrays


def params_from_arrays(config, arrays, prefix="", dtype=np.float32):
    """Rebuild ModelParams for ``config`` from named arrays."""
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {key!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}"
            )
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    bn_states = []
    for i, c in enumerate(config.stem_channels):
        st = BatchNormState(c, dtype=dtype)
        st.running_mean = np.asarray(arrays[f"{prefix}stem.bn{i}.running_mean"], dtype=dtype).copy()
        st.running_var = np.asarray(arrays[f"{prefix}stem.bn{i}.running_var"], dtype=dtype).copy()
        bn_states.append(st)
    return ModelParams(tensors=tensors, bn_states=bn_states)


def save_model(path, config, params, meta=None):
    meta = dict(meta or {})
    meta["config"] = config.to_dict()
    save_checkpoint(path, model_state_arrays(params), meta)


def load_model(path, dtype=np.float32):
    arrays, meta = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    return config, params_from_arrays(config, arrays, dtype=dtype), meta


def siamese_state_arrays(siamese):
    arrays = model_state_arrays(siamese.ground, prefix="ground.")
    arrays.update(model_state_arrays(siamese.aerial, prefix="aerial."))
    return arrays


def save_siamese(path, siamese, meta=None):
    meta = dict(meta or {})
    meta["config"] = {
        "ground": siamese.ground_config.to_dict(),
        "aerial": siamese.aerial_config.to_dict(),
    }
    save_checkpoint(path, siamese_state_arrays(siamese), meta)


def load_siamese(path, dtype=np.float32, extra_arrays=False):
    arrays, meta = load_checkpoint(path)
    gcfg = ModelConfig.from_dict(meta["config"]["ground"])
    acfg = ModelConfig.from_dict(meta["config"]["aerial"])
    siamese = SiameseModel(
        ground_config=gcfg,
        aerial_config=acfg,
        ground=params_from_arrays(gcfg, arrays, prefix="ground.", dtype=dtype),
        aerial=params_from_arrays(acfg, arrays, prefix="aerial.", dtype=dtype),
    )
    if extra_arrays:
        return siamese, meta, arrays
    return siamese, meta
