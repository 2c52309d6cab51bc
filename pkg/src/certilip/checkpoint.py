"""Checkpoint directories: JSON manifest plus little-endian float32 blobs."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointChecksumError, CheckpointError, CheckpointLengthError, CheckpointVersionError
from .layers import CPLayer, Network, build_network
from .training import OptimizerState

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
OPTIMIZER = "optimizer.bin"
BLOB_DTYPE = np.dtype("<f4")


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _blob(arrays) -> bytes:
    parts = [np.ascontiguousarray(a, dtype=BLOB_DTYPE).ravel() for a in arrays]
    return np.concatenate(parts).tobytes() if parts else b""


def _manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()


def save_checkpoint(net: Network, optimizer_state: OptimizerState | None, path, config: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``path/`` with manifest.json, weights.bin and (if given) optimizer.bin."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = [v for _, v in net.named_params()]
    weights = _blob(params)
    layers = []
    for i, layer in enumerate(net.layers):
        entry = {"index": i, "spec": layer.spec()}
        if isinstance(layer, CPLayer):
            entry["spectral"] = {
                "u": [float(v) for v in np.asarray(layer.spectral.u, dtype=BLOB_DTYPE).ravel()],
                "sigma": float(layer.spectral.sigma),
                "iteration_count": int(layer.spectral.iteration_count),
                "seed": int(layer.spectral.seed),
            }
            entry["step_override"] = layer.step_override
        layers.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": net.arch,
        "seed": int(net.seed),
        "config": config or {},
        "extra": extra or {},
        "param_count": int(net.param_count()),
        "param_shapes": [list(v.shape) for v in params],
        "layers": layers,
        "step": int(optimizer_state.step) if optimizer_state else 0,
        "weights_sha256": hashlib.sha256(weights).hexdigest(),
    }
    if optimizer_state is not None:
        keys = [k for k, _ in net.named_params()]
        opt = _blob([optimizer_state.m[k] for k in keys] + [optimizer_state.v[k] for k in keys])
        manifest["optimizer"] = {"beta1": optimizer_state.beta1, "beta2": optimizer_state.beta2,
                                 "eps": optimizer_state.eps, "sha256": hashlib.sha256(opt).hexdigest()}
        _atomic_write(path / OPTIMIZER, opt)
    _atomic_write(path / WEIGHTS, weights)
    _atomic_write(path / MANIFEST, _manifest_bytes(manifest))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no manifest in {path}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest in {path}: {e}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version!r}, this build reads {FORMAT_VERSION}")
    return manifest


def _read_blob(path: Path, count: int, digest: str, what: str) -> np.ndarray:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"missing {path.name}") from None
    if len(data) != count * BLOB_DTYPE.itemsize:
        raise CheckpointLengthError(f"{what}: {len(data)} bytes, manifest implies {count * BLOB_DTYPE.itemsize}")
    if hashlib.sha256(data).hexdigest() != digest:
        raise CheckpointChecksumError(f"{what}: checksum mismatch")
    return np.frombuffer(data, dtype=BLOB_DTYPE)


def load_checkpoint(path, dtype=np.float32):
    """Return ``(net, optimizer_state_or_None, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("arch") is None:
        raise CheckpointError("manifest carries no architecture")
    net = build_network(manifest["arch"], seed=manifest["seed"], dtype=dtype)
    count = manifest["param_count"]
    if net.param_count() != count:
        raise CheckpointLengthError(f"architecture has {net.param_count()} parameters, manifest says {count}")
    flat = _read_blob(path / WEIGHTS, count, manifest["weights_sha256"], WEIGHTS)
    offset = 0
    keys = []
    for key, value in list(net.named_params()):
        n = value.size
        net.set_param(key, flat[offset:offset + n].reshape(value.shape).astype(dtype))
        offset += n
        keys.append(key)
    for entry, layer in zip(manifest["layers"], net.layers):
        if isinstance(layer, CPLayer):
            s = entry["spectral"]
            layer.spectral.u = np.asarray(s["u"], dtype=dtype).reshape(layer.spectral.u.shape)
            layer.spectral.sigma = s["sigma"]
            layer.spectral.iteration_count = s["iteration_count"]
            layer.spectral.seed = s["seed"]
            layer.step_override = entry.get("step_override")
    state = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        blob = _read_blob(path / OPTIMIZER, 2 * count, o["sha256"], OPTIMIZER)
        state = OptimizerState(step=manifest["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        offset = 0
        for store in (state.m, state.v):
            for key in keys:
                shape = dict(net.named_params())[key].shape
                n = int(np.prod(shape))
                store[key] = blob[offset:offset + n].reshape(shape).astype(dtype)
                offset += n
    return net, state, manifest
