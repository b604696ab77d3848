"""Checkpoint directories: ``manifest.json`` plus a flat ``weights.bin``.

Weights are stored as little-endian float32 in manifest order, whatever the
compute precision. The manifest carries the network spec so a checkpoint can
be rebuilt without outside information.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .netspec import NetworkSpec
from .network import Adapter, Network

MAGIC = "RKDCKPT1"
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
_STORED = np.dtype("<f4")


class CheckpointError(ValueError):
    """Manifest and weights disagree, or the manifest is not ours."""


def config_hash(config: Optional[dict]) -> Optional[str]:
    if config is None:
        return None
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write(path: Union[str, Path], state: dict[str, np.ndarray], header: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / WEIGHTS, "wb") as fh:
        for name, arr in state.items():
            raw = np.ascontiguousarray(arr, dtype=_STORED).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "length": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"magic": MAGIC, **header, "tensors": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _read(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path / MANIFEST}: not valid JSON ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        got = manifest.get("magic") if isinstance(manifest, dict) else None
        raise CheckpointError(f"{path / MANIFEST}: magic {got!r}, expected {MAGIC!r}")
    try:
        blob = (path / WEIGHTS).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {WEIGHTS}") from None
    state, expected = {}, 0
    for e in manifest.get("tensors", []):
        shape = tuple(int(s) for s in e["shape"])
        if e.get("dtype") != "float32":
            raise CheckpointError(f"tensor {e['name']}: unsupported stored dtype {e.get('dtype')!r}")
        if e["offset"] != expected:
            raise CheckpointError(f"tensor {e['name']}: offset {e['offset']} but previous tensor ends at {expected}")
        if int(np.prod(shape, dtype=np.int64)) * 4 != e["length"]:
            raise CheckpointError(f"tensor {e['name']}: shape {shape} does not fit {e['length']} bytes")
        expected += e["length"]
        if expected > len(blob):
            raise CheckpointError(f"{WEIGHTS} truncated: tensor {e['name']} needs bytes up to {expected}, "
                                  f"file has {len(blob)}")
        state[e["name"]] = np.frombuffer(blob, _STORED, count=e["length"] // 4, offset=e["offset"]).reshape(shape)
    if expected != len(blob):
        raise CheckpointError(f"{WEIGHTS} has {len(blob)} bytes but the manifest describes {expected}")
    return manifest, state


def save_checkpoint(network: Network, path: Union[str, Path], config: Optional[dict] = None) -> Path:
    """Write parameters and normalization buffers of ``network`` under ``path``."""
    header = {
        "kind": "network",
        "spec": network.spec.to_dict(),
        "batchnorm": network.batchnorm,
        "block_in_channels": network.block_in_channels,
        "config_hash": config_hash(config),
    }
    return _write(path, network.state_dict(), header)


def load_checkpoint(path: Union[str, Path], dtype=None) -> Network:
    manifest, state = _read(path)
    if manifest.get("kind") != "network":
        raise CheckpointError(f"{path}: holds a {manifest.get('kind')!r}, not a network")
    net = Network(NetworkSpec.from_dict(manifest["spec"]), dtype=dtype if dtype is not None else np.float32,
                  batchnorm=manifest.get("batchnorm", True), block_in_channels=manifest.get("block_in_channels"))
    _check_names(path, state, net.state_dict())
    net.load_state_dict(state)
    return net


def save_adapter(adapter: Adapter, path: Union[str, Path], config: Optional[dict] = None) -> Path:
    header = {
        "kind": "adapter",
        "in_channels": adapter.in_channels,
        "out_channels": adapter.out_channels,
        "identity_levels": [i + 1 for i, c in enumerate(adapter.convs) if c is None],
        "config_hash": config_hash(config),
    }
    return _write(path, adapter.state_dict(), header)


def load_adapter(path: Union[str, Path], dtype=None) -> Adapter:
    manifest, state = _read(path)
    if manifest.get("kind") != "adapter":
        raise CheckpointError(f"{path}: holds a {manifest.get('kind')!r}, not an adapter")
    adapter = Adapter(manifest["in_channels"], manifest["out_channels"],
                      dtype=dtype if dtype is not None else np.float32)
    identity = {i + 1 for i, c in enumerate(adapter.convs) if c is None}
    if identity != set(manifest.get("identity_levels", [])):
        raise CheckpointError(f"{path}: identity levels disagree with the channel lists")
    _check_names(path, state, adapter.state_dict())
    adapter.load_state_dict(state)
    return adapter


def read_manifest(path: Union[str, Path]) -> dict:
    return _read(path)[0]


def _check_names(path, stored: dict, wanted: dict) -> None:
    if list(stored) != list(wanted):
        missing = sorted(set(wanted) - set(stored))
        extra = sorted(set(stored) - set(wanted))
        raise CheckpointError(f"{path}: tensor names do not match the rebuilt model "
                              f"(missing {missing[:3]}, unexpected {extra[:3]})")
