"""Checkpoint format: one npz tensor dump plus a JSON manifest.

The manifest lists every tensor's name, shape and dtype together with a
sha256 checksum over the raw tensor bytes (sorted by name), so external
tools can validate a dump without loading it. Optimizer moments and RNG
stream states ride along under their own name prefixes, which is what
makes mid-run resume bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
TENSORS_FILE = "tensors.npz"
MANIFEST_FILE = "manifest.json"


def checksum_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return "sha256:" + h.hexdigest()


def save_checkpoint(ckpt_dir: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    np.savez(ckpt_dir / TENSORS_FILE, **arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": {
            name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in sorted(arrays.items())
        },
        "checksum": checksum_arrays(arrays),
        **meta,
    }
    tmp = ckpt_dir / (MANIFEST_FILE + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.rename(ckpt_dir / MANIFEST_FILE)


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / MANIFEST_FILE
    tensors_path = ckpt_dir / TENSORS_FILE
    if not manifest_path.exists() or not tensors_path.exists():
        raise CheckpointError(f"no checkpoint at {ckpt_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}")
    with np.load(tensors_path) as data:
        arrays = {name: data[name] for name in data.files}
    if checksum_arrays(arrays) != manifest["checksum"]:
        raise CheckpointError(f"checksum mismatch in {ckpt_dir}")
    return arrays, manifest


# -- torch adapters ---------------------------------------------------------


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": tensor.detach().cpu().numpy().copy()
            for name, tensor in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                       prefix: str) -> None:
    state = {}
    want = prefix + "/"
    for name, arr in arrays.items():
        if name.startswith(want):
            state[name[len(want):]] = torch.from_numpy(arr.copy())
    if not state:
        raise CheckpointError(f"checkpoint holds no tensors under {prefix!r}")
    module.load_state_dict(state)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for pid, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{pid}/{key}"] = val.detach().cpu().numpy().copy()
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray],
                          prefix: str) -> None:
    """Restore moments into a freshly constructed optimizer."""
    state: dict[int, dict[str, torch.Tensor]] = {}
    want = prefix + "/"
    for name, arr in arrays.items():
        if not name.startswith(want):
            continue
        pid_str, key = name[len(want):].split("/", 1)
        state.setdefault(int(pid_str), {})[key] = torch.from_numpy(arr.copy())
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def rng_arrays(rngs: dict[str, torch.Generator], prefix: str = "rng") -> dict[str, np.ndarray]:
    return {f"{prefix}/{label}": g.get_state().numpy().copy() for label, g in rngs.items()}


def load_rng_arrays(rngs: dict[str, torch.Generator], arrays: dict[str, np.ndarray],
                    prefix: str = "rng") -> None:
    for label, g in rngs.items():
        name = f"{prefix}/{label}"
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing rng stream {label!r}")
        g.set_state(torch.from_numpy(arrays[name].copy()))
