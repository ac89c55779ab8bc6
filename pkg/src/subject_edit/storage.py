"""Frame directories, mask directories and named-array checkpoint archives."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image
from safetensors.numpy import load_file, save_file

from .adapters import AdapterSet
from .lora import LoraDelta, LoraSet
from .types import FrameVideo, ForegroundMask

FORMAT_VERSION = 1
FRAME_SUFFIXES = (".png",)


def _frame_name(i: int, n: int) -> str:
    return f"{i:0{max(3, len(str(n - 1)))}d}.png"


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not files:
        raise ValueError(f"no frames in {directory}")
    return files


def save_frames(v: FrameVideo, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = v.frame_count
    paths = []
    for i, frame in enumerate(v.frames):
        path = directory / _frame_name(i, n)
        Image.fromarray(np.round(frame * 255.0).astype(np.uint8), mode="RGB").save(path)
        paths.append(path)
    return paths


def load_frames(directory: str | Path) -> FrameVideo:
    """Read an ordered directory of RGB images; file-name order is temporal order."""
    frames = []
    for path in _list_images(Path(directory)):
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        if frames and arr.shape != frames[0].shape:
            raise ValueError(f"{path.name} is {arr.shape[1]}x{arr.shape[0]}, expected "
                             f"{frames[0].shape[1]}x{frames[0].shape[0]}")
        frames.append(arr)
    return FrameVideo(np.stack(frames))


def save_mask_frames(m: ForegroundMask, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = m.mask.shape[0]
    paths = []
    for i, frame in enumerate(m.mask):
        path = directory / _frame_name(i, n)
        Image.fromarray((frame > 0).astype(np.uint8) * 255, mode="L").save(path)
        paths.append(path)
    return paths


def load_mask_frames(directory: str | Path) -> ForegroundMask:
    masks = []
    for path in _list_images(Path(directory)):
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L")) >= 128
        if masks and arr.shape != masks[0].shape:
            raise ValueError(f"{path.name} has size {arr.shape}, expected {masks[0].shape}")
        masks.append(arr)
    return ForegroundMask(np.stack(masks).astype(np.uint8))


def array_digest(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256()
    h.update(f"{a.dtype.str}{a.shape}".encode())
    h.update(a.tobytes())
    return h.hexdigest()


def state_hash(arrays: Mapping[str, np.ndarray | torch.Tensor]) -> str:
    """Order-independent digest of a name -> array mapping."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        h.update(name.encode())
        h.update(array_digest(a).encode())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return state_hash(module.state_dict())


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray | torch.Tensor],
                 metadata: Mapping | None = None) -> Path:
    """Write arrays as little-endian float32 plus a JSON manifest `<path>.json`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {}
    for name, a in arrays.items():
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        flat[name] = np.ascontiguousarray(np.asarray(a, dtype="<f4"))
    save_file(flat, str(path))
    manifest = {
        "format_version": FORMAT_VERSION,
        "arrays": {n: {"dtype": "float32", "shape": list(a.shape), "sha256": array_digest(a)}
                   for n, a in sorted(flat.items())},
        "metadata": dict(metadata or {}),
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load and validate an archive against its manifest; returns (arrays, metadata)."""
    path = Path(path)
    mpath = _manifest_path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path}")
    if not mpath.is_file():
        raise FileNotFoundError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {manifest.get('format_version')}")
    arrays = load_file(str(path))
    listed = manifest["arrays"]
    missing, extra = set(listed) - set(arrays), set(arrays) - set(listed)
    if missing or extra:
        raise ValueError(f"archive/manifest mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, info in listed.items():
        a = arrays[name]
        if list(a.shape) != info["shape"] or a.dtype != np.float32:
            raise ValueError(f"{name}: stored {a.dtype}{list(a.shape)}, manifest says "
                             f"{info['dtype']}{info['shape']}")
        if array_digest(a) != info["sha256"]:
            raise ValueError(f"{name}: content hash mismatch")
    return arrays, manifest["metadata"]


def _with_prefix(prefix: str, state: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _strip_prefix(prefix: str, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}


def save_adapters(path: str | Path, adapters: AdapterSet, namespace: str,
                  metadata: Mapping | None = None) -> Path:
    meta = {"kind": "adapters", "namespace": namespace, "adapter": adapters.describe(),
            **(metadata or {})}
    return save_archive(path, _with_prefix(namespace, adapters.state_dict()), meta)


def load_adapters(path: str | Path, dtype: torch.dtype = torch.float32) -> AdapterSet:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "adapters":
        raise ValueError(f"{path} holds {meta.get('kind')!r}, not adapters")
    d = meta["adapter"]
    adapters = AdapterSet(d["in_dim"], d["level_dims"], d["hidden_width"], d["depth"],
                          resize_mode=d["resize_mode"])
    state = {k: torch.from_numpy(v.copy()) for k, v in _strip_prefix(meta["namespace"], arrays).items()}
    adapters.load_state_dict(state, strict=True)
    return adapters.to(dtype).requires_grad_(False)


def save_lora(path: str | Path, lora: LoraSet, metadata: Mapping | None = None) -> Path:
    arrays = {}
    layers = {}
    for layer, delta in sorted(lora.items()):
        arrays[f"{layer}.lora.down"] = delta.down
        arrays[f"{layer}.lora.up"] = delta.up
        layers[layer] = {"rank": delta.rank, "scale": delta.scale}
    meta = {"kind": "lora", "layers": layers, **(metadata or {})}
    return save_archive(path, arrays, meta)


def load_lora(path: str | Path, dtype: torch.dtype = torch.float32) -> LoraSet:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "lora":
        raise ValueError(f"{path} holds {meta.get('kind')!r}, not LoRA deltas")
    out = {}
    for layer, info in meta["layers"].items():
        down = torch.from_numpy(arrays[f"{layer}.lora.down"].copy()).to(dtype)
        up = torch.from_numpy(arrays[f"{layer}.lora.up"].copy()).to(dtype)
        if down.shape[0] != info["rank"]:
            raise ValueError(f"{layer}: rank {down.shape[0]} disagrees with manifest {info['rank']}")
        out[layer] = LoraDelta(down, up, float(info["scale"]))
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray | torch.Tensor],
                 kind: str, metadata: Mapping | None = None) -> Path:
    return save_archive(path, tensors, {"kind": kind, **(metadata or {})})


def load_tensors(path: str | Path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    arrays, meta = load_archive(path)
    if meta.get("kind") != kind:
        raise ValueError(f"{path} holds {meta.get('kind')!r}, expected {kind!r}")
    return arrays, meta
