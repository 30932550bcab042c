"""On-disk formats.

Array files are a raw little-endian float32 row-major payload (``.f32``)
plus a JSON text header (``.json``) with shape, units, grid spacing,
semantic role, creator and seed.  Headers carry no timestamps, so reruns
are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .convolution import ForwardModel, Kernel
from .geometry import ImagingGrid, PairSchedule

CREATOR = f"soslearn {__version__}"
PAYLOAD_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed or inconsistent file on disk."""


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".f32", ".json") else p


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_array(path, array, role: str, units: str = "", spacing=None, seed=None,
                extra: dict | None = None) -> Path:
    """Write ``<stem>.f32`` and ``<stem>.json``; returns the stem."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    payload = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE)
    if not np.all(np.isfinite(payload)):
        raise FormatError(f"{stem}: refusing to write non-finite values")
    header = {"shape": list(arr.shape), "dtype": "float32-le", "role": role, "units": units,
              "grid_spacing_m": None if spacing is None else [float(v) for v in spacing],
              "creator": CREATOR, "seed": seed, "boolean": arr.dtype == bool}
    if extra:
        header.update(extra)
    stem.with_suffix(".f32").write_bytes(payload.tobytes())
    dump_json(header, stem.with_suffix(".json"))
    return stem


def read_header(path) -> dict:
    stem = _stem(path)
    try:
        return json.loads(stem.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"{stem}.json: {exc}") from exc


def read_array(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    header = read_header(stem)
    shape = tuple(int(v) for v in header["shape"])
    raw = stem.with_suffix(".f32").read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(f"{stem}.f32: {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(shape).astype(float)
    if header.get("boolean"):
        arr = arr != 0
    return arr, header


def config_hash(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ------------------------------------------------------------------ models

def model_fingerprint(model: ForwardModel) -> str:
    """Content hash of the kernels as stored on disk (float32) and their pairs."""
    h = hashlib.sha256()
    for k in model.kernels:
        h.update(json.dumps(list(k.pair.as_tuple())).encode())
        h.update(np.ascontiguousarray(k.values, dtype=PAYLOAD_DTYPE).tobytes())
    return h.hexdigest()[:16]


def save_model(model: ForwardModel, directory, mode: str, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    grid = model.grid
    files = []
    for i, k in enumerate(model.kernels):
        name = f"kernel_{i:02d}"
        write_array(d / name, k.values, role="kernel", units="m",
                    spacing=(grid.dz, grid.dx),
                    extra={"pair": list(k.pair.as_tuple()), "grid": grid.to_dict(),
                           "anchor": list(k.anchor)})
        files.append(name)
    manifest = {"format": "soslearn-model", "mode": mode, "grid": grid.to_dict(),
                "schedule": model.schedule.to_list(), "kernel_shape": list(model.kernel_shape),
                "kernels": files}
    if extra:
        manifest.update(extra)
    dump_json(manifest, d / "model.json")
    return d


def load_model(directory) -> tuple[ForwardModel, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "model.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no model manifest in {d}") from None
    grid = ImagingGrid.from_dict(manifest["grid"])
    schedule = PairSchedule.from_angles(manifest["schedule"])
    kernels = []
    for pair, name in zip(schedule, manifest["kernels"]):
        try:
            values, header = read_array(d / name)
        except FileNotFoundError:
            raise FileNotFoundError(f"kernel file for pair {pair.as_tuple()} missing: {d / name}") from None
        if tuple(header.get("pair", ())) != pair.as_tuple():
            raise FormatError(f"{name}: header pair {header.get('pair')} != manifest {pair.as_tuple()}")
        kernels.append(Kernel(values, pair, grid))
    return ForwardModel(tuple(kernels), grid), manifest


# ---------------------------------------------------------------- previews

def sos_preview(sos, c0: float, half_window: float = 25.0) -> np.ndarray:
    """8-bit grey levels over ``[c0 - half_window, c0 + half_window]``; c0 maps to 128."""
    v = (np.asarray(sos, dtype=float) - c0 + half_window) / (2.0 * half_window) * 255.0
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, image) -> Path:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM preview needs a 2-D uint8 image")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header is exactly three newline-terminated lines as written above
    head = data.split(b"\n", 3)
    if len(head) != 4 or head[0] != b"P5" or head[2] != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in head[1].split())
    pix = head[3]
    if len(pix) != w * h:
        raise FormatError(f"{path}: {len(pix)} pixel bytes, expected {w * h}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w)
