"""Dataset ingestion (CIFAR-10 binary batches, NPY arrays), a procedural
texture dataset for desk-scale runs, and parametric image corruptions."""

from __future__ import annotations

import ast
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import blur, gaussian_kernel

CIFAR_RECORD = 3073
NPY_MAGIC = b"\x93NUMPY"


class DataFormatError(ValueError):
    """A file does not match the binary layout it claims to have."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], name or self.name, dict(self.provenance))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar10_binary(path) -> Dataset:
    """Read one CIFAR-10 binary batch (1 label byte + 3072 plane-major pixels per record)."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        n = len(raw) // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {len(raw)} bytes is not a multiple of {CIFAR_RECORD} "
            f"(expected {max(n, 1) * CIFAR_RECORD} for {max(n, 1)} records)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = images.astype(np.float32) / np.float32(255)
    return Dataset(images, labels, Path(path).name,
                   {"source": str(path), "sha256": _sha256(raw), "format": "cifar10-binary"})


def write_cifar10_binary(path, images_u8: np.ndarray, labels) -> None:
    """Write (N, 32, 32, 3) uint8 images in CIFAR-10 binary layout (test fixture)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(len(images_u8), -1)
    Path(path).write_bytes(np.concatenate([labels, planes], axis=1).tobytes())


# ---------------------------------------------------------------------------
# NPY


def _parse_npy_header(raw: bytes, path) -> tuple[dict, int]:
    if raw[:6] != NPY_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:6]!r}, expected {NPY_MAGIC!r}")
    if len(raw) < 10:
        raise DataFormatError(f"{path}: truncated header")
    major, minor = raw[6], raw[7]
    if (major, minor) == (1, 0):
        (hlen,) = struct.unpack("<H", raw[8:10])
        start = 10
    elif (major, minor) in ((2, 0), (3, 0)):
        if len(raw) < 12:
            raise DataFormatError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<I", raw[8:12])
        start = 12
    else:
        raise DataFormatError(f"{path}: unsupported NPY version {major}.{minor}")
    text = raw[start:start + hlen]
    if len(text) != hlen:
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(text.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise DataFormatError(f"{path}: unreadable header {text!r}") from exc
    if not isinstance(header, dict) or {"descr", "fortran_order", "shape"} - set(header):
        raise DataFormatError(f"{path}: header missing keys: {header!r}")
    return header, start + hlen


def read_npy(path, allowed_descr=("|u1",)) -> np.ndarray:
    """Decode an NPY v1/v2 file; header checks happen before any allocation."""
    raw = Path(path).read_bytes()
    header, offset = _parse_npy_header(raw, path)
    descr = header["descr"]
    if descr not in allowed_descr:
        raise DataFormatError(f"{path}: unsupported descr {descr!r}, expected one of {allowed_descr}")
    if header["fortran_order"]:
        raise DataFormatError(f"{path}: fortran_order True is not supported")
    shape = tuple(int(s) for s in header["shape"])
    dtype = np.dtype(descr)
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise DataFormatError(f"{path}: payload is {len(raw) - offset} bytes, "
                              f"shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape).copy()


def read_npy_u8(path, kind: str = "auto") -> np.ndarray:
    """Read a uint8 NPY of images (N, 32, 32, 3), scaled to [0, 1], or labels (N,)."""
    arr = read_npy(path, ("|u1",))
    if kind == "auto":
        kind = "labels" if arr.ndim == 1 else "images"
    if kind == "labels":
        if arr.ndim != 1:
            raise DataFormatError(f"{path}: label file must be 1-D, got shape {arr.shape}")
        return arr.astype(np.int64)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DataFormatError(f"{path}: image file must be (N, H, W, 3), got shape {arr.shape}")
    return arr.astype(np.float32) / np.float32(255)


def write_npy(path, arr: np.ndarray) -> None:
    """Write a C-ordered array as NPY v1.0 (v2.0 when the header needs it)."""
    arr = np.ascontiguousarray(arr)
    descr = arr.dtype.str if arr.dtype.itemsize > 1 else "|" + arr.dtype.str[1:]
    text = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, tuple(arr.shape))
    body = text.encode("latin1")
    for version, lenfmt, pre in ((1, "<H", 10), (2, "<I", 12)):
        total = pre + len(body) + 1
        pad = (-total) % 64
        hlen = len(body) + pad + 1
        if version == 2 or hlen < 2 ** 16:
            break
    header = NPY_MAGIC + bytes([version, 0]) + struct.pack(lenfmt, hlen) + body + b" " * pad + b"\n"
    Path(path).write_bytes(header + arr.tobytes())


def load_cifar10c(images_path, labels_path, severity: int | None = 5,
                  per_level: int = 10_000, name: str | None = None) -> Dataset:
    """Load one corruption file of CIFAR-10-C.

    Files store severities 1..5 back to back, ``per_level`` images each;
    ``severity=None`` keeps everything.
    """
    images = read_npy_u8(images_path, "images")
    labels = read_npy_u8(labels_path, "labels")
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if severity is not None:
        if not 1 <= severity <= 5:
            raise ValueError("severity must be in 1..5")
        lo, hi = (severity - 1) * per_level, severity * per_level
        if hi > len(images):
            raise DataFormatError(f"{images_path}: {len(images)} images, severity {severity} "
                                  f"needs rows [{lo}, {hi})")
        images, labels = images[lo:hi], labels[lo:hi]
    prov = {"images": str(images_path), "labels": str(labels_path), "severity": severity,
            "sha256": _sha256(Path(images_path).read_bytes())}
    return Dataset(images, labels, name or Path(images_path).stem, prov)


# ---------------------------------------------------------------------------
# synthetic textures


SYNTH_PATTERNS = ("horizontal", "vertical", "plaid", "cross-hatch", "rings")
SYNTH_FREQS = (1.5, 4.0)  # cycles per image; the ratio survives the crop zoom of the augmentations


def _pattern(kind: str, yy, xx, freq: float, rng: np.random.Generator) -> np.ndarray:
    def wave(proj):
        return np.sin(2 * np.pi * freq * proj + rng.uniform(0, 2 * np.pi))

    if kind == "horizontal":
        return wave(yy)
    if kind == "vertical":
        return wave(xx)
    if kind == "plaid":
        return 0.5 * (wave(yy) + wave(xx))
    if kind == "cross-hatch":
        return 0.5 * (wave((xx + yy) / np.sqrt(2)) + wave((xx - yy) / np.sqrt(2)))
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    return wave(np.hypot(yy - cy, xx - cx))


def synth_dataset(classes: int = 10, per_class: int = 100, resolution: int = 32,
                  seed: int = 0, noise: float = 0.03, name: str = "synth") -> Dataset:
    """Class-conditional textures with per-image nuisance variation.

    A class fixes a texture family and a spatial frequency. All families are
    symmetric under horizontal and vertical flips, so the flips used by the
    augmentations never turn one class into another. Every image draws its
    own phase, contrast, mean color, color tint, a weaker distractor grating
    and pixel noise, so the class is not linearly readable from pixels.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    limit = len(SYNTH_PATTERNS) * len(SYNTH_FREQS)
    if not 1 <= classes <= limit:
        raise ValueError(f"classes must be in [1, {limit}]")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    yy = yy / resolution
    xx = xx / resolution
    images = np.empty((n, resolution, resolution, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        kind = SYNTH_PATTERNS[c % len(SYNTH_PATTERNS)]
        freq = SYNTH_FREQS[c // len(SYNTH_PATTERNS)] * rng.uniform(0.9, 1.1)
        tex = _pattern(kind, yy, xx, freq, rng)
        d_angle = rng.uniform(0, np.pi)
        d_proj = xx * np.cos(d_angle) + yy * np.sin(d_angle)
        distract = np.sin(2 * np.pi * rng.uniform(1.0, 5.0) * d_proj + rng.uniform(0, 2 * np.pi))
        amp = rng.uniform(0.15, 0.3)
        tint = rng.uniform(0.5, 1.0, size=3)
        base = rng.uniform(0.35, 0.65, size=3)
        tex = amp * tex + 0.35 * amp * distract
        img = base + tex[..., None] * tint + rng.normal(0, noise, size=(resolution, resolution, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    prov = {"generator": "synth_dataset", "classes": classes, "per_class": per_class,
            "resolution": resolution, "seed": seed, "noise": noise}
    return Dataset(images, labels.astype(np.int64), name, prov)


# ---------------------------------------------------------------------------
# corruptions

CORRUPTIONS = ("gaussian-noise", "shot-noise", "impulse-noise", "gaussian-blur",
               "brightness", "contrast", "pixelate")


@dataclass(frozen=True)
class CorruptionSpec:
    """One parametric corruption.

    Parameters by kind: gaussian-noise ``sigma``; shot-noise ``rate``
    (photons per unit intensity); impulse-noise ``p``; gaussian-blur
    ``sigma`` (and optional ``size``); brightness ``delta``; contrast
    ``factor``; pixelate ``factor`` (integer block size).
    """

    kind: str
    params: dict = field(default_factory=dict)
    severity: int = 5

    _RANGES = {
        "gaussian-noise": {"sigma": (0.0, 1.0)},
        "shot-noise": {"rate": (1.0, 1e4)},
        "impulse-noise": {"p": (0.0, 1.0)},
        "gaussian-blur": {"sigma": (0.0, 10.0), "size": (1, 31)},
        "brightness": {"delta": (-1.0, 1.0)},
        "contrast": {"factor": (0.0, 1.0)},
        "pixelate": {"factor": (1, 16)},
    }

    def __post_init__(self):
        if self.kind not in self._RANGES:
            raise ValueError(f"unknown corruption {self.kind!r}; choose from {CORRUPTIONS}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")
        ranges = self._RANGES[self.kind]
        for k, v in self.params.items():
            if k not in ranges:
                raise ValueError(f"{self.kind}: unknown parameter {k!r}")
            lo, hi = ranges[k]
            if not lo <= v <= hi:
                raise ValueError(f"{self.kind}: {k}={v} outside [{lo}, {hi}]")
        missing = [k for k in ranges if k not in self.params and k != "size"]
        if missing:
            raise ValueError(f"{self.kind}: missing parameter(s) {missing}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "severity": self.severity}


def corrupt(images: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply ``spec`` to an (N, H, W, 3) batch; pure in (images, spec, seed)."""
    x = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    p = spec.params
    if spec.kind == "gaussian-noise":
        out = x + rng.normal(0.0, p["sigma"], size=x.shape) if p["sigma"] > 0 else x
    elif spec.kind == "shot-noise":
        out = rng.poisson(np.clip(x, 0, 1) * p["rate"]) / p["rate"]
    elif spec.kind == "impulse-noise":
        hit = rng.random(x.shape) < p["p"]
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    elif spec.kind == "gaussian-blur":
        size = int(p.get("size", 2 * int(np.ceil(2 * p["sigma"])) + 1))
        out = blur(x, gaussian_kernel(size, p["sigma"])) if p["sigma"] > 0 else x
    elif spec.kind == "brightness":
        out = x + p["delta"]
    elif spec.kind == "contrast":
        mean = x.mean(axis=(-3, -2, -1), keepdims=True)
        out = (x - mean) * p["factor"] + mean
    elif spec.kind == "pixelate":
        f = int(p["factor"])
        h, w = x.shape[-3], x.shape[-2]
        if h % f or w % f:
            raise ValueError(f"pixelate factor {f} must divide {h}x{w}")
        small = x.reshape(x.shape[:-3] + (h // f, f, w // f, f, 3)).mean(axis=(-4, -2))
        out = np.repeat(np.repeat(small, f, axis=-3), f, axis=-2)
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ValueError(spec.kind)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(images).dtype, copy=False)


def corrupt_dataset(ds: Dataset, spec: CorruptionSpec, seed: int = 0, name: str | None = None) -> Dataset:
    prov = dict(ds.provenance)
    prov["corruption"] = spec.to_dict()
    prov["corruption_seed"] = seed
    return Dataset(corrupt(ds.images, spec, seed), ds.labels, name or spec.kind, prov)


def default_output_root() -> Path:
    return Path(os.environ.get("MT3_OUTPUT_ROOT", "runs"))
