"""Synthetic imaging data: ellipse phantoms, Cartesian k-space, column undersampling.

Conventions: images are indexed ``[row, column]``; k-space is centered (DC at
``(H // 2, W // 2)``) and the default DFT scaling is orthonormal. Undersampling
removes whole columns, i.e. phase-encode lines along the second axis.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from uncprop import rng

LEFT, RIGHT = 0, 1
SIDE_NAMES = ("left", "right")
SUPERSAMPLE = 8
DATASET_VERSION = 1


@dataclass(frozen=True)
class Ellipse:
    cx: float  # column coordinate of the center (pixels)
    cy: float  # row coordinate of the center
    a: float   # semi-axis along the rotated x direction
    b: float
    angle: float
    intensity: float

    @property
    def area(self) -> float:
        return float(np.pi * self.a * self.b)

    @property
    def radius(self) -> float:
        return max(self.a, self.b)


@dataclass(frozen=True, eq=False)
class Phantom:
    image: np.ndarray
    area: float
    side: int
    ellipses: tuple[Ellipse, ...] = field(default=())


def render_ellipses(ellipses, size: int, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Anti-aliased rendering by sub-pixel point sampling."""
    offs = (np.arange(supersample) + 0.5) / supersample
    coords = (np.arange(size)[:, None] + offs[None, :]).ravel()
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    fine = np.zeros_like(xx)
    for e in ellipses:
        c, s = np.cos(e.angle), np.sin(e.angle)
        dx, dy = xx - e.cx, yy - e.cy
        u = (c * dx + s * dy) / e.a
        v = (-s * dx + c * dy) / e.b
        inside = u * u + v * v <= 1.0
        fine = np.where(inside, np.maximum(fine, e.intensity), fine)
    return fine.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def _fits(cx, cy, r, size) -> bool:
    return r + 1.0 <= cx <= size - 1.0 - r and r + 1.0 <= cy <= size - 1.0 - r


def make_phantom(seed: int, size: int = 32) -> Phantom:
    """2-5 non-overlapping ellipses; the largest one sits left or right of center.

    The ellipses never overlap, so the union area is exactly the sum of
    ``pi * a * b``.
    """
    if size < 16:
        raise ValueError("phantom size must be at least 16")
    g = np.random.default_rng(rng.derive_seed("phantom", seed, size))
    side = int(g.integers(2))
    half = size / 2.0
    a, b = g.uniform(0.14, 0.24, size=2) * size
    offset = g.uniform(0.03, 0.18) * size
    cx = half - offset if side == LEFT else half + offset
    cy = half + g.uniform(-0.08, 0.08) * size
    ellipses = [Ellipse(cx, cy, a, b, g.uniform(0, np.pi), g.uniform(0.7, 1.0))]
    n_extra = int(g.integers(1, 5))
    for _ in range(200):
        if len(ellipses) > n_extra:
            break
        ea, eb = g.uniform(0.04, 0.09, size=2) * size
        r = max(ea, eb)
        ex, ey = g.uniform(0, size, size=2)
        if not _fits(ex, ey, r, size):
            continue
        if any(np.hypot(ex - o.cx, ey - o.cy) <= r + o.radius + 0.5 for o in ellipses):
            continue
        ellipses.append(Ellipse(ex, ey, ea, eb, g.uniform(0, np.pi), g.uniform(0.3, 0.9)))
    if len(ellipses) < 2:
        raise RuntimeError(f"could not place a second ellipse for seed {seed}")
    image = render_ellipses(ellipses, size)
    return Phantom(image, float(sum(e.area for e in ellipses)), side, tuple(ellipses))


# -- Fourier domain ------------------------------------------------------------------------------


def fft2c(image: np.ndarray, norm: str = "ortho") -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(image), norm=norm))


def ifft2c(kspace: np.ndarray, norm: str = "ortho") -> np.ndarray:
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(kspace), norm=norm))


def to_kspace(image, noise_std: float, seed: int, norm: str = "ortho") -> np.ndarray:
    """Centered 2-D DFT plus complex Gaussian noise (``noise_std`` per component)."""
    image = np.asarray(image, dtype=np.float64)
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    k = fft2c(image, norm)
    if noise_std > 0:
        z = rng.standard_normal(seed, [0], 2 * image.size)[0]
        k = k + noise_std * (z[: image.size] + 1j * z[image.size:]).reshape(image.shape)
    return k


@dataclass(frozen=True)
class MaskSpec:
    acceleration: float
    center_fraction: float
    width: int
    seed: int = 0

    def __post_init__(self):
        R, c, W = self.acceleration, self.center_fraction, self.width
        if not R > 0:
            raise ValueError("acceleration must be positive")
        if not 0 < c < 1:
            raise ValueError("center_fraction must lie in (0, 1)")
        if W < 1:
            raise ValueError("width must be positive")
        if c * W < 1:
            raise ValueError(f"center_fraction {c} keeps no column at width {W}")
        if c * W > W / R + 1e-9:
            raise ValueError(
                f"acceleration {R} with center fraction {c}: the center block alone "
                f"({c * W:.2f} columns) exceeds the budget of {W / R:.2f} columns"
            )

    @property
    def num_center(self) -> int:
        return max(1, int(round(self.center_fraction * self.width)))

    @property
    def outer_probability(self) -> float:
        n_c, W = self.num_center, self.width
        if W == n_c:
            return 0.0
        return float(np.clip((W / self.acceleration - n_c) / (W - n_c), 0.0, 1.0))


def center_slice(spec: MaskSpec) -> slice:
    pad = (spec.width - spec.num_center + 1) // 2
    return slice(pad, pad + spec.num_center)


def make_mask(spec: MaskSpec) -> np.ndarray:
    """Boolean column mask: fixed center block plus Bernoulli outer columns."""
    u = rng.uniform(spec.seed, [0], spec.width)[0]
    mask = u < spec.outer_probability
    mask[center_slice(spec)] = True
    return mask


@dataclass(frozen=True, eq=False)
class KSpaceSample:
    kspace: np.ndarray
    mask: np.ndarray
    noise_std: float
    mask_spec: MaskSpec

    def __post_init__(self):
        if self.mask.shape != (self.kspace.shape[1],):
            raise ValueError("mask must have one entry per k-space column")
        if np.any(self.kspace[:, ~self.mask] != 0):
            raise ValueError("masked-out columns must be exactly zero")
        if not np.all(self.mask[center_slice(self.mask_spec)]):
            raise ValueError("mask must contain all center columns")


def undersample(kspace: np.ndarray, spec: MaskSpec, noise_std: float = 0.0) -> KSpaceSample:
    mask = make_mask(spec)
    return KSpaceSample(np.where(mask[None, :], kspace, 0), mask, noise_std, spec)


def zero_filled_recon(sample: KSpaceSample, norm: str = "ortho") -> np.ndarray:
    return np.abs(ifft2c(sample.kspace, norm))


# -- dataset storage -----------------------------------------------------------------------------

_ARRAY_MAGIC = b"UPARRAY1"
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<c16")}
_DTYPE_CODES = {np.dtype("float64"): 1, np.dtype("complex128"): 2}


def array_to_bytes(a: np.ndarray) -> bytes:
    """Flat binary: magic, dtype code (u8), ndim (u8), shape (u32 each), raw LE data."""
    a = np.ascontiguousarray(a)
    code = _DTYPE_CODES[a.dtype]
    head = _ARRAY_MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype(_DTYPES[code]).tobytes()


def array_from_bytes(blob: bytes) -> np.ndarray:
    if not blob.startswith(_ARRAY_MAGIC):
        raise ValueError("not an uncprop array file")
    pos = len(_ARRAY_MAGIC)
    code, ndim = struct.unpack_from("<BB", blob, pos)
    pos += 2
    shape = struct.unpack_from(f"<{ndim}I", blob, pos)
    pos += 4 * ndim
    return np.frombuffer(blob[pos:], dtype=_DTYPES[code]).reshape(shape).copy()


def split_ids(count: int, seed: int) -> dict[str, list[int]]:
    """Test 20%; the rest halves into upstream/downstream, each 80/20 train/val."""
    perm = np.random.default_rng(rng.derive_seed("split", seed)).permutation(count)
    n_test = int(round(0.2 * count))
    test, rest = perm[:n_test], perm[n_test:]
    up, down = rest[: len(rest) // 2], rest[len(rest) // 2:]
    out = {"test": test}
    for name, part in (("upstream", up), ("downstream", down)):
        n_tr = int(round(0.8 * len(part)))
        out[f"{name}_train"], out[f"{name}_val"] = part[:n_tr], part[n_tr:]
    return {k: sorted(int(i) for i in v) for k, v in out.items()}


def noise_seed(dataset_seed: int, example_id: int) -> int:
    return rng.derive_seed("noise", dataset_seed, example_id)


def mask_seed(dataset_seed: int, example_id: int, acceleration: float) -> int:
    return rng.derive_seed("mask", dataset_seed, example_id, float(acceleration))


def write_dataset(out_dir, count: int, size: int, noise_std: float, seed: int) -> dict:
    """Write phantoms, noisy fully sampled k-space, labels and a manifest."""
    if count < 1:
        raise ValueError("dataset count must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "kspace").mkdir(parents=True, exist_ok=True)
    files, labels = [], []
    for i in range(count):
        ph = make_phantom(rng.derive_seed("example", seed, i), size)
        k = to_kspace(ph.image, noise_std, noise_seed(seed, i))
        entry = {"id": i}
        for kind, arr in (("images", ph.image), ("kspace", k)):
            blob = array_to_bytes(arr)
            rel = f"{kind}/{i:05d}.bin"
            (out / rel).write_bytes(blob)
            entry[kind] = {"path": rel, "sha256": hashlib.sha256(blob).hexdigest()}
        files.append(entry)
        labels.append((i, ph.area, SIDE_NAMES[ph.side]))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "area", "side"])
        for i, area, side in labels:
            w.writerow([i, repr(area), side])
    manifest = {
        "version": DATASET_VERSION,
        "seed": seed,
        "size": size,
        "count": count,
        "noise_std": noise_std,
        "splits": split_ids(count, seed),
        "files": files,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(text)
    return manifest


@dataclass(frozen=True, eq=False)
class Dataset:
    manifest: dict
    images: np.ndarray   # (N, H, W) ground truth
    kspace: np.ndarray   # (N, H, W) complex, fully sampled with noise
    area: np.ndarray
    side: np.ndarray

    @property
    def seed(self) -> int:
        return int(self.manifest["seed"])

    @property
    def noise_std(self) -> float:
        return float(self.manifest["noise_std"])

    def split(self, name: str) -> list[int]:
        return list(self.manifest["splits"][name])


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')}")
    images, kspace = [], []
    for entry in manifest["files"]:
        for kind, sink in (("images", images), ("kspace", kspace)):
            blob = (root / entry[kind]["path"]).read_bytes()
            if hashlib.sha256(blob).hexdigest() != entry[kind]["sha256"]:
                raise ValueError(f"checksum mismatch for {entry[kind]['path']}")
            sink.append(array_from_bytes(blob))
    area, side = [], []
    with open(root / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            area.append(float(row["area"]))
            side.append(SIDE_NAMES.index(row["side"]))
    return Dataset(manifest, np.stack(images), np.stack(kspace), np.array(area), np.array(side))
