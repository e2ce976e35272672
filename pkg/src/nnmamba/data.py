"""Synthetic volumes for the three tasks, deterministic splits, and the NMV1 file format.

NMV1 layout (little-endian)::

    b"NMV1"  u8 task  u8 channels  3 x u32 extents (D, H, W)  3 x f32 spacing
    f32 image payload [C, D, H, W], row-major
    label block:
        segmentation: int8 mask payload [D, H, W]
        classification: u32 class index
        landmark: u32 count, then count x 3 x f32 coordinates (mm)

Landmark coordinates follow array-axis order, ``(d, h, w) * spacing``.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .models import canonical_task

MAGIC = b"NMV1"
TASK_CODES = {"segmentation": 0, "classification": 1, "landmark": 2}
_CODE_TASKS = {v: k for k, v in TASK_CODES.items()}
LANDMARK_NAMES = ("CBD1", "CBD2", "HDV1", "HDV2", "ADV1", "ADV2")
SEG_INTENSITIES = (0.0, 0.3, 0.6, 1.0)
SEG_CLASSES = 4


@dataclass
class VolumeSample:
    image: np.ndarray
    label: object
    spacing: tuple = (1.0, 1.0, 1.0)
    task: str = "segmentation"

    def __post_init__(self):
        self.task = canonical_task(self.task)
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 3:
            self.image = self.image[None]
        if self.image.ndim != 4:
            raise ConfigError(f"image must be [C, D, H, W], got {self.image.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        if self.task == "segmentation":
            self.label = np.asarray(self.label, dtype=np.int8)
            if self.label.shape != self.image.shape[1:]:
                raise ConfigError("mask and image extents differ")
        elif self.task == "classification":
            self.label = int(self.label)
        else:
            self.label = np.asarray(self.label, dtype=np.float32).reshape(-1, 3)

    @property
    def shape(self) -> tuple:
        return self.image.shape[1:]

    def landmark_voxels(self) -> np.ndarray:
        return self.label / np.asarray(self.spacing, dtype=np.float32)


@dataclass
class DatasetSpec:
    task: str = "segmentation"
    n_samples: int = 100
    shape: tuple = (32, 32, 32)
    noise: float = 0.1
    ratios: tuple = (0.7, 0.1, 0.2)
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.task = canonical_task(self.task)
        self.shape = tuple(int(s) for s in self.shape)
        self.ratios = tuple(float(r) for r in self.ratios)
        self.spacing = tuple(float(s) for s in self.spacing)

    def validate(self) -> "DatasetSpec":
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {self.ratios}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise ConfigError("volume extents must be three values >= 16")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, index): samples can be generated in any order."""
    return np.random.default_rng([int(seed), int(index)])


def _grid(shape):
    return np.indices(shape, dtype=np.float64)


def _ellipsoid(grid, center, radii):
    q = sum(((grid[i] - center[i]) / radii[i]) ** 2 for i in range(3))
    return q <= 1.0


def gen_seg_sample(rng: np.random.Generator, shape=(32, 32, 32), noise: float = 0.1,
                   spacing=(1.0, 1.0, 1.0)) -> VolumeSample:
    """Three nested regions: whole ellipsoid, an inner ellipsoid, an innermost blob.

    Mask labels 1..3 name the innermost region a voxel belongs to.
    """
    shape = tuple(shape)
    ext = np.asarray(shape, dtype=np.float64)
    grid = _grid(shape)
    r1 = rng.uniform(0.25, 0.36, size=3) * ext
    c1 = np.array([rng.uniform(r + 1, s - r - 2) for r, s in zip(r1, ext)])
    r2 = r1 * rng.uniform(0.55, 0.75, size=3)
    c2 = c1 + rng.uniform(-1, 1, size=3) * (r1 - r2) * 0.5
    r3 = r2 * rng.uniform(0.5, 0.7, size=3)
    c3 = c2 + rng.uniform(-1, 1, size=3) * (r2 - r3) * 0.5
    whole = _ellipsoid(grid, c1, r1)
    inner = whole & _ellipsoid(grid, c2, r2)
    core = inner & _ellipsoid(grid, c3, r3)
    mask = whole.astype(np.int8) + inner + core
    image = np.asarray(SEG_INTENSITIES, dtype=np.float32)[mask]
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=shape).astype(np.float32)
    return VolumeSample(image, mask.astype(np.int8), spacing, "segmentation")


def gen_cls_sample(rng: np.random.Generator, shape=(32, 32, 32), noise: float = 0.1,
                   spacing=(1.0, 1.0, 1.0)) -> VolumeSample:
    """Two to four small blobs of random polarity stacked along the depth axis.

    The class is the polarity of the deepest blob (1 when bright). Blobs sit in
    separate depth slots, so deciding which one comes last means relating
    structures up to most of the volume apart.
    """
    shape = tuple(shape)
    scale = shape[0] / 32
    radius = max(1.5, 2.5 * scale)
    k = int(rng.integers(2, 5))
    slots = np.sort(rng.choice(4, size=k, replace=False))
    depths = 4 * scale + 6.5 * scale * slots + rng.uniform(0, 1.5 * scale, size=k)
    polarity = rng.choice([-1.0, 1.0], size=k)
    grid = _grid(shape)
    image = np.zeros(shape, dtype=np.float32)
    for depth, sign in zip(depths, polarity):
        center = [depth] + [rng.uniform(radius + 1, s - radius - 2) for s in shape[1:]]
        image[_ellipsoid(grid, center, [radius] * 3)] = sign
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=shape).astype(np.float32)
    return VolumeSample(image, int(polarity[-1] > 0), spacing, "classification")


def gen_landmark_sample(rng: np.random.Generator, shape=(32, 32, 32), noise: float = 0.1,
                        spacing=(1.0, 1.0, 1.0)) -> VolumeSample:
    """An axis-aligned ellipsoid; the six landmarks are the ends of its three axes.

    Pairs (CBD, HDV, ADV) lie along depth, height and width. Centers and
    semi-axes are whole voxels, so every landmark sits on a voxel center
    strictly inside the volume.
    """
    shape = tuple(shape)
    radii = np.array([rng.integers(max(3, s // 6), s // 3 + 1) for s in shape])
    center = np.array([rng.integers(r + 2, s - r - 2) for r, s in zip(radii, shape)])
    grid = _grid(shape)
    body = _ellipsoid(grid, center, radii + 0.5)
    # a smaller bright core makes the body's interior distinguishable from its rim
    core = _ellipsoid(grid, center, radii * 0.5)
    image = body.astype(np.float32) * 0.6 + core.astype(np.float32) * 0.4
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=shape).astype(np.float32)
    points = []
    for axis in range(3):
        for sign in (-1, 1):
            p = center.astype(np.float64).copy()
            p[axis] += sign * radii[axis]
            points.append(p)
    coords = np.asarray(points) * np.asarray(spacing, dtype=np.float64)
    return VolumeSample(image, coords, spacing, "landmark")


_GENERATORS = {
    "segmentation": gen_seg_sample,
    "classification": gen_cls_sample,
    "landmark": gen_landmark_sample,
}


def generate_sample(spec: DatasetSpec, index: int) -> VolumeSample:
    gen = _GENERATORS[spec.task]
    return gen(sample_rng(spec.seed, index), spec.shape, spec.noise, spec.spacing)


def generate_dataset(spec: DatasetSpec) -> list[VolumeSample]:
    spec.validate()
    return [generate_sample(spec, i) for i in range(spec.n_samples)]


# ---------------------------------------------------------------- splits


def split_sizes(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Floor allocation; a split with a positive ratio gets at least one sample
    when ``n`` allows it (validation first, then test); the rest goes to train."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    val = math.floor(n * ratios[1] + 1e-9)
    test = math.floor(n * ratios[2] + 1e-9)
    if ratios[1] > 0 and val == 0 and n - test >= 2:
        val = 1
    if ratios[2] > 0 and test == 0 and n - val >= 2:
        test = 1
    return n - val - test, val, test


def split(dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Shuffle indices with ``seed`` and cut into (train, val, test).

    ``dataset`` is a sequence or an integer count; the result holds items of
    the sequence, or indices when a count is given.
    """
    items = list(range(dataset)) if isinstance(dataset, int) else list(dataset)
    n_train, n_val, _ = split_sizes(len(items), ratios)
    order = np.random.default_rng(seed).permutation(len(items))
    picked = [items[i] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


# ---------------------------------------------------------------- augmentation


def flip(sample: VolumeSample, axes) -> VolumeSample:
    """Mirror image and label along the given spatial axes (0=D, 1=H, 2=W)."""
    axes = tuple(int(a) for a in np.atleast_1d(axes))
    if any(a not in (0, 1, 2) for a in axes):
        raise ValueError(f"flip axes must be in 0..2, got {axes}")
    image = np.flip(sample.image, tuple(a + 1 for a in axes)).copy()
    label = sample.label
    if sample.task == "segmentation":
        label = np.flip(label, axes).copy()
    elif sample.task == "landmark":
        label = label.copy()
        for a in axes:
            extent = np.float32((sample.shape[a] - 1) * sample.spacing[a])
            label[:, a] = extent - label[:, a]
    return VolumeSample(image, label, sample.spacing, sample.task)


def random_flip(sample: VolumeSample, rng: np.random.Generator, p: float = 0.5) -> VolumeSample:
    axes = [a for a in range(3) if rng.random() < p]
    return flip(sample, axes) if axes else sample


# ---------------------------------------------------------------- NMV1 files


def dumps_volume(sample: VolumeSample) -> bytes:
    C = sample.image.shape[0]
    if C > 255:
        raise ValueError("at most 255 channels")
    parts = [
        MAGIC,
        struct.pack("<BB", TASK_CODES[sample.task], C),
        struct.pack("<3I", *sample.shape),
        struct.pack("<3f", *sample.spacing),
        np.ascontiguousarray(sample.image, dtype="<f4").tobytes(),
    ]
    if sample.task == "segmentation":
        parts.append(np.ascontiguousarray(sample.label, dtype=np.int8).tobytes())
    elif sample.task == "classification":
        parts.append(struct.pack("<I", sample.label))
    else:
        parts.append(struct.pack("<I", len(sample.label)))
        parts.append(np.ascontiguousarray(sample.label, dtype="<f4").tobytes())
    return b"".join(parts)


def loads_volume(buf: bytes) -> VolumeSample:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("volume file truncated")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("not a volume file (bad magic)")
    code, C = struct.unpack("<BB", take(2))
    if code not in _CODE_TASKS:
        raise FormatError(f"unknown task code {code}")
    task = _CODE_TASKS[code]
    shape = struct.unpack("<3I", take(12))
    spacing = struct.unpack("<3f", take(12))
    if C == 0 or 0 in shape:
        raise FormatError("empty volume")
    if min(spacing) <= 0 or not all(math.isfinite(s) for s in spacing):
        raise FormatError(f"invalid spacing {spacing}")
    n = C * shape[0] * shape[1] * shape[2]
    image = np.frombuffer(take(4 * n), dtype="<f4").reshape((C,) + shape).astype(np.float32)
    if task == "segmentation":
        label = np.frombuffer(take(n // C), dtype=np.int8).reshape(shape).copy()
    elif task == "classification":
        (label,) = struct.unpack("<I", take(4))
    else:
        (count,) = struct.unpack("<I", take(4))
        label = np.frombuffer(take(12 * count), dtype="<f4").reshape(count, 3).astype(np.float32)
    if pos != len(view):
        raise FormatError("trailing bytes after label block")
    # the header spacing is f32; keep exactly what was stored
    return VolumeSample(image, label, spacing, task)


def write_volume(path, sample: VolumeSample) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_volume(sample))


def read_volume(path) -> VolumeSample:
    with open(path, "rb") as fh:
        return loads_volume(fh.read())


# ---------------------------------------------------------------- manifests


@dataclass
class Manifest:
    task: str
    entries: list = field(default_factory=list)  # {"path": str, "split": "train"|"val"|"test"}
    spec: dict | None = None

    def paths(self, which: str) -> list[str]:
        return [e["path"] for e in self.entries if e["split"] == which]

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "spec": self.spec, "entries": self.entries}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            d = json.loads(text)
            entries = d["entries"]
            if not all(isinstance(e, dict) and {"path", "split"} <= set(e) for e in entries):
                raise KeyError("entries")
            return cls(canonical_task(d["task"]), entries, d.get("spec"))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"malformed dataset manifest: {e}") from None


def write_dataset(spec: DatasetSpec, out_dir, split_seed: int | None = None) -> Manifest:
    """Generate, split, and write every sample plus ``manifest.json`` into ``out_dir``.

    Paths in the manifest are relative to ``out_dir``.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    train, val, test = split(spec.n_samples, spec.ratios, spec.seed if split_seed is None else split_seed)
    which = {i: "train" for i in train} | {i: "val" for i in val} | {i: "test" for i in test}
    entries = []
    for i in range(spec.n_samples):
        name = f"sample_{i:05d}.nmv"
        write_volume(os.path.join(out_dir, name), generate_sample(spec, i))
        entries.append({"path": name, "split": which[i]})
    manifest = Manifest(spec.task, entries, spec.to_dict())
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())
    return manifest


def load_manifest(path) -> tuple[Manifest, str]:
    """Return the manifest and the directory its relative paths resolve against."""
    try:
        with open(path) as fh:
            return Manifest.from_json(fh.read()), os.path.dirname(os.path.abspath(path))
    except OSError as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from None


def load_split(path, which: str) -> list[VolumeSample]:
    manifest, root = load_manifest(path)
    return [read_volume(os.path.join(root, p)) for p in manifest.paths(which)]
