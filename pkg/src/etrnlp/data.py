"""ShapesMT: seeded synthetic multi-task data, and its on-disk formats.

Scenes hold up to four shapes (circle, square, triangle, cross), at most one
per kind. Attribute tasks are presence flags; dense mode adds per-category
segmentation masks and a depth map. Rasterisation is exact point-in-shape
testing at integer pixel coordinates, so generation is byte-deterministic.

Directory layout::

    images/NNNNNN.ppm    binary P6
    labels.csv           id, attr_0 .. attr_{T-1}
    masks/NNNNNN.tnsr    [K, H, W] float32 0/1     (dense mode)
    depth/NNNNNN.tnsr    [1, H, W] float32         (dense mode)
    manifest.json        config, seed, splits, sha256 of every file
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

SHAPES = ("circle", "square", "triangle", "cross")
MODES = ("attributes", "dense")


# ---------------------------------------------------------------------------
# tensor files


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
DTYPE_F32 = 1


def tensor_file_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype != np.float32:
        raise UnsupportedDtypeError(f"only float32 tensors can be written, got {arr.dtype}")
    header = TNSR_MAGIC + struct.pack("<BBI", TNSR_VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_tensor_file(path, t) -> None:
    Path(path).write_bytes(tensor_file_bytes(t))


def parse_tensor_file(buf: bytes, source: str = "<bytes>") -> Tensor:
    if buf[:4] != TNSR_MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
    if len(buf) < 10:
        raise TruncatedPayloadError(f"{source}: truncated header")
    version, dtype, rank = struct.unpack_from("<BBI", buf, 4)
    if version != TNSR_VERSION:
        raise TensorFileError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{source}: unsupported dtype code {dtype}")
    off = 10
    if len(buf) < off + 8 * rank:
        raise TruncatedPayloadError(f"{source}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise TruncatedPayloadError(
            f"{source}: payload has {len(buf) - off} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
    return Tensor(data.astype(np.float32))


def load_tensor_file(path) -> Tensor:
    return parse_tensor_file(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# PPM


def ppm_bytes(img: np.ndarray) -> bytes:
    """``img``: uint8 ``[H, W, 3]``."""
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=pos)
    return data.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class ShapesMtConfig:
    image_size: int = 32
    mode: str = "attributes"
    tasks: int = 4
    num_samples: int = 1000
    positive_rate: float = 0.5
    correlation: float = 0.0
    coupled_pairs: tuple = ((1, 3),)
    min_radius: float = 0.12
    max_radius: float = 0.25
    noise: float = 0.05

    def validate(self) -> None:
        if self.image_size < 8:
            raise ValueError(f"image_size: must be >= 8, got {self.image_size}")
        if self.mode not in MODES:
            raise ValueError(f"mode: unknown mode {self.mode!r}")
        if not 1 <= self.tasks <= len(SHAPES):
            raise ValueError(f"tasks: must lie in [1, {len(SHAPES)}], got {self.tasks}")
        if self.num_samples < 10:
            raise ValueError(f"num_samples: need at least 10, got {self.num_samples}")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError(f"positive_rate: must lie in [0, 1], got {self.positive_rate}")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError(f"correlation: must lie in [0, 1], got {self.correlation}")
        for a, b in self.coupled_pairs:
            if not (0 <= a < len(SHAPES) and 0 <= b < len(SHAPES)) or a >= b:
                raise ValueError(f"coupled_pairs: invalid pair ({a}, {b})")
        if not 0 < self.min_radius <= self.max_radius < 0.5:
            raise ValueError("min_radius/max_radius: need 0 < min <= max < 0.5")
        if self.noise < 0:
            raise ValueError(f"noise: must be >= 0, got {self.noise}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coupled_pairs"] = [list(p) for p in self.coupled_pairs]
        return d

    @property
    def task_names(self) -> list[str]:
        if self.mode == "attributes":
            return [f"attr_{i}" for i in range(self.tasks)]
        return [f"seg_{SHAPES[i]}" for i in range(self.tasks)] + ["depth"]

    @property
    def head_kinds(self) -> tuple:
        if self.mode == "attributes":
            return ("attribute",) * self.tasks
        return ("segmentation",) * self.tasks + ("depth",)


@dataclass
class Shape:
    kind: int
    cy: float
    cx: float
    radius: float
    color: tuple


def rasterize(kind: str, cy: float, cx: float, radius: float, h: int, w: int) -> np.ndarray:
    """Boolean ``[H, W]`` mask of pixels (integer coordinates) inside the shape."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        half = radius * 0.85
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == "triangle":
        # apex up, base at cy + radius
        return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2)
    if kind == "cross":
        arm = max(1.0, radius / 3)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    raise ValueError(f"unknown shape {kind!r}")


def sample_presence(cfg: ShapesMtConfig, rng: np.random.Generator) -> np.ndarray:
    """Presence flag per shape kind.

    Each coupled pair ``(a, b)`` raises ``P(b | a)`` to ``r + c(1 - r)`` and
    lowers ``P(b | not a)`` to ``r - c r``, which keeps every marginal at ``r``.
    """
    r, c = cfg.positive_rate, cfg.correlation
    u = rng.random(len(SHAPES))
    present = u < r
    for a, b in cfg.coupled_pairs:
        p = r + c * (1 - r) if present[a] else r - c * r
        present[b] = u[b] < p
    return present


def sample_scene(cfg: ShapesMtConfig, rng: np.random.Generator) -> list[Shape]:
    size = cfg.image_size
    present = sample_presence(cfg, rng)
    shapes = []
    for kind in np.flatnonzero(present):
        radius = rng.uniform(cfg.min_radius, cfg.max_radius) * size
        margin = radius + 0.5
        cy = rng.uniform(margin, size - 1 - margin)
        cx = rng.uniform(margin, size - 1 - margin)
        color = tuple(rng.uniform(0.45, 1.0, 3))
        shapes.append(Shape(int(kind), cy, cx, radius, color))
    # large shapes first so smaller ones stay visible on top
    order = rng.permutation(len(shapes))
    shapes = [shapes[i] for i in order]
    shapes.sort(key=lambda s: -s.radius)
    return shapes


def depth_map(shapes: list[Shape], h: int, w: int) -> np.ndarray:
    """``1 / (1 + d / diag)``: ``d`` is the distance to the nearest shape centre
    (image centre for an empty scene), ``diag`` the image diagonal."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    centers = [(s.cy, s.cx) for s in shapes] or [((h - 1) / 2, (w - 1) / 2)]
    d = np.min([np.hypot(yy - cy, xx - cx) for cy, cx in centers], axis=0)
    return 1.0 / (1.0 + d / np.hypot(h, w))


def render_scene(shapes: list[Shape], size: int, rng: np.random.Generator, noise: float):
    """Returns ``(image uint8 [H, W, 3], label map int [H, W] with -1 = background)``."""
    img = np.full((size, size, 3), 0.1)
    labels = np.full((size, size), -1, dtype=np.int64)
    for s in shapes:
        m = rasterize(SHAPES[s.kind], s.cy, s.cx, s.radius, size, size)
        img[m] = s.color
        labels[m] = s.kind
    if noise:
        img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img, labels


def generate_arrays(cfg: ShapesMtConfig, seed: int) -> dict:
    """Render the whole dataset in memory (single-threaded, deterministic)."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0x5A17])
    n, size = cfg.num_samples, cfg.image_size
    images = np.zeros((n, size, size, 3), dtype=np.uint8)
    attrs = np.zeros((n, len(SHAPES)), dtype=np.int64)
    dense = cfg.mode == "dense"
    masks = np.zeros((n, cfg.tasks, size, size), dtype=np.float32) if dense else None
    depth = np.zeros((n, 1, size, size), dtype=np.float32) if dense else None
    for i in range(n):
        shapes = sample_scene(cfg, rng)
        images[i], labels = render_scene(shapes, size, rng, cfg.noise)
        for s in shapes:
            attrs[i, s.kind] = 1
        if dense:
            for k in range(cfg.tasks):
                masks[i, k] = labels == k
            depth[i, 0] = depth_map(shapes, size, size)
    split_rng = np.random.default_rng([seed, 0x5B117])
    perm = split_rng.permutation(n)
    n_train, n_val = int(0.8 * n), int(0.1 * n)
    splits = {"train": np.sort(perm[:n_train]), "val": np.sort(perm[n_train:n_train + n_val]),
              "test": np.sort(perm[n_train + n_val:])}
    return {"images": images, "attributes": attrs[:, :cfg.tasks], "masks": masks,
            "depth": depth, "splits": splits}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def generate_shapes_mt(cfg: ShapesMtConfig, seed: int, out_dir) -> dict:
    """Write the dataset directory; returns the manifest."""
    arrays = generate_arrays(cfg, seed)
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    files: dict[str, bytes] = {}
    for i, img in enumerate(arrays["images"]):
        files[f"images/{i:06d}.ppm"] = ppm_bytes(img)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id"] + [f"attr_{t}" for t in range(cfg.tasks)])
    for i, row in enumerate(arrays["attributes"]):
        writer.writerow([i] + [int(v) for v in row])
    files["labels.csv"] = buf.getvalue().encode("ascii")
    if cfg.mode == "dense":
        (root / "masks").mkdir(exist_ok=True)
        (root / "depth").mkdir(exist_ok=True)
        for i in range(cfg.num_samples):
            files[f"masks/{i:06d}.tnsr"] = tensor_file_bytes(arrays["masks"][i])
            files[f"depth/{i:06d}.tnsr"] = tensor_file_bytes(arrays["depth"][i])
    for rel, data in files.items():
        (root / rel).write_bytes(data)
    checksums = {rel: _sha256(data) for rel, data in sorted(files.items())}
    manifest = {
        "format": "shapes_mt",
        "version": 1,
        "config": cfg.to_dict(),
        "seed": seed,
        "tasks": cfg.task_names,
        "splits": {k: v.tolist() for k, v in arrays["splits"].items()},
        "checksums": checksums,
        "checksum": _sha256("".join(f"{k}:{v}\n" for k, v in checksums.items()).encode()),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def verify_dataset(root) -> list[str]:
    """Return a list of problems (empty when every file matches the manifest)."""
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        return [f"manifest.json: {exc}"]
    problems = []
    for rel, digest in manifest["checksums"].items():
        p = root / rel
        if not p.exists():
            problems.append(f"{rel}: missing")
        elif _sha256(p.read_bytes()) != digest:
            problems.append(f"{rel}: checksum mismatch")
    return problems


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass
class TaskSpec:
    name: str
    kind: str  # attribute | segmentation | depth


@dataclass
class MultiTaskDataset:
    images: np.ndarray  # float32 [N, 3, H, W] in [0, 1]
    tasks: list
    targets: list  # per task: [N, 1] or [N, 1, H, W]
    splits: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def __len__(self) -> int:
        return self.images.shape[0]


def dataset_from_arrays(cfg: ShapesMtConfig, arrays: dict, seed: int = 0) -> MultiTaskDataset:
    images = arrays["images"].transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    if cfg.mode == "attributes":
        tasks = [TaskSpec(n, "attribute") for n in cfg.task_names]
        targets = [arrays["attributes"][:, t:t + 1].astype(np.float32) for t in range(cfg.tasks)]
    else:
        tasks = [TaskSpec(n, "segmentation") for n in cfg.task_names[:-1]]
        tasks.append(TaskSpec("depth", "depth"))
        targets = [arrays["masks"][:, k:k + 1] for k in range(cfg.tasks)] + [arrays["depth"]]
    return MultiTaskDataset(images, tasks, targets, dict(arrays["splits"]), seed)


def load_dataset(root) -> MultiTaskDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    raw = dict(manifest["config"])
    raw["coupled_pairs"] = tuple(tuple(p) for p in raw["coupled_pairs"])
    cfg = ShapesMtConfig(**raw)
    n = cfg.num_samples
    images = np.stack([read_ppm(root / f"images/{i:06d}.ppm") for i in range(n)])
    with open(root / "labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    attrs = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64).reshape(n, cfg.tasks)
    masks = depth = None
    if cfg.mode == "dense":
        masks = np.stack([load_tensor_file(root / f"masks/{i:06d}.tnsr").data for i in range(n)])
        depth = np.stack([load_tensor_file(root / f"depth/{i:06d}.tnsr").data for i in range(n)])
    splits = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["splits"].items()}
    arrays = {"images": images, "attributes": attrs, "masks": masks, "depth": depth,
              "splits": splits}
    return dataset_from_arrays(cfg, arrays, manifest["seed"])


def batch_iter(dataset: MultiTaskDataset, batch_size: int, seed: int, split: str = "train",
               epoch: int = 0) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last partial batch is dropped."""
    idx = dataset.splits.get(split)
    if idx is None or len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    if not 1 <= batch_size <= len(idx):
        raise ValueError(f"batch size {batch_size} must lie in [1, {len(idx)}] for split {split!r}")
    order = np.random.default_rng([seed, epoch]).permutation(len(idx))
    shuffled = np.asarray(idx)[order]
    n_full = len(idx) // batch_size
    return [shuffled[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]


def eval_batches(dataset: MultiTaskDataset, split: str, batch_size: int) -> list[np.ndarray]:
    """Unshuffled batches covering the whole split, last one possibly short."""
    idx = np.asarray(dataset.splits[split])
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    return [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
