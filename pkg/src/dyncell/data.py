"""Deterministic synthetic video sequences: moving shapes over texture.

Each sequence draws 1-4 shapes (rectangle, disk, bar) of distinct classes
over a smooth random background; shapes translate with a constant integer
per-object velocity so labels shift exactly between frames. Images are
quantized to a 16-bit grid at generation time, which makes the on-disk
PPM/PGM round trip lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_LABEL = 255
QUANT = 65535  # 16-bit intensity grid shared by generator and raster files


class DataError(ValueError):
    pass


@dataclass
class DatasetConfig:
    n_sequences: int = 200
    seq_len: int = 3
    height: int = 64
    width: int = 64
    n_classes: int = 5
    max_velocity: int = 3
    occlusion_prob: float = 0.25
    noise_std: float = 0.02
    seed: int = 7

    def validate(self):
        if self.n_classes < 2:
            raise DataError(f"n_classes {self.n_classes} < 2")
        if self.seq_len < 2:
            raise DataError(f"seq_len {self.seq_len} < 2")
        if self.height % 32 or self.width % 32:
            raise DataError(
                f"height/width {self.height}x{self.width} not divisible by 32")
        if self.n_sequences < 1:
            raise DataError("n_sequences < 1")


@dataclass
class Sequence:
    frames: list[np.ndarray]          # (3,H,W) float64 in [0,1]
    labels: list[np.ndarray]          # (H,W) uint8 class ids
    velocities: list[tuple[int, int]]  # per shape (dy, dx)


@dataclass
class Dataset:
    config: DatasetConfig
    sequences: list[Sequence] = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)


_SHAPE_KINDS = ("rect", "disk", "bar")

# class identity maps to a stable hue so the task is learnable from color
_CLASS_COLORS = np.array([
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.9],
    [0.2, 0.9, 0.9],
    [0.95, 0.6, 0.2],
])


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float,
                size: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == "rect":
        return (np.abs(ys - cy) <= size) & (np.abs(xs - cx) <= size * 0.8)
    if kind == "disk":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= size ** 2
    return (np.abs(ys - cy) <= size * 0.35) & (np.abs(xs - cx) <= size * 1.6)


def _smooth_background(rng, h, w):
    coarse = rng.uniform(0.1, 0.55, (3, 5, 5))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.clip(ys.astype(int), 0, 3)
    x0 = np.clip(xs.astype(int), 0, 3)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = np.empty((3, h, w))
    for c in range(3):
        g = coarse[c]
        out[c] = (g[y0][:, x0] * (1 - fy) * (1 - fx)
                  + g[y0][:, x0 + 1] * (1 - fy) * fx
                  + g[y0 + 1][:, x0] * fy * (1 - fx)
                  + g[y0 + 1][:, x0 + 1] * fy * fx)
    return out


def _paths_overlap(a, b, seq_len):
    """Conservative bounding-box overlap over the whole trajectory."""
    (cy_a, cx_a, sz_a, vy_a, vx_a) = a
    (cy_b, cx_b, sz_b, vy_b, vx_b) = b
    ra = sz_a * 1.6 + 1
    rb = sz_b * 1.6 + 1
    for t in range(seq_len):
        if (abs((cy_a + t * vy_a) - (cy_b + t * vy_b)) <= ra + rb
                and abs((cx_a + t * vx_a) - (cx_b + t * vx_b)) <= ra + rb):
            return True
    return False


def _make_sequence(cfg: DatasetConfig, rng: np.random.Generator,
                   forced_class: int) -> Sequence:
    h, w = cfg.height, cfg.width
    n_shapes = int(rng.integers(1, min(4, cfg.n_classes - 1) + 1))
    classes = [forced_class]
    others = [c for c in range(1, cfg.n_classes) if c != forced_class]
    if n_shapes > 1:
        classes += list(rng.choice(others, size=n_shapes - 1, replace=False))
    allow_overlap = rng.random() < cfg.occlusion_prob

    placed = []
    for shape_idx in range(len(classes)):
        found = False
        for attempt in range(200):
            size = float(rng.uniform(min(h, w) / 12, min(h, w) / 6))
            margin = size * 1.6 + cfg.max_velocity * (cfg.seq_len - 1) + 1
            if 2 * margin >= min(h, w):
                raise DataError("shape too large to fit the frame")
            cy = float(rng.uniform(margin, h - margin))
            cx = float(rng.uniform(margin, w - margin))
            vy = int(rng.integers(-cfg.max_velocity, cfg.max_velocity + 1))
            vx = int(rng.integers(-cfg.max_velocity, cfg.max_velocity + 1))
            cand = (cy, cx, size, vy, vx)
            if allow_overlap or not any(
                    _paths_overlap(cand, p, cfg.seq_len) for p in placed):
                placed.append(cand)
                found = True
                break
        if not found:
            if shape_idx == 0:
                raise DataError("could not place any shape in the frame")
            classes = classes[:shape_idx]  # frame is full; keep what fits
            break

    kinds = [str(rng.choice(_SHAPE_KINDS)) for _ in classes]
    background = _smooth_background(rng, h, w)
    shade = [float(rng.uniform(0.85, 1.15)) for _ in classes]

    frames, labels = [], []
    for t in range(cfg.seq_len):
        img = background.copy()
        lab = np.zeros((h, w), dtype=np.uint8)
        for (cls, kind, sh, (cy, cx, size, vy, vx)) in zip(
                classes, kinds, shade, placed):
            mask = _shape_mask(kind, h, w, cy + t * vy, cx + t * vx, size)
            lab[mask] = cls
            img[:, mask] = (_CLASS_COLORS[cls][:, None] * sh)
        img += rng.normal(0.0, cfg.noise_std, img.shape)
        img = np.clip(img, 0.0, 1.0)
        img = np.round(img * QUANT) / QUANT
        frames.append(img)
        labels.append(lab)
    return Sequence(frames=frames, labels=labels,
                    velocities=[(p[3], p[4]) for p in placed])


def generate(cfg: DatasetConfig) -> Dataset:
    """Build the full dataset; every non-background class is guaranteed
    to appear (the first shape's class cycles through them)."""
    cfg.validate()
    root = np.random.default_rng(cfg.seed)
    seeds = root.integers(0, 2 ** 63 - 1, size=cfg.n_sequences)
    sequences = []
    for i in range(cfg.n_sequences):
        forced = 1 + i % (cfg.n_classes - 1)
        sequences.append(_make_sequence(
            cfg, np.random.default_rng(seeds[i]), forced))
    ds = Dataset(config=cfg, sequences=sequences)
    present = set()
    for seq in ds.sequences:
        present.update(np.unique(seq.labels[0]).tolist())
    missing = set(range(1, cfg.n_classes)) - present
    if missing:
        raise DataError(f"classes {sorted(missing)} never appeared")
    return ds


@dataclass
class Splits:
    train: list[Sequence]
    val: list[Sequence]
    meta_train: list[Sequence]
    meta_val: list[Sequence]


def split(ds: Dataset, train_frac: float, meta_val_frac: float,
          seed: int) -> Splits:
    """Sequence-level disjoint partitions; the meta split divides train."""
    if not (0 < train_frac < 1 and 0 < meta_val_frac < 1):
        raise DataError("fractions must lie in (0,1)")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_frac))
    train_idx = sorted(order[:n_train].tolist())
    val_idx = sorted(order[n_train:].tolist())
    if not train_idx or not val_idx:
        raise DataError("empty train or val partition")
    meta_order = np.random.default_rng(seed + 1).permutation(len(train_idx))
    n_meta_val = int(round(len(train_idx) * meta_val_frac))
    mval = sorted(np.asarray(train_idx)[meta_order[:n_meta_val]].tolist())
    mtrain = sorted(np.asarray(train_idx)[meta_order[n_meta_val:]].tolist())
    if not mtrain or not mval:
        raise DataError("empty meta partition")
    seqs = ds.sequences
    return Splits(train=[seqs[i] for i in train_idx],
                  val=[seqs[i] for i in val_idx],
                  meta_train=[seqs[i] for i in mtrain],
                  meta_val=[seqs[i] for i in mval])


@dataclass
class Batch:
    frames: np.ndarray  # (B, T, 3, H, W)
    labels: np.ndarray  # (B, T, H, W)


def _augment_sequence(seq: Sequence, scale: float, oy: int, ox: int,
                      crop: int, mean_value: float):
    """One scale + crop applied identically to every frame of a sequence."""
    h, w = seq.labels[0].shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    frames, labels = [], []
    for img, lab in zip(seq.frames, seq.labels):
        if scale != 1.0:
            yi = np.clip(np.round(np.linspace(0, h - 1, nh)).astype(int), 0, h - 1)
            xi = np.clip(np.round(np.linspace(0, w - 1, nw)).astype(int), 0, w - 1)
            img = img[:, yi][:, :, xi]
            lab = lab[yi][:, xi]
        fc = np.full((3, crop, crop), mean_value)
        lc = np.full((crop, crop), PAD_LABEL, dtype=np.int64)
        ch = min(crop, img.shape[1] - oy)
        cw = min(crop, img.shape[2] - ox)
        fc[:, :ch, :cw] = img[:, oy:oy + ch, ox:ox + cw]
        lc[:ch, :cw] = lab[oy:oy + ch, ox:ox + cw]
        frames.append(fc)
        labels.append(lc)
    return np.stack(frames), np.stack(labels)


def batches(split_seqs: list[Sequence], batch_size: int, crop: int,
            scale_range: tuple[float, float], seed: int):
    """Yield shuffled batches with per-sequence consistent augmentation."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(split_seqs))
    mean_value = float(np.mean([s.frames[0].mean() for s in split_seqs]))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        fs, ls = [], []
        for idx in chunk:
            seq = split_seqs[idx]
            h, w = seq.labels[0].shape
            scale = float(rng.uniform(*scale_range))
            nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
            if crop > min(nh, nw):
                oy = ox = 0
            else:
                oy = int(rng.integers(0, nh - crop + 1))
                ox = int(rng.integers(0, nw - crop + 1))
            f, l = _augment_sequence(seq, scale, oy, ox, crop, mean_value)
            fs.append(f)
            ls.append(l)
        yield Batch(frames=np.stack(fs), labels=np.stack(ls))


# ---------------------------------------------------------------------------
# on-disk raster format: one directory per sequence, PPM images + PGM labels
# ---------------------------------------------------------------------------

def _write_ppm16(path: Path, img: np.ndarray):
    arr = np.round(img * QUANT).astype(">u2")  # (3,H,W) -> interleaved
    h, w = arr.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n{QUANT}\n".encode())
        f.write(arr.transpose(1, 2, 0).tobytes())


def _read_ppm16(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM")
        w, h = (int(v) for v in f.readline().split())
        maxval = int(f.readline())
        raw = np.frombuffer(f.read(), dtype=">u2").reshape(h, w, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / maxval


def _write_pgm8(path: Path, lab: np.ndarray):
    h, w = lab.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(lab.astype(np.uint8).tobytes())


def _read_pgm8(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise DataError(f"{path}: not a binary PGM")
        w, h = (int(v) for v in f.readline().split())
        f.readline()
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(h, w).copy()


def save_dataset(ds: Dataset, root: Path):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "config": vars(ds.config),
                "n_sequences": len(ds),
                "velocities": [s.velocities for s in ds.sequences]}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for i, seq in enumerate(ds.sequences):
        d = root / f"seq_{i:04d}"
        d.mkdir(exist_ok=True)
        for t, (img, lab) in enumerate(zip(seq.frames, seq.labels)):
            _write_ppm16(d / f"frame_{t:03d}.ppm", img)
            _write_pgm8(d / f"label_{t:03d}.pgm", lab)


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest at {root}")
    manifest = json.loads(manifest_path.read_text())
    cfg = DatasetConfig(**manifest["config"])
    sequences = []
    for i in range(manifest["n_sequences"]):
        d = root / f"seq_{i:04d}"
        frames, labels = [], []
        for t in range(cfg.seq_len):
            frames.append(_read_ppm16(d / f"frame_{t:03d}.ppm"))
            labels.append(_read_pgm8(d / f"label_{t:03d}.pgm"))
        sequences.append(Sequence(
            frames=frames, labels=labels,
            velocities=[tuple(v) for v in manifest["velocities"][i]]))
    return Dataset(config=cfg, sequences=sequences)
