"""Procedural road scenes with void/road/lanes/curb masks, and a PPM/PGM loader."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import GeometryError, Tensor

VOID, ROAD, LANES, CURB = 0, 1, 2, 3
CLASS_NAMES = ("void", "road", "lanes", "curb")

ROAD_SHARE = (0.30, 0.70)
MAX_THIN_SHARE = 0.05


class IngestionError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class SegSample:
    image: Tensor  # (1, 3, h, w) in [0, 1]
    mask: np.ndarray  # (h, w) uint8 labels
    sample_id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != (1, 3) or self.image.shape[2:] != self.mask.shape:
            raise IngestionError(f"image {self.image.shape} and mask {self.mask.shape} disagree")
        if not np.all(np.isfinite(self.image.data)):
            raise IngestionError("image contains non-finite values")


def class_shares(mask: np.ndarray, num_classes: int = 4) -> np.ndarray:
    return np.bincount(mask.ravel(), minlength=num_classes) / mask.size


def _within_envelope(mask: np.ndarray) -> bool:
    s = class_shares(mask)
    return (ROAD_SHARE[0] <= s[ROAD] <= ROAD_SHARE[1] and s[LANES] <= MAX_THIN_SHARE
            and s[CURB] <= MAX_THIN_SHARE and np.count_nonzero(s) >= 2)


@dataclass(frozen=True)
class SceneParams:
    """Ranges the scene generator samples from; fractions are of h or w."""

    horizon: tuple[float, float] = (0.30, 0.45)
    vanish_x: tuple[float, float] = (0.35, 0.65)
    top_half_width: tuple[float, float] = (0.06, 0.18)
    bottom_left: tuple[float, float] = (-0.15, 0.15)
    bottom_right: tuple[float, float] = (0.85, 1.15)
    curb_px: tuple[int, int] = (1, 2)  # widest point, inclusive
    lane_px: tuple[int, int] = (2, 3)
    lanes: tuple[int, int] = (1, 3)
    lane_jitter: float = 0.04  # of road width, around evenly spaced positions
    taper: bool = True  # thin structures narrow to 1 px at the horizon
    noise: float = 0.04
    brightness: tuple[float, float] = (0.6, 1.25)

    def __post_init__(self):
        if not (1 <= self.curb_px[0] <= self.curb_px[1] <= 2):
            raise ValueError(f"curb width must lie in 1..2 px, got {self.curb_px}")
        if not (1 <= self.lane_px[0] <= self.lane_px[1] <= 3):
            raise ValueError(f"lane width must lie in 1..3 px, got {self.lane_px}")
        if not (1 <= self.lanes[0] <= self.lanes[1] <= 3):
            raise ValueError(f"lane count must lie in 1..3, got {self.lanes}")


DEFAULT_SCENE = SceneParams()


def _draw_mask(rng: np.random.Generator, h: int, w: int, sp: SceneParams = DEFAULT_SCENE) -> np.ndarray:
    horizon = rng.uniform(*sp.horizon) * h
    vx = rng.uniform(*sp.vanish_x) * w
    top_half = rng.uniform(*sp.top_half_width) * w
    bottom_left = rng.uniform(*sp.bottom_left) * w
    bottom_right = rng.uniform(*sp.bottom_right) * w
    curb_px = rng.integers(sp.curb_px[0], sp.curb_px[1] + 1)
    n_lanes = rng.integers(sp.lanes[0], sp.lanes[1] + 1)
    lane_px = rng.integers(sp.lane_px[0], sp.lane_px[1] + 1)
    spots = (np.arange(1, n_lanes + 1) / (n_lanes + 1)) + rng.uniform(-sp.lane_jitter, sp.lane_jitter, n_lanes)

    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    t = np.clip((ys - horizon) / (h - horizon), 0.0, 1.0)[:, None]
    below = (ys >= horizon)[:, None]
    left = (vx - top_half) + t * (bottom_left - (vx - top_half))
    right = (vx + top_half) + t * (bottom_right - (vx + top_half))
    mask = np.zeros((h, w), np.uint8)
    road = below & (xs >= left) & (xs < right)
    mask[road] = ROAD

    curb_w = 1 + np.round(t * (curb_px - 1)) if sp.taper else np.full_like(t, curb_px)
    curb = below & (((xs >= left - curb_w) & (xs < left)) | ((xs >= right) & (xs < right + curb_w)))
    mask[curb] = CURB

    lane_w = 1 + np.round(t * (lane_px - 1)) if sp.taper else np.full_like(t, lane_px)
    for f in spots:
        centre = left + f * (right - left)
        lane = road & (np.abs(xs - centre) < lane_w / 2)
        # guarantee at least the nearest pixel per row
        nearest = np.abs(xs - centre) <= np.min(np.abs(xs - centre), axis=1, keepdims=True)
        lane |= road & nearest
        mask[lane] = LANES
    return mask


_BASE_COLORS = {
    ROAD: (0.42, 0.42, 0.44),
    LANES: (0.95, 0.93, 0.85),
    CURB: (0.80, 0.30, 0.25),
}


def _render(rng: np.random.Generator, mask: np.ndarray, sp: SceneParams = DEFAULT_SCENE) -> np.ndarray:
    h, w = mask.shape
    img = np.empty((3, h, w))
    rows = np.linspace(0, 1, h)[:, None]
    sky = np.stack([0.55 + 0.2 * rows, 0.65 + 0.15 * rows, 0.85 + 0.0 * rows])
    ground = np.array([0.30, 0.42, 0.22])[:, None, None] + 0.08 * rng.standard_normal((3, h, w))
    horizon_row = np.argmax((mask != VOID).any(axis=1)) if (mask != VOID).any() else h
    img[:] = np.where(np.arange(h)[None, :, None] < horizon_row, np.broadcast_to(sky, (3, h, w)), ground)
    for label, rgb in _BASE_COLORS.items():
        sel = mask == label
        img[:, sel] = np.asarray(rgb)[:, None]
    img += sp.noise * rng.standard_normal(img.shape)
    img *= rng.uniform(*sp.brightness)  # global lighting
    return np.clip(img, 0.0, 1.0)


def generate_scene(seed: int, h: int = 48, w: int = 160, params: SceneParams = DEFAULT_SCENE) -> SegSample:
    """Deterministic in (seed, h, w). Geometry is redrawn until class shares
    fall inside the envelope (road 30-70%, lanes and curb at most 5% each)."""
    if h % 16 or w % 16:
        raise GeometryError(f"scene size {h}x{w} must be divisible by 16")
    rng = np.random.default_rng([seed, h, w])
    for _ in range(1000):
        mask = _draw_mask(rng, h, w, params)
        if _within_envelope(mask):
            break
    else:
        raise RuntimeError(f"seed {seed}: no scene inside the class-share envelope at {h}x{w}")
    img = _render(rng, mask, params)
    return SegSample(Tensor(img[None]), mask, sample_id=f"gen:{seed}")


@dataclass
class DatasetSplit:
    train: list[SegSample]
    val: list[SegSample]
    test: list[SegSample]
    seed: int = 0
    resolution: tuple[int, int] = (48, 160)
    ids: dict[str, list[str]] = field(default_factory=dict)


def make_split(n_train: int, n_val: int, n_test: int, seed: int = 0, h: int = 48, w: int = 160,
               lazy: bool = False, params: SceneParams = DEFAULT_SCENE) -> DatasetSplit:
    """Sample ``i`` of the concatenated split uses scene seed ``seed * 1_000_003 + i``.

    With ``lazy`` only the ids are recorded (for full-size split counts).
    """
    for n in (n_train, n_val, n_test):
        if n < 1:
            raise ValueError("split sizes must be >= 1")
    seeds = [seed * 1_000_003 + i for i in range(n_train + n_val + n_test)]
    parts = {"train": seeds[:n_train], "val": seeds[n_train:n_train + n_val], "test": seeds[n_train + n_val:]}
    ids = {k: [f"gen:{s}" for s in v] for k, v in parts.items()}
    if lazy:
        return DatasetSplit([], [], [], seed, (h, w), ids)
    made = {k: [generate_scene(s, h, w, params) for s in v] for k, v in parts.items()}
    return DatasetSplit(made["train"], made["val"], made["test"], seed, (h, w), ids)


# ---------------------------------------------------------------------------
# netpbm I/O


def _read_netpbm(path: Path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise IngestionError(f"{path}: expected {magic.decode()} file, found {raw[:2]!r}")
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        while raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while raw[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while raw[j:j + 1].isdigit():
            j += 1
        if j == i:
            raise IngestionError(f"{path}: malformed header")
        fields.append(int(raw[i:j]))
        i = j
    i += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if maxval > 255:
        raise IngestionError(f"{path}: maxval {maxval} > 255 is not supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw[i:i + width * height * channels], np.uint8)
    if data.size != width * height * channels:
        raise IngestionError(f"{path}: truncated raster")
    return data.reshape(height, width, channels), maxval


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is (3, h, w) in [0, 1]."""
    h, w = image.shape[1:]
    px = np.clip(np.round(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + mask.astype(np.uint8).tobytes())


def load_pair(image_path, mask_path, num_classes: int = 4) -> SegSample:
    img, maxval = _read_netpbm(image_path, b"P6")
    mask, _ = _read_netpbm(mask_path, b"P5")
    mask = mask[..., 0]
    if img.shape[:2] != mask.shape:
        raise IngestionError(f"image is {img.shape[1]}x{img.shape[0]}, mask is {mask.shape[1]}x{mask.shape[0]}")
    bad = np.argwhere(mask >= num_classes)
    if bad.size:
        r, c = bad[0]
        raise LabelError(f"label {mask[r, c]} >= num_classes={num_classes} at (row {r}, col {c}); "
                         f"{len(bad)} offending pixels")
    image = img.transpose(2, 0, 1).astype(np.float64) / maxval
    return SegSample(Tensor(image[None]), mask.copy(), sample_id=str(image_path))


def read_manifest(path, num_classes: int = 4) -> list[SegSample]:
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        img, msk = line.split("\t")
        out.append(load_pair(base / img, base / msk, num_classes))
    return out


def write_samples(samples, out_dir, prefix: str = "sample") -> Path:
    """Write PPM/PGM pairs plus a manifest of relative paths; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img, msk = f"{prefix}_{i:05d}.ppm", f"{prefix}_{i:05d}_mask.pgm"
        write_ppm(out_dir / img, s.image.data[0])
        write_pgm(out_dir / msk, s.mask)
        lines.append(f"{img}\t{msk}")
    manifest = out_dir / f"{prefix}_manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
