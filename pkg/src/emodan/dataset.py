"""Emotion label scales, on-disk dataset format and the synthetic face generator.

A dataset directory holds ``images/<id>.pgm`` (8-bit binary PGM, 64x64) and
``annotations.csv`` with header ``id,label,x0,y0,...,x67,y67``. Faces are
expected pre-cropped; no detection is performed here.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kvconfig
from .geometry import N_LANDMARKS, interpupil_distance

IMAGE_SIZE = 64
ANNOTATION_FILE = "annotations.csv"
IMAGE_DIR = "images"
HEADER = ["id", "label"] + [f"{c}{i}" for i in range(N_LANDMARKS) for c in "xy"]


class DatasetError(ValueError):
    pass


class EmotionLabel7(enum.IntEnum):
    HAPPY = 0
    SAD = 1
    ANGRY = 2
    SURPRISED = 3
    DISGUST = 4
    FEAR = 5
    NEUTRAL = 6


class EmotionLabel3(enum.IntEnum):
    POSITIVE = 0
    NEGATIVE = 1
    NEUTRAL = 2


CLASS_NAMES_7 = [e.name.lower() for e in EmotionLabel7]
CLASS_NAMES_3 = [e.name.lower() for e in EmotionLabel3]

# happy, surprised -> positive; sad, angry, disgust, fear -> negative
DEFAULT_LABEL_MAP_3 = (0, 1, 1, 0, 1, 1, 2)


def parse_label_map(text: str | None) -> tuple[int, ...]:
    """Parse a 7-digit code such as ``0110112`` (index = 7-class label)."""
    if text is None or text == "" or text == "default":
        return DEFAULT_LABEL_MAP_3
    digits = text.replace(",", "").strip()
    if len(digits) != 7 or any(c not in "012" for c in digits):
        raise DatasetError(f"label map must be 7 digits in 0-2 (e.g. 0110112); got {text!r}")
    return tuple(int(c) for c in digits)


def label_map_code(label_map: Sequence[int]) -> str:
    return "".join(str(int(v)) for v in label_map)


def remap_7_to_3(label, label_map: Sequence[int] = DEFAULT_LABEL_MAP_3):
    """Coarsen 7-class labels (scalar or array) to the 3-class scale."""
    lut = np.asarray(label_map, dtype=np.int64)
    if np.isscalar(label) or isinstance(label, enum.IntEnum):
        return EmotionLabel3(int(lut[int(EmotionLabel7(int(label)))]))
    arr = np.asarray(label, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= 7):
        raise DatasetError("7-class labels must lie in [0, 7)")
    return lut[arr]


@dataclass
class Sample:
    image: np.ndarray  # uint8 (64, 64)
    shape: np.ndarray  # (68, 2) image-frame pixels
    label: int
    id: str


# ---------------------------------------------------------------------------
# PGM / CSV io


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise DatasetError(f"PGM writer expects a 2-D uint8 image; got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_dataset(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    with open(root / ANNOTATION_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for s in samples:
            write_pgm(root / IMAGE_DIR / f"{s.id}.pgm", s.image)
            writer.writerow([s.id, int(s.label)] + [f"{v:.6f}" for v in np.asarray(s.shape).reshape(-1)])


def load_annotations(path) -> list[Sample]:
    """Load every sample of a dataset directory, in annotation-file order."""
    root = Path(path)
    ann = root / ANNOTATION_FILE
    if not ann.is_file():
        raise DatasetError(f"{ann}: annotation file not found")
    samples = []
    with open(ann, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            return []
        if header != HEADER:
            raise DatasetError(f"{ann}:1: unexpected header (want id,label,x0,y0,...,x67,y67)")
        for lineno, row in enumerate(rows, 2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise DatasetError(f"{ann}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
            sid = row[0]
            if not sid or "/" in sid or sid.startswith("."):
                raise DatasetError(f"{ann}:{lineno}: invalid sample id {sid!r}")
            try:
                label = int(row[1])
                coords = np.array([float(v) for v in row[2:]]).reshape(N_LANDMARKS, 2)
            except ValueError:
                raise DatasetError(f"{ann}:{lineno}: malformed number") from None
            if not 0 <= label < 7:
                raise DatasetError(f"{ann}:{lineno}: label {label} outside [0, 7)")
            if not np.all(np.isfinite(coords)) or coords.min() < 0 or coords.max() >= IMAGE_SIZE:
                raise DatasetError(f"{ann}:{lineno}: landmark coordinate outside [0, {IMAGE_SIZE})")
            img_path = root / IMAGE_DIR / f"{sid}.pgm"
            if not img_path.is_file():
                raise DatasetError(f"{ann}:{lineno}: missing image {img_path}")
            img = read_pgm(img_path)
            if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
                raise DatasetError(f"{img_path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {img.shape}")
            samples.append(Sample(img, coords, label, sid))
    return samples


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] [B,64,64], shapes [B,68,2], labels [B]."""
    images = np.stack([s.image for s in samples]).astype(np.float64) / 255.0
    shapes = np.stack([s.shape for s in samples]).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, shapes, labels


def split(samples: Sequence, fractions: Sequence[float], seed: int):
    """Seeded shuffle then contiguous (train, val, test) split."""
    if len(samples) == 0:
        raise DatasetError("cannot split an empty sample list")
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be 3 non-negative numbers summing to 1; got {list(fractions)}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    cuts = [int(round(c)) for c in np.cumsum(fr)[:2] * n]
    parts = np.split(order, cuts)
    return tuple([samples[i] for i in part] for part in parts)


# ---------------------------------------------------------------------------
# synthetic faces


@dataclass
class GenParams:
    """Synthetic generator settings (all magnitudes dimensionless, lengths in px)."""

    seed: int = 0
    count: int = 1000
    mouth_curve: float = 1.0   # happy corners up / sad corners down
    brow_raise: float = 1.0    # surprised, fear
    brow_furrow: float = 1.0   # angry, disgust
    eye_open: float = 1.0      # wide for surprised/fear, narrowed for angry/disgust
    mouth_open: float = 1.0    # surprised, fear
    lip_raise: float = 1.0     # disgust upper lip / nostrils
    jitter_sigma: float = 0.4
    rotation_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    translation: float = 3.0
    max_retries: int = 8

    def __post_init__(self):
        if self.count <= 0:
            raise DatasetError(f"count must be positive; got {self.count}")
        for name in ("mouth_curve", "brow_raise", "brow_furrow", "eye_open", "mouth_open", "lip_raise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1]; got {v}")
        if self.jitter_sigma < 0 or self.rotation_deg < 0 or self.translation < 0:
            raise DatasetError("jitter_sigma, rotation_deg and translation must be non-negative")
        if not 0 < self.scale_min <= self.scale_max:
            raise DatasetError(f"need 0 < scale_min <= scale_max; got {self.scale_min}, {self.scale_max}")
        if self.rotation_deg > 45 or self.scale_max > 1.25 or self.translation > 6:
            raise DatasetError("pose ranges too large to keep the face inside the 64x64 frame "
                               "(limits: rotation_deg <= 45, scale_max <= 1.25, translation <= 6)")
        if self.max_retries < 0:
            raise DatasetError("max_retries must be >= 0")

    @classmethod
    def from_file(cls, path, **overrides) -> "GenParams":
        values = kvconfig.read_kv(path)
        values.update({k: str(v) for k, v in overrides.items() if v is not None})
        return kvconfig.build(cls, values, str(path))


def template_shape() -> np.ndarray:
    """Neutral frontal 68-point face centred in the 64x64 frame."""
    s = np.zeros((N_LANDMARKS, 2))
    t = np.linspace(0.0, math.pi, 17)
    s[0:17] = np.stack([32 - 20 * np.cos(t), 28 + 26 * np.sin(t)], axis=1)
    arch = [20.0, 18.6, 18.0, 18.6, 20.0]
    s[17:22] = np.stack([np.linspace(15, 28, 5), arch], axis=1)
    s[22:27] = np.stack([np.linspace(36, 49, 5), arch], axis=1)
    s[27:31] = np.stack([np.full(4, 32.0), np.linspace(24, 36, 4)], axis=1)
    s[31:36] = np.stack([np.linspace(27, 37, 5), [38.5, 39.5, 40.0, 39.5, 38.5]], axis=1)
    eye = np.array([[-4.5, 0.0], [-1.5, -1.8], [1.5, -1.8], [4.5, 0.0], [1.5, 1.8], [-1.5, 1.8]])
    s[36:42] = eye + [22.0, 26.0]
    s[42:48] = eye + [42.0, 26.0]
    s[48:60] = [[24, 46], [26.5, 44.5], [29.5, 43.5], [32, 44], [34.5, 43.5], [37.5, 44.5],
                [40, 46], [37.5, 48.5], [34.5, 49.5], [32, 50], [29.5, 49.5], [26.5, 48.5]]
    s[60:68] = [[25.5, 46], [29, 45.3], [32, 45.5], [35, 45.3], [38.5, 46], [35, 46.7],
                [32, 46.5], [29, 46.7]]
    return s


BROWS = np.r_[17:27]
INNER_BROW = np.array([20, 21, 22, 23])
EYE_TOP = np.array([37, 38, 43, 44])
EYE_BOTTOM = np.array([40, 41, 46, 47])
MOUTH_CORNERS = np.array([48, 54, 60, 64])
MOUTH_NEAR_CORNERS = np.array([49, 53, 55, 59, 61, 63, 65, 67])
UPPER_LIP = np.array([49, 50, 51, 52, 53, 61, 62, 63])
LOWER_LIP = np.array([55, 56, 57, 58, 59, 65, 66, 67])
NOSTRILS = np.r_[31:36]


def _spread_from_center(s: np.ndarray, idx: np.ndarray, amount: float) -> None:
    """Move points horizontally away from the face midline by ``amount`` px."""
    s[idx, 0] += amount * np.sign(s[idx, 0] - 32.0)


def deform(shape: np.ndarray, label: int, p: GenParams) -> np.ndarray:
    """Apply the expression for ``label`` to a frontal (un-posed) shape."""
    s = shape.copy()
    e = EmotionLabel7(label)
    if e is EmotionLabel7.HAPPY:
        s[MOUTH_CORNERS, 1] -= 3.0 * p.mouth_curve
        s[MOUTH_NEAR_CORNERS, 1] -= 1.5 * p.mouth_curve
        _spread_from_center(s, MOUTH_CORNERS, 1.0 * p.mouth_curve)
    elif e is EmotionLabel7.SAD:
        s[MOUTH_CORNERS, 1] += 3.0 * p.mouth_curve
        s[MOUTH_NEAR_CORNERS, 1] += 1.5 * p.mouth_curve
        _spread_from_center(s, MOUTH_CORNERS, -1.0 * p.mouth_curve)
        s[INNER_BROW, 1] -= 1.0 * p.brow_raise
    elif e is EmotionLabel7.ANGRY:
        s[BROWS, 1] += 2.5 * p.brow_furrow
        s[INNER_BROW, 1] += 2.0 * p.brow_furrow
        _spread_from_center(s, INNER_BROW, -1.5 * p.brow_furrow)
        s[EYE_TOP, 1] += 0.8 * p.eye_open
    elif e is EmotionLabel7.SURPRISED:
        s[BROWS, 1] -= 3.5 * p.brow_raise
        s[EYE_TOP, 1] -= 1.5 * p.eye_open
        s[EYE_BOTTOM, 1] += 1.0 * p.eye_open
        s[LOWER_LIP, 1] += 5.0 * p.mouth_open
        s[[61, 62, 63], 1] -= 0.5 * p.mouth_open
        _spread_from_center(s, MOUTH_CORNERS, -1.0 * p.mouth_open)
    elif e is EmotionLabel7.DISGUST:
        s[BROWS, 1] += 1.5 * p.brow_furrow
        s[UPPER_LIP, 1] -= 2.0 * p.lip_raise
        s[NOSTRILS, 1] -= 1.5 * p.lip_raise
        s[EYE_TOP, 1] += 0.8 * p.eye_open
        s[EYE_BOTTOM, 1] -= 0.5 * p.eye_open
    elif e is EmotionLabel7.FEAR:
        s[BROWS, 1] -= 2.5 * p.brow_raise
        s[INNER_BROW, 1] -= 1.0 * p.brow_raise
        _spread_from_center(s, INNER_BROW, -1.5 * p.brow_raise)
        s[EYE_TOP, 1] -= 1.5 * p.eye_open
        s[EYE_BOTTOM, 1] += 0.5 * p.eye_open
        s[LOWER_LIP, 1] += 2.5 * p.mouth_open
        _spread_from_center(s, MOUTH_CORNERS, 1.5 * p.mouth_open)
    return s


def pose_transform(rng: np.random.Generator, p: GenParams, damping: float):
    theta = math.radians(rng.uniform(-p.rotation_deg, p.rotation_deg) * damping)
    scale = 1.0 + (rng.uniform(p.scale_min, p.scale_max) - 1.0) * damping
    t = rng.uniform(-p.translation, p.translation, size=2) * damping
    c = IMAGE_SIZE / 2.0
    a, b = scale * math.cos(theta), scale * math.sin(theta)
    # rotate/scale about the frame centre, then translate
    return np.array([a, b, c - (a * c - b * c) + t[0], c - (b * c + a * c) + t[1]])


def _in_frame(s: np.ndarray, margin: float = 0.5) -> bool:
    return bool(s.min() >= margin and s.max() <= IMAGE_SIZE - 1 - margin)


# --- rasterization -----------------------------------------------------------

_SS = 4
_SUB = (np.arange(_SS) + 0.5) / _SS - 0.5


def _polygon_coverage(poly: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Anti-aliased fill (4x4 supersampled even-odd rule)."""
    cov = np.zeros((size, size))
    x0 = max(int(math.floor(poly[:, 0].min())) - 1, 0)
    x1 = min(int(math.ceil(poly[:, 0].max())) + 2, size)
    y0 = max(int(math.floor(poly[:, 1].min())) - 1, 0)
    y1 = min(int(math.ceil(poly[:, 1].max())) + 2, size)
    if x0 >= x1 or y0 >= y1:
        return cov
    px = (np.arange(x0, x1)[:, None] + _SUB[None, :]).reshape(-1)
    py = (np.arange(y0, y1)[:, None] + _SUB[None, :]).reshape(-1)
    X, Y = np.meshgrid(px, py)
    inside = np.zeros(X.shape, dtype=bool)
    q = np.roll(poly, -1, axis=0)
    for (ax, ay), (bx, by) in zip(poly, q):
        if ay == by:
            continue
        crosses = (ay > Y) != (by > Y)
        xint = ax + (Y - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (X < xint)
    h, w = y1 - y0, x1 - x0
    cov[y0:y1, x0:x1] = inside.reshape(h, _SS, w, _SS).mean(axis=(1, 3))
    return cov


def _polyline_coverage(pts: np.ndarray, width: float, closed: bool = False,
                       size: int = IMAGE_SIZE) -> np.ndarray:
    """Anti-aliased stroke: coverage = clip(width/2 + 0.5 - distance, 0, 1)."""
    cov = np.zeros((size, size))
    pad = width / 2 + 1
    x0 = max(int(math.floor(pts[:, 0].min() - pad)), 0)
    x1 = min(int(math.ceil(pts[:, 0].max() + pad)) + 1, size)
    y0 = max(int(math.floor(pts[:, 1].min() - pad)), 0)
    y1 = min(int(math.ceil(pts[:, 1].max() + pad)) + 1, size)
    if x0 >= x1 or y0 >= y1:
        return cov
    Y, X = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    a = pts if not closed else pts
    b = np.roll(pts, -1, axis=0) if closed else pts[1:]
    a = a[: len(b)]
    dist = np.full(X.shape, np.inf)
    for (ax, ay), (bx, by) in zip(a, b):
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        if L2 > 0:
            t = np.clip(((X - ax) * dx + (Y - ay) * dy) / L2, 0.0, 1.0)
        else:
            t = 0.0
        ex, ey = X - (ax + t * dx), Y - (ay + t * dy)
        dist = np.minimum(dist, np.sqrt(ex * ex + ey * ey))
    cov[y0:y1, x0:x1] = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    return cov


def _ellipse_polygon(shape: np.ndarray, n: int = 48) -> np.ndarray:
    left, right, chin = shape[0], shape[16], shape[8]
    c = (left + right) / 2
    u = right - c
    a = float(np.hypot(*u))
    uh = u / a
    vh = np.array([-uh[1], uh[0]])
    if np.dot(chin - c, vh) < 0:
        vh = -vh
    b = float(abs(np.dot(chin - c, vh)))
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    return c + a * np.cos(t)[:, None] * uh + b * np.sin(t)[:, None] * vh


def render_face(shape: np.ndarray) -> np.ndarray:
    """Deterministic 8-bit grayscale rendering of a 68-point shape."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))

    def paint(cov, value):
        nonlocal img
        img = img * (1.0 - cov) + value * cov

    paint(_polygon_coverage(_ellipse_polygon(shape)), 0.55)
    paint(_polyline_coverage(shape[0:17], 1.0), 0.35)
    paint(_polygon_coverage(shape[36:42]), 0.95)
    paint(_polygon_coverage(shape[42:48]), 0.95)
    paint(_polyline_coverage(shape[36:42], 0.8, closed=True), 0.15)
    paint(_polyline_coverage(shape[42:48], 0.8, closed=True), 0.15)
    paint(_polyline_coverage(shape[17:22], 1.6), 0.1)
    paint(_polyline_coverage(shape[22:27], 1.6), 0.1)
    paint(_polyline_coverage(shape[27:31], 1.0), 0.3)
    paint(_polyline_coverage(shape[31:36], 1.0), 0.3)
    paint(_polygon_coverage(shape[48:60]), 0.3)
    paint(_polygon_coverage(shape[60:68]), 0.05)
    paint(_polyline_coverage(shape[48:60], 0.8, closed=True), 0.2)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def synthesize(params: GenParams, render: bool = True) -> list[Sample]:
    """Generate ``params.count`` samples in memory from a single seeded stream.

    With ``render=False`` images are left blank; labels and shapes are
    unchanged since rendering draws no randomness.
    """
    rng = np.random.default_rng(params.seed)
    base = template_shape()
    samples = []
    for i in range(params.count):
        label = int(rng.integers(0, 7))
        face = deform(base, label, params)
        if params.jitter_sigma > 0:
            face = face + rng.normal(scale=params.jitter_sigma, size=base.shape)
        damping = 1.0
        for attempt in range(params.max_retries + 1):
            pose = pose_transform(rng, params, damping)
            a, b, tx, ty = pose
            s = np.stack([a * face[:, 0] - b * face[:, 1] + tx, b * face[:, 0] + a * face[:, 1] + ty], axis=1)
            if _in_frame(s):
                break
            damping *= 0.5
        else:
            raise DatasetError(f"sample {i}: landmarks left the frame after {params.max_retries} retries")
        interpupil_distance(s)
        img = render_face(s) if render else np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        samples.append(Sample(img, s, label, f"{i:06d}"))
    return samples


def generate_synthetic(params: GenParams, out_dir, holdout: int = 0) -> list[Sample]:
    """Write ``params.count`` samples to ``out_dir``.

    With ``holdout > 0`` the same seeded stream is extended by that many
    samples: the first ``count`` go to ``out_dir/train`` and the rest to
    ``out_dir/test``.
    """
    if holdout < 0:
        raise DatasetError(f"holdout must be >= 0; got {holdout}")
    out = Path(out_dir)
    if holdout == 0:
        samples = synthesize(params)
        write_dataset(samples, out)
        (out / "genparams.txt").write_text(kvconfig.dump(params))
        return samples
    samples = synthesize(dataclasses.replace(params, count=params.count + holdout))
    write_dataset(samples[:params.count], out / "train")
    write_dataset(samples[params.count:], out / "test")
    (out / "genparams.txt").write_text(kvconfig.dump(params) + f"# holdout = {holdout}\n")
    return samples
