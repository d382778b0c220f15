"""Procedural fruit-grading scenes with analytic labels and damage boxes.

Classes: 0 unripe (hue < 0.4, unblemished), 1 ripe (hue >= 0.4, unblemished),
2 defective (at least one blemish). Each blemish is a dark rotated ellipse
fully inside the fruit disk, and at most one blemish centre falls in any
detector grid cell.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParameterError
from .models import Detection

CLASS_NAMES = ("unripe", "ripe", "defective")
UNRIPE, RIPE, DEFECTIVE = 0, 1, 2
DAMAGE = 0
HUE_SPLIT = 0.4
MIN_AXIS, MAX_AXIS = 2.0, 6.0
DETECTOR_GRID = 8

_GREEN = np.array([0.35, 0.68, 0.12])
_RED = np.array([0.78, 0.10, 0.08])
_BACKGROUND = np.array([0.86, 0.84, 0.78])
_BLEMISH = np.array([0.10, 0.07, 0.04])


@dataclass
class Blemish:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    darkness: float

    def bounding_box(self) -> tuple[float, float, float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        hw = math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2)
        hh = math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = xs - self.cx, ys - self.cy
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v <= 1.0


@dataclass
class SceneParams:
    dataset_seed: int
    index: int
    image_size: int
    hue: float
    fruit: tuple[float, float, float]
    blemishes: list[Blemish]
    noise: float
    balance: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])

    @property
    def blemish_count(self) -> int:
        return len(self.blemishes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        d = dict(d)
        d["fruit"] = tuple(d["fruit"])
        d["blemishes"] = [Blemish(**b) for b in d["blemishes"]]
        return cls(**d)


def label_of(params: SceneParams) -> int:
    if params.blemish_count >= 1:
        return DEFECTIVE
    return UNRIPE if params.hue < HUE_SPLIT else RIPE


def boxes_of(params: SceneParams) -> list[Detection]:
    return [Detection(DAMAGE, b.bounding_box(), 1.0) for b in params.blemishes]


@dataclass
class Sample:
    image: np.ndarray
    label: int
    boxes: list[Detection]
    params: SceneParams | None
    split: str = "train"
    synthetic: bool = False
    provenance: dict = field(default_factory=dict)


def _sample_params(seed: int, index: int, label: int, image_size: int, balance) -> SceneParams:
    rng = np.random.default_rng([seed, index])
    scale = image_size / 64.0
    r = rng.uniform(20.0, 26.0) * scale
    fx = image_size / 2 + rng.uniform(-4, 4) * scale
    fy = image_size / 2 + rng.uniform(-4, 4) * scale
    noise = float(rng.uniform(0.01, 0.06))
    if label == UNRIPE:
        hue = rng.uniform(0.0, 0.33)
    elif label == RIPE:
        hue = rng.uniform(0.47, 1.0)
    else:
        hue = rng.uniform(0.0, 1.0)
    blemishes: list[Blemish] = []
    if label == DEFECTIVE:
        count = int(rng.integers(1, 4))
        cell = image_size / DETECTOR_GRID
        cells = set()
        while len(blemishes) < count:
            a = rng.uniform(MIN_AXIS + 1.0, MAX_AXIS) * scale
            b = rng.uniform(MIN_AXIS, a)
            theta = rng.uniform(0, math.pi)
            rad = rng.uniform(0, r - a - 1.5 * scale)
            ang = rng.uniform(0, 2 * math.pi)
            cx, cy = fx + rad * math.cos(ang), fy + rad * math.sin(ang)
            key = (int(cy // cell), int(cx // cell))
            if key in cells:
                continue
            if any(math.hypot(cx - o.cx, cy - o.cy) <= a + o.a + 1 for o in blemishes):
                continue
            cells.add(key)
            blemishes.append(Blemish(cx, cy, a, b, theta, float(rng.uniform(0.7, 0.95))))
    return SceneParams(seed, index, image_size, float(hue), (fx, fy, r), blemishes, noise, list(balance))


def render(params: SceneParams) -> np.ndarray:
    """[3, H, W] image in [0, 1], quantised to 8-bit levels."""
    size = params.image_size
    rng = np.random.default_rng([params.dataset_seed, params.index, 1])
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    fx, fy, r = params.fruit
    d2 = ((xs - fx) ** 2 + (ys - fy) ** 2) / r**2
    inside = d2 <= 1.0
    colour = (1 - params.hue) * _GREEN + params.hue * _RED
    shade = 1.0 - 0.25 * d2
    img = np.empty((size, size, 3))
    img[:] = _BACKGROUND
    img[inside] = colour * shade[inside, None]
    highlight = np.exp(-(((xs - fx + 0.35 * r) ** 2 + (ys - fy + 0.35 * r) ** 2) / (0.18 * r) ** 2))
    img += (0.25 * highlight * inside)[..., None]
    for bl in params.blemishes:
        spot = bl.contains(xs, ys)
        img[spot] = img[spot] * (1 - bl.darkness) + bl.darkness * _BLEMISH
    img += rng.uniform(-params.noise, params.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0
    return img.transpose(2, 0, 1).copy()


def generate_sample(seed: int, index: int, label: int, image_size: int = 64, balance=(1 / 3, 1 / 3, 1 / 3)) -> Sample:
    params = _sample_params(seed, index, label, image_size, balance)
    return Sample(
        render(params), label_of(params), boxes_of(params), params,
        provenance={"dataset_seed": seed, "index": index},
    )


def allocate_labels(n: int, balance, seed: int) -> np.ndarray:
    """Largest-remainder class counts, shuffled with ``seed``."""
    balance = np.asarray(balance, dtype=np.float64)
    raw = balance * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    labels = np.repeat(np.arange(len(balance)), counts)
    return np.random.default_rng([seed, 0xC1A55]).permutation(labels)


def split_of(n: int, seed: int) -> list[str]:
    """Seeded shuffle; every fourth shuffled position goes to the test split."""
    order = np.random.default_rng([seed, 0x5B117]).permutation(n)
    split = ["train"] * n
    for pos, idx in enumerate(order):
        if pos % 4 == 3:
            split[idx] = "test"
    return split


def _check_balance(balance) -> list[float]:
    balance = [float(b) for b in balance]
    if len(balance) != len(CLASS_NAMES) or any(b < 0 for b in balance) or abs(sum(balance) - 1) > 1e-6:
        raise ParameterError(f"balance must be {len(CLASS_NAMES)} nonnegative weights summing to 1, got {balance}")
    return balance


class Dataset:
    def __init__(self, samples: list[Sample], n: int, balance, seed: int, image_size: int = 64, audit=None):
        self.samples = samples
        self.n = n
        self.balance = list(balance)
        self.seed = seed
        self.image_size = image_size
        self.audit = list(audit or [])

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str, include_synthetic: bool = True) -> list[Sample]:
        return [s for s in self.samples if s.split == name and (include_synthetic or not s.synthetic)]

    def arrays(self, name: str, include_synthetic: bool = True):
        """(images [N,3,H,W], labels [N], boxes list) of a split."""
        chosen = self.split(name, include_synthetic)
        if not chosen:
            return np.zeros((0, 3, self.image_size, self.image_size)), np.zeros(0, dtype=int), []
        images = np.stack([s.image for s in chosen])
        labels = np.array([s.label for s in chosen], dtype=int)
        return images, labels, [list(s.boxes) for s in chosen]

    def class_counts(self) -> list[int]:
        counts = [0] * len(CLASS_NAMES)
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def manifest(self) -> dict:
        entries = []
        for i, s in enumerate(self.samples):
            entries.append({
                "file": f"img_{i:05d}.ppm",
                "class": int(s.label),
                "boxes": [list(b.box) for b in s.boxes],
                "split": s.split,
                "synthetic": bool(s.synthetic),
                "seed": s.provenance,
                "params": s.params.to_dict() if s.params is not None else None,
            })
        return {
            "format": 1,
            "n": self.n,
            "balance": self.balance,
            "seed": self.seed,
            "image_size": self.image_size,
            "class_names": list(CLASS_NAMES),
            "samples": entries,
            "audit": self.audit,
        }

    def save(self, directory, force: bool = False, only_new_from: int = 0) -> Path:
        directory = Path(directory)
        if directory.exists() and any(directory.iterdir()) and not force and only_new_from == 0:
            raise ConfigError(f"{directory} exists and is not empty (use --force)")
        directory.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(self.samples[only_new_from:], start=only_new_from):
            write_ppm(directory / f"img_{i:05d}.ppm", s.image)
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=1))
        return directory

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise ConfigError(f"{directory} has no manifest.json")
        meta = json.loads(path.read_text())
        samples = []
        for entry in meta["samples"]:
            params = SceneParams.from_dict(entry["params"]) if entry["params"] else None
            samples.append(Sample(
                read_ppm(directory / entry["file"]),
                int(entry["class"]),
                [Detection(DAMAGE, tuple(b), 1.0) for b in entry["boxes"]],
                params,
                entry["split"],
                bool(entry["synthetic"]),
                dict(entry["seed"]),
            ))
        return cls(samples, meta["n"], meta["balance"], meta["seed"], meta["image_size"], meta.get("audit"))


def generate_dataset(n: int, balance=(1 / 3, 1 / 3, 1 / 3), seed: int = 1, image_size: int = 64) -> Dataset:
    """Deterministic dataset of ``n`` scenes with a 75/25 train/test split."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    balance = _check_balance(balance)
    labels = allocate_labels(n, balance, seed)
    splits = split_of(n, seed)
    samples = []
    for i, label in enumerate(labels):
        s = generate_sample(seed, i, int(label), image_size, balance)
        s.split = splits[i]
        samples.append(s)
    return Dataset(samples, n, balance, seed, image_size)


def manifest_hash(directory) -> str:
    return hashlib.sha256((Path(directory) / "manifest.json").read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# binary portable pixmaps


def write_ppm(path, image: np.ndarray) -> None:
    """[3, H, W] floats in [0, 1] -> 8-bit P6 file."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a [3, H, W] image, got {img.shape}")
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while blob[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError(f"{path}: only 8-bit P6 pixmaps are supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1) / 255.0


BOX_COLOUR = np.array([1.0, 1.0, 0.0])


def box_pixels(box, size: int) -> tuple[int, int, int, int]:
    """Integer (x0, y0, x1, y1) pixel rectangle, inclusive, clipped to the image."""
    x0, y0, x1, y1 = box
    clip = lambda v: int(min(max(math.floor(v), 0), size - 1))
    return clip(x0), clip(y0), clip(x1 - 1e-9), clip(y1 - 1e-9)


def draw_boxes(image: np.ndarray, detections, colour=BOX_COLOUR) -> np.ndarray:
    """Copy of a [3, H, W] image with a one-pixel outline per detection."""
    out = np.array(image, dtype=np.float64, copy=True)
    size = out.shape[-1]
    colour = np.asarray(colour, dtype=np.float64)[:, None]
    for det in detections:
        x0, y0, x1, y1 = box_pixels(det.box, size)
        out[:, y0, x0 : x1 + 1] = colour
        out[:, y1, x0 : x1 + 1] = colour
        out[:, y0 : y1 + 1, x0] = colour
        out[:, y0 : y1 + 1, x1] = colour
    return out
