"""Residual CNN classifier/detector with optional attention in every block.

Layout: 3x3 stem conv + relu + 2x2 max-pool, then stages of basic residual
blocks (the first block of every stage after the first downsamples by 2).
Attention sits after the first convolution's activation inside each block.
The classifier head is global-average-pool + linear; the detector head is a
1x1 conv producing a G x G grid of B boxes (tx, ty, tw, th, objectness) and
K class logits per cell.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import MODES, AttentionBlock, attend
from .errors import ConfigError, DataError, DimensionError, SpecError
from .tensor import Tensor, no_grad

INPUT_OFFSET = 0.5
# initial objectness logit of detector heads; sigmoid(-4) ~ 0.018, near the share of occupied cells
OBJECTNESS_PRIOR = -4.0

ATTENTION_MODES = ("none",) + MODES


@dataclass
class ModelSpec:
    stem: int = 16
    stages: list = field(default_factory=lambda: [[16, 2], [32, 2], [64, 2]])
    attention: str = "cbam"
    reduction: int = 4
    head: str = "classifier"
    num_classes: int = 3
    grid: int = 8
    boxes_per_cell: int = 1
    image_size: int = 64
    in_channels: int = 3

    def __post_init__(self):
        self.stages = [[int(c), int(n)] for c, n in self.stages]
        self.validate()

    def validate(self) -> None:
        if self.stem < 1 or self.in_channels < 1:
            raise SpecError("stem and input channels must be positive")
        if not self.stages:
            raise SpecError("at least one residual stage is required")
        for channels, count in self.stages:
            if channels < 1 or count < 1:
                raise SpecError(f"invalid stage {[channels, count]}")
        if self.attention not in ATTENTION_MODES:
            raise SpecError(f"unknown attention mode {self.attention!r}")
        if self.attention != "none":
            for channels, _ in self.stages:
                if channels % self.reduction:
                    raise SpecError(f"stage width {channels} not divisible by reduction {self.reduction}")
        if self.head not in ("classifier", "detector"):
            raise SpecError(f"unknown head {self.head!r}")
        if self.num_classes < 1 or (self.head == "classifier" and self.num_classes < 2):
            raise SpecError(f"invalid class count {self.num_classes}")
        if self.image_size % (2 ** len(self.stages)):
            raise SpecError(f"image size {self.image_size} not divisible by {2 ** len(self.stages)}")
        if self.head == "detector" and self.grid != self.feature_size:
            raise SpecError(f"detector grid {self.grid} != final feature size {self.feature_size}")

    @property
    def feature_size(self) -> int:
        return self.image_size // 2 ** len(self.stages)

    @property
    def head_channels(self) -> int:
        if self.head == "classifier":
            return self.num_classes
        return self.boxes_per_cell * 5 + self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown model spec keys {sorted(unknown)}")
        return cls(**d)


def teacher_spec(**overrides) -> ModelSpec:
    return ModelSpec(**overrides)


def student_spec(**overrides) -> ModelSpec:
    base = dict(stem=8, stages=[[8, 1], [16, 1], [32, 1]])
    base.update(overrides)
    return ModelSpec(**base)


def _blocks(spec: ModelSpec):
    """Yield (name, in_channels, out_channels, stride) for each residual block."""
    cin = spec.stem
    for s, (channels, count) in enumerate(spec.stages):
        for b in range(count):
            stride = 2 if (s > 0 and b == 0) else 1
            yield f"stage{s}.block{b}", cin, channels, stride
            cin = channels


def _layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (name, shape, fan_in) of every parameter."""
    out = [("stem.w", (spec.stem, spec.in_channels, 3, 3), spec.in_channels * 9), ("stem.b", (spec.stem,), 0)]
    for name, cin, c, stride in _blocks(spec):
        out.append((f"{name}.conv1.w", (c, cin, 3, 3), cin * 9))
        out.append((f"{name}.conv1.b", (c,), 0))
        if spec.attention != "none":
            hidden = c // spec.reduction
            if spec.attention in ("channel", "cbam", "bam"):
                out.append((f"{name}.attn.w1", (c, hidden), c))
                out.append((f"{name}.attn.w2", (hidden, c), hidden))
            if spec.attention in ("spatial", "sam", "cbam", "bam"):
                out.append((f"{name}.attn.w1_s", (c, hidden), c))
                out.append((f"{name}.attn.w2_s", (hidden, 1), hidden))
        out.append((f"{name}.conv2.w", (c, c, 3, 3), c * 9))
        out.append((f"{name}.conv2.b", (c,), 0))
        if stride != 1 or cin != c:
            out.append((f"{name}.short.w", (c, cin, 1, 1), cin))
            out.append((f"{name}.short.b", (c,), 0))
    last = spec.stages[-1][0]
    if spec.head == "classifier":
        out.append(("head.w", (last, spec.num_classes), last))
        out.append(("head.b", (spec.num_classes,), 0))
    else:
        out.append(("head.w", (spec.head_channels, last, 1, 1), last))
        out.append(("head.b", (spec.head_channels,), 0))
    return out


def parameter_count(spec: ModelSpec) -> int:
    """Closed-form parameter count."""
    total = 9 * spec.in_channels * spec.stem + spec.stem
    for _, cin, c, stride in _blocks(spec):
        total += 9 * cin * c + c + 9 * c * c + c
        if stride != 1 or cin != c:
            total += cin * c + c
        hidden = c // spec.reduction if spec.attention != "none" else 0
        if spec.attention in ("channel", "cbam", "bam"):
            total += 2 * c * hidden
        if spec.attention in ("spatial", "sam", "cbam", "bam"):
            total += c * hidden + hidden
    last = spec.stages[-1][0]
    return total + last * spec.head_channels + spec.head_channels


class Model:
    """Parameters plus the spec that gives them meaning."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        expected = [(n, s) for n, s, _ in _layout(spec)]
        got = [(n, t.shape) for n, t in params.items()]
        if got != expected:
            raise SpecError("parameter set does not match the model spec")
        self.attention: dict[str, AttentionBlock] = {}
        if spec.attention != "none":
            for name, _, c, _ in _blocks(spec):
                kw = {k: params[f"{name}.attn.{k}"] for k in ("w1", "w2", "w1_s", "w2_s") if f"{name}.attn.{k}" in params}
                self.attention[name] = AttentionBlock(spec.attention, c, spec.reduction, **kw)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def sparsity(self) -> float:
        zeros = sum(int(np.count_nonzero(t.data == 0)) for t in self.params.values())
        return zeros / self.num_parameters()

    def requires_grad_(self, flag: bool = True) -> "Model":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def copy(self) -> "Model":
        params = {n: Tensor(t.data.copy()) for n, t in self.params.items()}
        return Model(copy.deepcopy(self.spec), params)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            t.data[...] = state[n]

    def forward(self, x) -> Tensor:
        """Raw head output: logits [N, K] or grid [N, B*5+K, G, G] (unbatched input drops N)."""
        x = T.as_tensor(x)
        spec, p = self.spec, self.params
        expected = (spec.in_channels, spec.image_size, spec.image_size)
        if x.shape[-3:] != expected or x.ndim not in (3, 4):
            raise DimensionError(f"expected image shape {expected} (optionally batched), got {x.shape}")
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        # pixels in [0, 1] are centred before the stem
        h = _conv(T.sub(x, INPUT_OFFSET), p["stem.w"], p["stem.b"], 1, 1)
        h = T.max_pool2d(T.relu(h), 2)
        for name, cin, c, stride in _blocks(spec):
            y = T.relu(_conv(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], stride, 1))
            if name in self.attention:
                y = attend(y, self.attention[name])
            y = _conv(y, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], 1, 1)
            if f"{name}.short.w" in p:
                shortcut = _conv(h, p[f"{name}.short.w"], p[f"{name}.short.b"], stride, 0)
            else:
                shortcut = h
            h = T.relu(T.add(y, shortcut))
        if spec.head == "classifier":
            out = T.add(T.matmul(T.global_avg_pool(h), p["head.w"]), p["head.b"])
        else:
            out = _conv(h, p["head.w"], p["head.b"], 1, 0)
        if single:
            out = T.reshape(out, out.shape[1:])
        return out


def _conv(x, w, b, stride, padding):
    y = T.conv2d(x, w, stride=stride, padding=padding)
    return T.add(y, T.reshape(b, (b.shape[0], 1, 1)))


def build(spec: ModelSpec, seed: int) -> Model:
    """Seeded model with uniform fan-in initialisation and zero biases.

    Weights are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)); the second conv of
    each residual branch and the head are scaled by 1/2 to keep activations
    bounded without normalisation layers. Detector heads start their objectness
    biases at ``OBJECTNESS_PRIOR`` so the many empty cells do not swamp the
    first updates.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in _layout(spec):
        if fan_in == 0:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in)
            if name.endswith("conv2.w") or name.startswith("head."):
                bound *= 0.5
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data)
    if spec.head == "detector":
        params["head.b"].data[4 : spec.boxes_per_cell * 5 : 5] = OBJECTNESS_PRIOR
    return Model(spec, params)


def forward_classify(model: Model, image) -> Tensor:
    if model.spec.head != "classifier":
        raise ConfigError("model has a detector head")
    return model.forward(image)


# ----------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: tuple[float, float, float, float]
    score: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise DataError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "box": list(self.box), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(int(d["class_id"]), tuple(float(v) for v in d["box"]), float(d.get("score", 1.0)))


def box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(detections: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a kept box by IoU > threshold."""
    order = sorted(detections, key=lambda d: -d.score)
    kept: list[Detection] = []
    for det in order:
        if all(k.class_id != det.class_id or box_iou(k.box, det.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def _cell_size(spec: ModelSpec) -> float:
    return spec.image_size / spec.grid


def decode_grid(grid: np.ndarray, spec: ModelSpec, score_threshold: float = 0.5,
                iou_threshold: float = 0.5) -> list[Detection]:
    """Turn one [B*5+K, G, G] head output into post-NMS detections.

    Box centre = (cell index + sigmoid offset) * cell size, width/height =
    cell size * exp(t), score = sigmoid(objectness) * max class probability.
    Boxes scoring strictly above ``score_threshold`` enter NMS.
    """
    grid = np.asarray(grid, dtype=np.float64)
    nb, k, g = spec.boxes_per_cell, spec.num_classes, spec.grid
    if grid.shape != (nb * 5 + k, g, g):
        raise DimensionError(f"grid shape {grid.shape} does not match {(nb * 5 + k, g, g)}")
    cell = _cell_size(spec)
    size = float(spec.image_size)
    logits = grid[nb * 5 :]
    probs = np.exp(logits - logits.max(axis=0))
    probs /= probs.sum(axis=0)
    cls = probs.argmax(axis=0)
    cls_p = probs.max(axis=0)
    found = []
    for b in range(nb):
        tx, ty, tw, th, to = grid[b * 5 : b * 5 + 5]
        score = _sig(to) * cls_p
        for gy, gx in zip(*np.nonzero(score > score_threshold)):
            cx = (gx + _sig(tx[gy, gx])) * cell
            cy = (gy + _sig(ty[gy, gx])) * cell
            w = cell * math.exp(min(float(tw[gy, gx]), 4.0))
            h = cell * math.exp(min(float(th[gy, gx]), 4.0))
            box = (max(cx - w / 2, 0.0), max(cy - h / 2, 0.0), min(cx + w / 2, size), min(cy + h / 2, size))
            found.append(Detection(int(cls[gy, gx]), box, float(score[gy, gx])))
    return nms(found, iou_threshold)


def predict_grids(model: Model, images, batch_size: int = 32) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model.forward(Tensor._wrap(images[i : i + batch_size], False)).data)
    return np.concatenate(outs)


def forward_detect(model: Model, image, score_threshold: float = 0.5, iou_threshold: float = 0.5):
    """Detections for one image [3, H, W], or a list of lists for a batch."""
    if model.spec.head != "detector":
        raise ConfigError("forward_detect needs a detector-head model")
    data = T.as_tensor(image).data
    with no_grad():
        grid = model.forward(Tensor._wrap(data, False)).data
    if data.ndim == 3:
        return decode_grid(grid, model.spec, score_threshold, iou_threshold)
    return [decode_grid(gr, model.spec, score_threshold, iou_threshold) for gr in grid]


def _targets(spec: ModelSpec, grid_data: np.ndarray, boxes: list[Detection]):
    nb, k, g = spec.boxes_per_cell, spec.num_classes, spec.grid
    cell = _cell_size(spec)
    size = spec.image_size
    obj = np.zeros((nb, g, g))
    tgt = np.zeros((nb, 4, g, g))
    cls = np.zeros((g, g, k))
    taken = set()
    for det in boxes:
        x0, y0, x1, y1 = det.box
        if x0 < 0 or y0 < 0 or x1 > size or y1 > size:
            raise DataError(f"ground-truth box {det.box} outside the {size}x{size} image")
        if not 0 <= det.class_id < k:
            raise DataError(f"ground-truth class {det.class_id} outside [0, {k})")
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        gx, gy = min(int(cx // cell), g - 1), min(int(cy // cell), g - 1)
        if (gy, gx) in taken:
            raise DataError(f"more than one ground-truth box centred in cell {(gy, gx)}")
        taken.add((gy, gx))
        best, best_iou = 0, -1.0
        for b in range(nb):
            tx, ty, tw, th = grid_data[b * 5 : b * 5 + 4, gy, gx]
            pcx, pcy = (gx + _sig(tx)) * cell, (gy + _sig(ty)) * cell
            pw, ph = cell * math.exp(min(tw, 4.0)), cell * math.exp(min(th, 4.0))
            iou = box_iou((pcx - pw / 2, pcy - ph / 2, pcx + pw / 2, pcy + ph / 2), det.box)
            if iou > best_iou:
                best, best_iou = b, iou
        obj[best, gy, gx] = 1.0
        tgt[best, :, gy, gx] = (cx / cell - gx, cy / cell - gy, math.log((x1 - x0) / cell), math.log((y1 - y0) / cell))
        cls[gy, gx, det.class_id] = 1.0
    return obj, tgt, cls


def detect_loss(grid_output, ground_truth, spec: ModelSpec) -> Tensor:
    """Squared-error box/objectness loss plus class cross-entropy, mean over images.

    ``grid_output`` is [B*5+K, G, G] with ``ground_truth`` a list of Detection,
    or batched [N, ...] with a list of such lists. A ground-truth box is owned by
    the cell containing its centre and, within it, by the predicted box of
    highest IoU.
    """
    grid_output = T.as_tensor(grid_output)
    if grid_output.ndim == 3:
        grid_output = T.reshape(grid_output, (1,) + grid_output.shape)
        ground_truth = [ground_truth]
    nb, k, g = spec.boxes_per_cell, spec.num_classes, spec.grid
    n = grid_output.shape[0]
    if grid_output.shape[1:] != (nb * 5 + k, g, g) or len(ground_truth) != n:
        raise DimensionError(f"grid {grid_output.shape} does not match spec / {len(ground_truth)} targets")
    obj = np.zeros((n, nb, g, g))
    tgt = np.zeros((n, nb, 4, g, g))
    cls = np.zeros((n, g, g, k))
    for i, boxes in enumerate(ground_truth):
        obj[i], tgt[i], cls[i] = _targets(spec, grid_output.data[i], boxes)
    boxes_t = T.reshape(grid_output[:, : nb * 5], (n, nb, 5, g, g))
    sig = T.sigmoid(boxes_t)
    mask4 = obj[:, :, None]
    xy = T.mul(T.square(T.sub(sig[:, :, 0:2], tgt[:, :, 0:2])), mask4)
    wh = T.mul(T.square(T.sub(boxes_t[:, :, 2:4], tgt[:, :, 2:4])), mask4)
    objectness = sig[:, :, 4]
    pos = T.mul(T.square(T.sub(objectness, 1.0)), obj)
    neg = T.mul(T.square(objectness), 1.0 - obj)
    class_logits = T.transpose(grid_output[:, nb * 5 :], (0, 2, 3, 1))
    ce = T.mul(T.log_softmax(class_logits), cls)
    total = T.sub(
        T.add(T.add(T.tsum(xy), T.tsum(wh)), T.add(T.tsum(pos), T.tsum(neg))),
        T.tsum(ce),
    )
    return T.mul(total, 1.0 / n)


# ----------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, directory, extra: dict | None = None) -> Path:
    """Write ``spec.json`` plus one CKT1 file per parameter into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"spec": model.spec.to_dict(), "parameters": list(model.params)}
    if extra:
        meta["extra"] = extra
    (directory / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name, t in model.params.items():
        T.save_tensor(directory / f"{name}.ckt", t)
    return directory


def load_model(directory) -> Model:
    directory = Path(directory)
    meta_path = directory / "spec.json"
    if not meta_path.exists():
        raise ConfigError(f"{directory} is not a model checkpoint")
    meta = json.loads(meta_path.read_text())
    spec = ModelSpec.from_dict(meta["spec"])
    params = {name: T.load_tensor(directory / f"{name}.ckt") for name in meta["parameters"]}
    return Model(spec, params)


def checkpoint_extra(directory) -> dict:
    meta = json.loads((Path(directory) / "spec.json").read_text())
    return meta.get("extra", {})
