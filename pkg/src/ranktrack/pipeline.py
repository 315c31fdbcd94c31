"""Toy Siamese matcher: shared conv backbone, correlation, twin heads,
a deterministic SGD training loop, and frame-by-frame tracking.

The backbone is three stride-2 valid convolutions with 2x2 kernels
(channels in -> 16 -> 32 -> 32), so every feature cell covers a
disjoint 8x8 pixel block and the effective stride is exactly 8. Heads
are 1x1 conv stacks, so the prediction grid is the correlation output
grid: with the 64/128 preset that is 9x9 in depth-wise mode and 16x16
in pixel-wise mode.

Everything is float64 and all randomness flows from the config seed, so
a run is reproducible bit for bit.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import configio, correlation, losses, synthdata
from . import numerics as nm
from .configio import ConfigError
from .geometry import Box, HeadGrid, LabelMap, assign_labels, iou_tensor
from .numerics import Tensor
from .rng import SplitMix64

BACKBONE_CHANNELS = (16, 32, 32)
BACKBONE_KERNEL = 2
BACKBONE_STRIDE = 2
HEAD_HIDDEN = 16
TOTAL_STRIDE = 8

_DOM_INIT = 1
_DOM_DATA = 2
_DOM_SAMPLER = 3
_DOM_EVAL_DATA = 4
_DOM_JITTER = 5


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    seed: int = 7
    template_size: int = 127
    search_size: int = 255
    corr_mode: str = "dw"            # dw | pw
    in_channels: int = 3

    # loss switches (one ablation arm each)
    rank_cls: bool = False
    rank_iou: bool = False
    rank_iou_ori: bool = False
    two_stage_ce: bool = False

    # loss hyperparameters
    alpha: float = 0.5
    beta: float = 4.0
    gamma: float = 3.0
    tau_neg: float = 0.5
    ori_alpha: float = 4.0
    w_rpn: float = 1.0
    w_rank_cls: float = 0.5
    w_rank_iou: float = 0.25

    # optimizer
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 1000
    rank_warmup: int = 0             # iterations before rank losses switch on
    shift_aug: float = 16.0          # max search-center jitter during training, px

    # training data
    train_sequences: int = 12
    frames_per_sequence: int = 10
    image_size: int = 160
    target_size: float = 26.0
    distractors: int = 2
    similarity: float = 0.85
    clutter: int = 3
    motion_sigma: float = 3.0

    # held-out evaluation data
    eval_sequences: int = 20
    eval_frames: int = 10
    eval_seed: int = 900
    eval_jitter: float = 12.0

    def validate(self) -> None:
        if self.corr_mode not in ("dw", "pw"):
            raise ConfigError("corr_mode must be 'dw' or 'pw'")
        if self.rank_iou and self.rank_iou_ori:
            raise ConfigError("rank_iou and rank_iou_ori are mutually exclusive")
        positive = ["template_size", "search_size", "in_channels", "beta", "gamma",
                    "ori_alpha", "lr", "batch_size", "iterations", "train_sequences",
                    "frames_per_sequence", "image_size", "target_size",
                    "eval_sequences", "eval_frames"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"field {name!r} must be positive")
        nonneg = ["alpha", "tau_neg", "momentum", "rank_warmup", "shift_aug",
                  "distractors", "clutter", "motion_sigma", "eval_jitter"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"field {name!r} must be non-negative")
        if self.template_size >= self.search_size:
            raise ConfigError("template_size must be smaller than search_size")
        if feature_extent(self.template_size) < 1:
            raise ConfigError("template_size too small for the backbone")

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        configio.reject_unknown(kv, known)
        args = {}
        for f in fields(cls):
            kind = {int: int, float: float, bool: bool, str: str}[type(getattr(cls(), f.name))]
            args[f.name] = configio.coerce(kv, f.name, kind, getattr(cls(), f.name))
        cfg = cls(**args)
        cfg.validate()
        return cfg


def feature_extent(n: int) -> int:
    """Spatial extent after the backbone (three 2x2/stride-2 valid convs)."""
    for _ in BACKBONE_CHANNELS:
        n = (n - BACKBONE_KERNEL) // BACKBONE_STRIDE + 1
    return n


def head_grid(cfg: TrainConfig) -> HeadGrid:
    fz = feature_extent(cfg.template_size)
    fx = feature_extent(cfg.search_size)
    g = fx - fz + 1 if cfg.corr_mode == "dw" else fx
    return HeadGrid.centered(cfg.search_size, g, g, float(TOTAL_STRIDE))


@dataclass
class ModelParams:
    """Named weight tensors plus the architecture facts needed to run them."""

    corr_mode: str
    in_channels: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def leaves(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for _, t in self.params.items():
            t.zero_grad()


def _conv_shapes(cfg: TrainConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    c_in = cfg.in_channels
    for i, c_out in enumerate(BACKBONE_CHANNELS, start=1):
        shapes.append((f"bb{i}_w", (c_out, c_in, BACKBONE_KERNEL, BACKBONE_KERNEL)))
        shapes.append((f"bb{i}_b", (c_out, 1, 1)))
        c_in = c_out
    sim_channels = BACKBONE_CHANNELS[-1] * (2 if cfg.corr_mode == "pw" else 1)
    for head, c_out in (("cls", 2), ("loc", 4)):
        shapes.append((f"{head}1_w", (HEAD_HIDDEN, sim_channels, 1, 1)))
        shapes.append((f"{head}1_b", (HEAD_HIDDEN, 1, 1)))
        shapes.append((f"{head}2_w", (c_out, HEAD_HIDDEN, 1, 1)))
        shapes.append((f"{head}2_b", (c_out, 1, 1)))
    return shapes


def init_params(cfg: TrainConfig, rng: SplitMix64) -> ModelParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    mp = ModelParams(corr_mode=cfg.corr_mode, in_channels=cfg.in_channels)
    for name, shape in _conv_shapes(cfg):
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
        else:
            wshape = dict(_conv_shapes(cfg))[name[:-2] + "_w"]
            fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        flat = np.fromiter((rng.uniform(-bound, bound) for _ in range(int(np.prod(shape)))),
                           dtype=np.float64, count=int(np.prod(shape)))
        mp.params[name] = Tensor(flat.reshape(shape), requires_grad=True)
    return mp


def _backbone(mp: ModelParams, raster: np.ndarray) -> Tensor:
    # rasters live in [0, 1]; center them so early conv outputs are not
    # swamped by the DC component
    x = Tensor(raster - 0.5)
    for i in range(1, len(BACKBONE_CHANNELS) + 1):
        x = nm.conv2d(x, mp.params[f"bb{i}_w"], stride=BACKBONE_STRIDE)
        x = nm.add(x, mp.params[f"bb{i}_b"])
        x = nm.relu(x)
    return x


def _head(mp: ModelParams, name: str, s: Tensor) -> Tensor:
    h = nm.relu(nm.add(nm.conv2d(s, mp.params[f"{name}1_w"]), mp.params[f"{name}1_b"]))
    return nm.add(nm.conv2d(h, mp.params[f"{name}2_w"]), mp.params[f"{name}2_b"])


def forward(mp: ModelParams, template: np.ndarray, search: np.ndarray,
            ) -> tuple[Tensor, Tensor]:
    """Class logits (2, G, G) and positive side offsets (4, G, G) in pixels.

    Offsets are stride * exp(raw), so decoded boxes always have
    non-negative extents and a zero raw output means one stride unit;
    class logits are softmaxed by consumers.
    """
    if template.shape[0] != mp.in_channels or search.shape[0] != mp.in_channels:
        raise ValueError("raster channel count does not match the model")
    fz = _backbone(mp, template)
    fx = _backbone(mp, search)
    if mp.corr_mode == "dw":
        sim = correlation.dw_corr(fz, fx)
    else:
        sim = correlation.pw_corr(fz, fx)
    a_cls = _head(mp, "cls", sim)
    a_loc = nm.mul(nm.exp(_head(mp, "loc", sim)), float(TOTAL_STRIDE))
    return a_cls, a_loc


# -- per-image loss -------------------------------------------------------------

def image_loss(cfg: TrainConfig, mp: ModelParams, template: np.ndarray,
               search: np.ndarray, gt: Box, grid: HeadGrid,
               enable_rank: bool = True, rng: SplitMix64 | None = None,
               ) -> tuple[losses.LossBreakdown, float | None] | None:
    """Loss terms for one (template, search, gt) triple, plus the
    classification ranking margin P_plus - P_minus (None when that term
    was skipped or disabled).

    Returns None when the ground truth captures no positive grid
    location (the sample cannot supervise regression). The rank terms
    follow the configured switches; an image with no hard negatives
    contributes rank_cls = 0 and is flagged skipped.
    """
    labels = assign_labels(grid, gt)
    if labels.n_pos == 0:
        return None
    a_cls, a_loc = forward(mp, template, search)

    cls_term = (losses.two_stage_ce(a_cls, labels, cfg.tau_neg) if cfg.two_stage_ce
                else losses.cross_entropy(a_cls, labels))

    pos = labels.pos_flat()
    px, py = grid.pixel_xy()
    px, py = px.reshape(-1)[pos], py.reshape(-1)[pos]
    g = grid.height * grid.width
    offs = nm.reshape(a_loc, (4, g))
    l, t = offs[0][pos], offs[1][pos]
    r, b = offs[2][pos], offs[3][pos]
    x1 = nm.sub(Tensor(px), l)
    y1 = nm.sub(Tensor(py), t)
    x2 = nm.add(Tensor(px), r)
    y2 = nm.add(Tensor(py), b)
    v_iou = iou_tensor(x1, y1, x2, y2, gt)
    loc_term = nm.mean(nm.sub(1.0, v_iou))

    p_fg = losses.foreground_probs(a_cls)
    batch = losses.RankBatch(pos_scores=p_fg[pos], neg_scores=p_fg[labels.neg_flat()],
                             pos_ious=v_iou)

    rank_cls_term: Tensor | float = 0.0
    skipped = False
    margin: float | None = None
    if cfg.rank_cls and enable_rank:
        hard = losses.hard_negative_set(batch.neg_scores, cfg.tau_neg)
        if hard.data.size == 0:
            skipped = True
        else:
            p_plus, p_minus = losses.expectations(batch.pos_scores, hard)
            rank_cls_term = losses.rank_cls_loss(p_minus, p_plus, cfg.alpha, cfg.beta)
            margin = p_plus.item() - p_minus.item()

    rank_iou_term: Tensor | float = 0.0
    if enable_rank:
        if cfg.rank_iou:
            rank_iou_term = losses.rank_iou_loss(batch, cfg.gamma, rng=rng)
        elif cfg.rank_iou_ori:
            rank_iou_term = losses.rank_iou_loss_ori(batch, cfg.ori_alpha, rng=rng)

    breakdown = losses.combine(cls_term, loc_term, rank_cls_term, rank_iou_term,
                               skipped_rank_cls=skipped,
                               weights=(cfg.w_rpn, cfg.w_rank_cls, cfg.w_rank_iou))
    return breakdown, margin


# -- training -------------------------------------------------------------------

@dataclass
class LogRow:
    iteration: int
    cls: float
    loc: float
    rank_cls: float
    rank_iou: float
    total: float
    margin: float  # P_plus - P_minus, nan when no image had hard negatives


@dataclass
class TrainResult:
    params: ModelParams
    log: list[LogRow]
    seconds: float


def training_pool(cfg: TrainConfig) -> list[synthdata.Sequence]:
    master = SplitMix64(cfg.seed)
    pool = []
    for i in range(cfg.train_sequences):
        srng = master.spawn(_DOM_DATA, i)
        spec = synthdata.SequenceSpec(
            seed=srng.next_u64(),
            frames=cfg.frames_per_sequence,
            image_size=cfg.image_size,
            shape=synthdata.SHAPE_FAMILIES[i % len(synthdata.SHAPE_FAMILIES)],
            target_size=cfg.target_size,
            distractors=cfg.distractors,
            similarity=cfg.similarity,
            clutter=cfg.clutter,
            motion_sigma=cfg.motion_sigma,
        )
        pool.append(synthdata.gen_sequence(spec))
    return pool


def eval_pool(cfg: TrainConfig) -> list[synthdata.Sequence]:
    """Held-out sequences; seeded independently of the training pool."""
    master = SplitMix64(cfg.eval_seed)
    pool = []
    for i in range(cfg.eval_sequences):
        srng = master.spawn(_DOM_EVAL_DATA, i)
        spec = synthdata.SequenceSpec(
            seed=srng.next_u64(),
            frames=cfg.eval_frames,
            image_size=cfg.image_size,
            shape=synthdata.SHAPE_FAMILIES[i % len(synthdata.SHAPE_FAMILIES)],
            target_size=cfg.target_size,
            distractors=cfg.distractors,
            similarity=cfg.similarity,
            clutter=cfg.clutter,
            motion_sigma=cfg.motion_sigma,
        )
        pool.append(synthdata.gen_sequence(spec))
    return pool


def _snapshot(mp: ModelParams, it: int, last: LogRow | None) -> dict:
    norms = {name: float(np.linalg.norm(t.data)) for name, t in mp.leaves()}
    return {"iteration": it, "param_norms": norms,
            "last_row": None if last is None else vars(last)}


def train(cfg: TrainConfig, pool: list[synthdata.Sequence] | None = None) -> TrainResult:
    """Deterministic SGD-with-momentum run over synthetic crops.

    Identical config (seed included) reproduces the final parameters bit
    for bit. Raises DivergenceError with a diagnostic snapshot when any
    loss or parameter stops being finite.
    """
    cfg.validate()
    t0 = time.perf_counter()
    if pool is None:
        pool = training_pool(cfg)
    master = SplitMix64(cfg.seed)
    init_rng = master.spawn(_DOM_INIT)
    sampler = master.spawn(_DOM_SAMPLER)
    mp = init_params(cfg, init_rng)
    grid = head_grid(cfg)

    velocity = {name: np.zeros_like(t.data) for name, t in mp.leaves()}
    log: list[LogRow] = []
    last_row: LogRow | None = None

    for it in range(cfg.iterations):
        enable_rank = it >= cfg.rank_warmup
        parts: list[losses.LossBreakdown] = []
        margins: list[float] = []
        attempts = 0
        while len(parts) < cfg.batch_size and attempts < 10 * cfg.batch_size:
            attempts += 1
            seq = pool[sampler.randint(len(pool))]
            idx = sampler.randint(len(seq))
            cx, cy = seq.gt[idx].center
            if cfg.shift_aug > 0:
                cx += sampler.uniform(-cfg.shift_aug, cfg.shift_aug)
                cy += sampler.uniform(-cfg.shift_aug, cfg.shift_aug)
            template, search, gt_s, _ = synthdata.crop_pair(
                seq, idx, cfg.template_size, cfg.search_size, search_center=(cx, cy))
            try:
                result = image_loss(cfg, mp, template, search, gt_s, grid,
                                    enable_rank=enable_rank, rng=sampler)
            except nm.NonFiniteError as e:
                raise DivergenceError(f"non-finite loss at iteration {it}: {e}",
                                      _snapshot(mp, it, last_row)) from e
            if result is not None:
                parts.append(result[0])
                if result[1] is not None:
                    margins.append(result[1])
        if not parts:
            raise DivergenceError(f"no trainable samples at iteration {it}",
                                  _snapshot(mp, it, last_row))

        total = nm.mul(_sum_tensors([p.total for p in parts]), 1.0 / len(parts))
        nm.backward(total)

        row = LogRow(
            iteration=it,
            cls=float(np.mean([p.cls.item() for p in parts])),
            loc=float(np.mean([p.loc.item() for p in parts])),
            rank_cls=float(np.mean([p.rank_cls.item() for p in parts])),
            rank_iou=float(np.mean([p.rank_iou.item() for p in parts])),
            total=total.item(),
            margin=float(np.mean(margins)) if margins else float("nan"),
        )
        log.append(row)
        last_row = row

        for name, t in mp.leaves():
            velocity[name] = cfg.momentum * velocity[name] + t.grad
            t.data = t.data - cfg.lr * velocity[name]
            if not np.all(np.isfinite(t.data)):
                raise DivergenceError(f"non-finite parameter {name!r} at iteration {it}",
                                      _snapshot(mp, it, last_row))
        mp.zero_grad()

    return TrainResult(params=mp, log=log, seconds=time.perf_counter() - t0)


def _sum_tensors(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = nm.add(acc, t)
    return acc


def write_run_log(log: list[LogRow], path: str) -> None:
    with open(path, "w") as f:
        f.write("iteration,cls,loc,rank_cls,rank_iou,total,margin\n")
        for r in log:
            f.write(f"{r.iteration},{r.cls!r},{r.loc!r},{r.rank_cls!r},"
                    f"{r.rank_iou!r},{r.total!r},{r.margin!r}\n")


def read_run_log(path: str) -> list[LogRow]:
    rows = []
    with open(path) as f:
        header = f.readline()
        if header.strip() != "iteration,cls,loc,rank_cls,rank_iou,total,margin":
            raise ValueError("unrecognized run log header")
        for line in f:
            it, *vals = line.strip().split(",")
            rows.append(LogRow(int(it), *(float(v) for v in vals)))
    return rows


# -- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"RTCK"
_CKPT_VERSION = 1


def save_checkpoint(mp: ModelParams, path: str) -> None:
    """Binary layout: magic, version, mode/channels header, then per
    tensor: name, shape header, raw float64 little-endian payload."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        header = f"corr_mode={mp.corr_mode};in_channels={mp.in_channels}".encode()
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(mp.params)))
        for name, t in mp.leaves():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = dict(kv.split("=", 1) for kv in f.read(hlen).decode().split(";"))
        mp = ModelParams(corr_mode=header["corr_mode"], in_channels=int(header["in_channels"]))
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            raw = f.read(8 * int(np.prod(shape)))
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            mp.params[name] = Tensor(data, requires_grad=True)
    return mp


# -- tracking ---------------------------------------------------------------------

def hann2d(n: int) -> np.ndarray:
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / max(n - 1, 1)))
    return np.outer(w, w)


def track(mp: ModelParams, seq: synthdata.Sequence, cfg: TrainConfig,
          window_influence: float = 0.0) -> list[Box]:
    """Frame-by-frame inference from the first-frame ground truth.

    Per frame: crop the search region around the previous prediction,
    pick the highest foreground-probability grid location (optionally
    blended with a cosine window), decode its box, and map it back to
    image coordinates clamped to the frame.
    """
    grid = head_grid(cfg)
    px, py = grid.pixel_xy()
    win = hann2d(grid.height)
    h_img, w_img = seq.frames[0].shape[1:]

    preds = [seq.gt[0]]
    prev = seq.gt[0]
    z_side = synthdata.context_side(seq.gt[0])
    z_cx, z_cy = seq.gt[0].center
    template = synthdata.crop_window(seq.frames[0], z_cx, z_cy, z_side, cfg.template_size)

    for t in range(1, len(seq)):
        side = synthdata.context_side(prev) * (cfg.search_size / cfg.template_size)
        cx, cy = prev.center
        search = synthdata.crop_window(seq.frames[t], cx, cy, side, cfg.search_size)
        tf = synthdata.CropTransform(cx=cx, cy=cy, side=side, out_size=cfg.search_size)

        a_cls, a_loc = forward(mp, template, search)
        probs = nm.softmax(a_cls, axis=0).data[1]
        score = probs if window_influence <= 0 else \
            (1.0 - window_influence) * probs + window_influence * win
        r, c = np.unravel_index(int(np.argmax(score)), score.shape)
        offs = a_loc.data[:, r, c]
        box_search = Box(px[r, c] - max(offs[0], 0.0), py[r, c] - max(offs[1], 0.0),
                         px[r, c] + max(offs[2], 0.0), py[r, c] + max(offs[3], 0.0))
        box = tf.to_image(box_search).clipped(float(w_img), float(h_img))
        if box.area <= 0.0:  # degenerate prediction: hold the previous box
            box = prev
        preds.append(box)
        prev = box
    return preds
