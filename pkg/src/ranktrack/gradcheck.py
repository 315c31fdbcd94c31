"""Finite-difference verification of every differentiable op.

Each check evaluates an op as a scalar function of one packed input
tensor and compares recorded gradients against central differences at
several random points (relative error, see ``finite_diff_check``).

Two conventions keep checks honest where ops branch on data:

* sampled points keep comparison margins (pairwise gaps, distance to
  thresholds) far above the step size so no branch flips inside +-h;
* the IoU-guided ranking loss deliberately freezes the lower-ranked IoU
  of each confidence-ordered pair, so its oracle evaluates a pinned
  variant: pair sets and frozen values are taken from the base point.
  The pinned variant matches the real op's value and gradient at the
  base point exactly, which the test suite asserts separately.
"""

from __future__ import annotations

import numpy as np

from . import correlation, losses, pipeline, synthdata
from . import numerics as nm
from .geometry import Box, LabelMap, assign_labels, iou_loss
from .numerics import Tensor, finite_diff_check
from .rng import SplitMix64

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3
POINTS = 10


def _uniform_array(rng: SplitMix64, shape, lo=-1.0, hi=1.0) -> np.ndarray:
    n = int(np.prod(shape))
    return np.fromiter((rng.uniform(lo, hi) for _ in range(n)),
                       dtype=np.float64, count=n).reshape(shape)


def _separated(rng: SplitMix64, n: int, lo: float, hi: float, gap: float,
               avoid: float | None = None) -> np.ndarray:
    """n values in (lo, hi) with pairwise gaps > ``gap``, away from ``avoid``."""
    while True:
        vals = np.array([rng.uniform(lo, hi) for _ in range(n)])
        s = np.sort(vals)
        if n > 1 and np.min(np.diff(s)) <= gap:
            continue
        if avoid is not None and np.min(np.abs(vals - avoid)) <= gap:
            continue
        return vals


def _weighted_scalar(t: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed random projection to a scalar so full Jacobians get exercised."""
    return nm.sum_(nm.mul(t, Tensor(weights)))


def _max_over_points(fn, rng: SplitMix64, points: int = POINTS) -> float:
    return max(fn(rng.spawn(661, k)) for k in range(points))


# -- individual op checks ------------------------------------------------------

def check_softmax(rng: SplitMix64) -> float:
    def one(r):
        w = _uniform_array(r.spawn(1), (7,))
        x = Tensor(_uniform_array(r.spawn(2), (7,), -2, 2))
        return finite_diff_check(lambda t: _weighted_scalar(nm.softmax(t, axis=0), w), x)
    return _max_over_points(one, rng)


def check_conv2d(rng: SplitMix64) -> float:
    def one(r):
        x = _uniform_array(r.spawn(1), (2, 6, 6))
        k = _uniform_array(r.spawn(2), (3, 2, 3, 3))
        w = _uniform_array(r.spawn(3), (3, 2, 2))
        err_x = finite_diff_check(
            lambda t: _weighted_scalar(nm.conv2d(t, Tensor(k), stride=2), w), Tensor(x))
        err_k = finite_diff_check(
            lambda t: _weighted_scalar(nm.conv2d(Tensor(x), t, stride=2), w), Tensor(k))
        return max(err_x, err_k)
    return _max_over_points(one, rng)


def check_dw_corr(rng: SplitMix64) -> float:
    def one(r):
        fz = _uniform_array(r.spawn(1), (3, 3, 3))
        fx = _uniform_array(r.spawn(2), (3, 6, 6))
        w = _uniform_array(r.spawn(3), (3, 4, 4))
        err_z = finite_diff_check(
            lambda t: _weighted_scalar(correlation.dw_corr(t, Tensor(fx)), w), Tensor(fz))
        err_x = finite_diff_check(
            lambda t: _weighted_scalar(correlation.dw_corr(Tensor(fz), t), w), Tensor(fx))
        return max(err_z, err_x)
    return _max_over_points(one, rng)


def check_pw_corr(rng: SplitMix64) -> float:
    def one(r):
        fz = _uniform_array(r.spawn(1), (3, 2, 2))
        fx = _uniform_array(r.spawn(2), (3, 3, 3))
        w = _uniform_array(r.spawn(3), (6, 3, 3))
        err_z = finite_diff_check(
            lambda t: _weighted_scalar(correlation.pw_corr(t, Tensor(fx)), w), Tensor(fz))
        err_x = finite_diff_check(
            lambda t: _weighted_scalar(correlation.pw_corr(Tensor(fz), t), w), Tensor(fx))
        return max(err_z, err_x)
    return _max_over_points(one, rng)


def _random_labels(rng: SplitMix64, h: int, w: int) -> LabelMap:
    codes = np.array([rng.randint(3) - 1 for _ in range(h * w)], dtype=np.int8)
    if not np.any(codes == 1):
        codes[rng.randint(h * w)] = 1
    if not np.any(codes == 0):
        codes[(np.flatnonzero(codes == 1)[0] + 1) % (h * w)] = 0
    return LabelMap(cls=codes.reshape(h, w), targets=np.zeros((4, h, w)))


def check_cross_entropy(rng: SplitMix64) -> float:
    def one(r):
        labels = _random_labels(r.spawn(1), 4, 4)
        x = Tensor(_uniform_array(r.spawn(2), (2, 4, 4), -2, 2))
        return finite_diff_check(lambda t: losses.cross_entropy(t, labels), x)
    return _max_over_points(one, rng)


def check_iou_loss(rng: SplitMix64) -> float:
    gt = Box(20.0, 30.0, 60.0, 75.0)

    def one(r):
        # overlapping but not edge-tied prediction
        base = np.array([20.0 + r.uniform(-8, 8), 30.0 + r.uniform(-8, 8),
                         60.0 + r.uniform(-8, 8), 75.0 + r.uniform(-8, 8)])
        return finite_diff_check(lambda t: iou_loss(t, gt), Tensor(base))
    return _max_over_points(one, rng)


def check_expectations(rng: SplitMix64) -> float:
    def one(r):
        pos = Tensor(_separated(r.spawn(1), 5, 0.05, 0.95, 1e-3))
        neg = Tensor(_separated(r.spawn(2), 4, 0.55, 0.95, 1e-3))
        err_p = finite_diff_check(
            lambda t: losses.expectations(t, Tensor(neg.data))[0], pos)
        err_n = finite_diff_check(
            lambda t: losses.expectations(Tensor(pos.data), t)[1], neg)
        return max(err_p, err_n)
    return _max_over_points(one, rng)


def check_rank_cls_loss(rng: SplitMix64) -> float:
    def one(r):
        x = Tensor(np.array([r.uniform(0, 1), r.uniform(0, 1)]))
        return finite_diff_check(
            lambda t: losses.rank_cls_loss(t[0], t[1], alpha=0.5, beta=4.0), x)
    return _max_over_points(one, rng)


def pinned_rank_iou(p0: np.ndarray, v0: np.ndarray, gamma: float):
    """Frozen-oracle variant of the IoU-guided ranking loss.

    Pair sets and the frozen (constant) IoU of each confidence-ordered
    pair are pinned at the base point, matching what the real op's
    backward pass computes there. Input is packed [p, v].
    """
    n = p0.size
    i1, j1 = np.nonzero(v0[:, None] > v0[None, :])
    i2, j2 = np.nonzero(p0[:, None] > p0[None, :])
    frozen = v0[j2].copy()

    def op(x: Tensor) -> Tensor:
        p, v = x[:n], x[n:]
        s1 = nm.sum_(nm.exp(nm.mul(nm.sub(p[i1], p[j1]), -gamma))) if i1.size else Tensor(0.0)
        s2 = nm.sum_(nm.exp(nm.mul(nm.sub(v[i2], Tensor(frozen)), -gamma))) if i2.size else Tensor(0.0)
        return nm.mul(nm.add(s1, s2), 1.0 / n)

    return op


def check_rank_iou_loss(rng: SplitMix64) -> float:
    def one(r):
        n = 4 + r.randint(3)
        p0 = _separated(r.spawn(1), n, 0.05, 0.95, 1e-3)
        v0 = _separated(r.spawn(2), n, 0.05, 0.95, 1e-3)
        op = pinned_rank_iou(p0, v0, gamma=3.0)
        return finite_diff_check(op, Tensor(np.concatenate([p0, v0])), step=1e-6)
    return _max_over_points(one, rng)


def check_rank_iou_loss_ori(rng: SplitMix64) -> float:
    def one(r):
        n = 4 + r.randint(3)
        p0 = _separated(r.spawn(1), n, 0.05, 0.95, 1e-3)
        v0 = _separated(r.spawn(2), n, 0.05, 0.95, 1e-3)

        def op(x: Tensor) -> Tensor:
            batch = losses.RankBatch(pos_scores=x[:n], neg_scores=Tensor(np.zeros(0)),
                                     pos_ious=x[n:])
            return losses.rank_iou_loss_ori(batch, alpha=4.0)
        return finite_diff_check(op, Tensor(np.concatenate([p0, v0])), step=1e-6)
    return _max_over_points(one, rng)


def check_combine(rng: SplitMix64) -> float:
    def one(r):
        x = Tensor(np.array([r.uniform(0, 2) for _ in range(4)]))
        return finite_diff_check(
            lambda t: losses.combine(t[0], t[1], t[2], t[3]).total, x)
    return _max_over_points(one, rng)


# -- end-to-end -----------------------------------------------------------------

def end_to_end_error(rng: SplitMix64, n_weights: int = 20, step: float = 1e-5) -> float:
    """Central-difference check of the full training loss against the
    recorded gradients, on a random weight sample at a random init.

    The IoU-ranking term keeps the freeze convention: perturbed
    evaluations rebuild the loss with pair sets and frozen values pinned
    at the base point (otherwise the intentionally-dropped gradient term
    would register as an error).
    """
    cfg = pipeline.TrainConfig(seed=5, template_size=64, search_size=128,
                               rank_cls=True, rank_iou=True, iterations=1,
                               train_sequences=2, frames_per_sequence=3,
                               eval_sequences=1, eval_frames=2)
    cfg.validate()
    pool = pipeline.training_pool(cfg)
    seq = pool[0]
    template, search, gt_s, _ = synthdata.crop_pair(seq, 1, cfg.template_size,
                                                    cfg.search_size)
    grid = pipeline.head_grid(cfg)
    mp = pipeline.init_params(cfg, rng.spawn(7))
    labels = assign_labels(grid, gt_s)
    if labels.n_pos < 2:
        raise RuntimeError("end-to-end check needs >= 2 positive locations")

    def build_loss(pin: dict | None):
        a_cls, a_loc = pipeline.forward(mp, template, search)
        cls_term = losses.cross_entropy(a_cls, labels)
        pos = labels.pos_flat()
        px, py = grid.pixel_xy()
        pxf, pyf = px.reshape(-1)[pos], py.reshape(-1)[pos]
        offs = nm.reshape(a_loc, (4, grid.height * grid.width))
        from .geometry import iou_tensor
        x1 = nm.sub(Tensor(pxf), offs[0][pos])
        y1 = nm.sub(Tensor(pyf), offs[1][pos])
        x2 = nm.add(Tensor(pxf), offs[2][pos])
        y2 = nm.add(Tensor(pyf), offs[3][pos])
        v = iou_tensor(x1, y1, x2, y2, gt_s)
        loc_term = nm.mean(nm.sub(1.0, v))
        p = losses.foreground_probs(a_cls)
        p_pos, p_neg = p[pos], p[labels.neg_flat()]

        if pin is None:
            hard_idx = np.flatnonzero(p_neg.data > cfg.tau_neg)
            i1, j1 = np.nonzero(v.data[:, None] > v.data[None, :])
            i2, j2 = np.nonzero(p_pos.data[:, None] > p_pos.data[None, :])
            pinned = {"hard_idx": hard_idx, "i1": i1, "j1": j1, "i2": i2, "j2": j2,
                      "frozen": v.data[j2].copy()}
        else:
            pinned = pin

        rc = Tensor(0.0)
        if pinned["hard_idx"].size:
            p_plus, p_minus = losses.expectations(p_pos, p_neg[pinned["hard_idx"]])
            rc = losses.rank_cls_loss(p_minus, p_plus, cfg.alpha, cfg.beta)
        i1, j1, i2 = pinned["i1"], pinned["j1"], pinned["i2"]
        s1 = nm.sum_(nm.exp(nm.mul(nm.sub(p_pos[i1], p_pos[j1]), -cfg.gamma))) \
            if i1.size else Tensor(0.0)
        s2 = nm.sum_(nm.exp(nm.mul(nm.sub(v[i2], Tensor(pinned["frozen"])), -cfg.gamma))) \
            if i2.size else Tensor(0.0)
        ri = nm.mul(nm.add(s1, s2), 1.0 / pos.size)
        total = losses.combine(cls_term, loc_term, rc, ri,
                               weights=(cfg.w_rpn, cfg.w_rank_cls, cfg.w_rank_iou)).total
        return total, pinned

    base_loss, pinned = build_loss(None)
    nm.backward(base_loss)

    names = sorted(mp.params)
    picks = []
    pick_rng = rng.spawn(9)
    for _ in range(n_weights):
        name = names[pick_rng.randint(len(names))]
        picks.append((name, pick_rng.randint(mp.params[name].data.size)))

    worst = 0.0
    for name, flat in picks:
        t = mp.params[name]
        analytic = float(t.grad.reshape(-1)[flat])
        orig = float(t.data.reshape(-1)[flat])
        t.data.reshape(-1)[flat] = orig + step
        f_plus = build_loss(pinned)[0].item()
        t.data.reshape(-1)[flat] = orig - step
        f_minus = build_loss(pinned)[0].item()
        t.data.reshape(-1)[flat] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        err = abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    mp.zero_grad()
    return worst


# -- suite -----------------------------------------------------------------------

def run_suite(rng: SplitMix64):
    """(name, max relative error, tolerance) for the whole op inventory."""
    checks = [
        ("softmax", check_softmax, OP_TOL),
        ("conv2d", check_conv2d, OP_TOL),
        ("dw_corr", check_dw_corr, OP_TOL),
        ("pw_corr", check_pw_corr, OP_TOL),
        ("cross_entropy", check_cross_entropy, OP_TOL),
        ("iou_loss", check_iou_loss, OP_TOL),
        ("expectations", check_expectations, OP_TOL),
        ("rank_cls_loss", check_rank_cls_loss, OP_TOL),
        ("rank_iou_loss(frozen)", check_rank_iou_loss, OP_TOL),
        ("rank_iou_loss_ori", check_rank_iou_loss_ori, OP_TOL),
        ("combine", check_combine, OP_TOL),
    ]
    results = [(name, fn(rng.spawn(100 + k)), tol)
               for k, (name, fn, tol) in enumerate(checks)]
    results.append(("end_to_end_total", end_to_end_error(rng.spawn(31337)), END_TO_END_TOL))
    return results
