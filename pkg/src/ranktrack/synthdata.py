"""Deterministic synthetic scenes: a moving target, look-alike distractors,
and background clutter.

Each sequence is a pure function of its spec (seed included), so
regeneration is byte-identical. Objects are filled shapes from three
families (rectangle, ellipse, triangle); class identity is the shape
family. Distractors share the target's family and interpolate towards
its exact color and size as ``similarity`` approaches 1, which is what
makes them hard negatives rather than generic background. Clutter
objects come from the other families.

Frames are RGB float rasters in [0, 1], shaped (3, H, W). Motion is an
independent per-object random walk with step sigma in pixels, clamped
to keep boxes inside the image.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box
from .rng import SplitMix64

SHAPE_FAMILIES = ("rect", "ellipse", "triangle")

_DOMAIN_APPEARANCE = 11
_DOMAIN_MOTION = 12
_DOMAIN_NOISE = 13
_DOMAIN_CLUTTER = 14


@dataclass(frozen=True)
class SequenceSpec:
    seed: int = 0
    frames: int = 8
    image_size: int = 160
    shape: str = "rect"
    color: tuple[float, float, float] | None = None  # None: drawn from seed
    target_size: float = 26.0
    distractors: int = 2
    similarity: float = 0.85      # 1.0 = identical appearance to the target
    clutter: int = 3
    motion_sigma: float = 3.0
    noise_sigma: float = 0.05

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.shape not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family: {self.shape}")
        if not (0.0 <= self.similarity <= 1.0):
            raise ValueError("similarity must lie in [0, 1]")
        if self.target_size >= self.image_size / 2:
            raise ValueError("image too small for the configured target size")
        if self.distractors < 0 or self.clutter < 0:
            raise ValueError("object counts must be >= 0")
        if self.motion_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("sigmas must be >= 0")


@dataclass
class Sequence:
    frames: list[np.ndarray]             # each (3, H, W) float64 in [0, 1]
    gt: list[Box]                        # target box per frame
    distractor_boxes: list[list[Box]]    # per frame, one box per distractor
    spec: SequenceSpec = field(default=None)  # echo of the generating spec

    def __len__(self) -> int:
        return len(self.frames)


def _shape_mask(shape: str, h: int, w: int, box: Box) -> np.ndarray:
    """Boolean raster of a filled shape inscribed in ``box`` (pixel centers)."""
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if shape == "rect":
        return (xx >= box.x1) & (xx <= box.x2) & (yy >= box.y1) & (yy <= box.y2)
    if shape == "ellipse":
        cx, cy = box.center
        rx, ry = max(box.width / 2, 1e-9), max(box.height / 2, 1e-9)
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    if shape == "triangle":
        # isoceles: apex at the top edge midpoint, base along the bottom edge
        ax, ay = 0.5 * (box.x1 + box.x2), box.y1
        in_y = (yy >= box.y1) & (yy <= box.y2)
        frac = np.clip((yy - ay) / max(box.height, 1e-9), 0.0, 1.0)
        half = 0.5 * box.width * frac
        return in_y & (np.abs(xx - ax) <= half)
    raise ValueError(f"unknown shape family: {shape}")


def _paint(img: np.ndarray, shape: str, box: Box, color: np.ndarray,
           noise: SplitMix64, noise_sigma: float) -> None:
    mask = _shape_mask(shape, img.shape[1], img.shape[2], box)
    count = int(mask.sum())
    if count == 0:
        return
    for ch in range(3):
        vals = np.fromiter((noise.normal(color[ch], noise_sigma) for _ in range(count)),
                           dtype=np.float64, count=count)
        plane = img[ch]
        plane[mask] = np.clip(vals, 0.0, 1.0)


def _walk(rng: SplitMix64, start: tuple[float, float], frames: int, sigma: float,
          half: float, size: int) -> list[tuple[float, float]]:
    """Random-walk centers clamped so a box of half-extent ``half`` stays inside."""
    lo, hi = half + 1.0, size - half - 1.0
    cx, cy = start
    out = []
    for _ in range(frames):
        out.append((cx, cy))
        cx = min(max(cx + rng.normal(0.0, sigma), lo), hi)
        cy = min(max(cy + rng.normal(0.0, sigma), lo), hi)
    return out


def gen_sequence(spec: SequenceSpec) -> Sequence:
    """Render a full sequence from its spec; deterministic in every byte."""
    spec.validate()
    root = SplitMix64(spec.seed)
    appear = root.spawn(_DOMAIN_APPEARANCE)
    motion = root.spawn(_DOMAIN_MOTION)

    size = spec.image_size
    color = np.array(spec.color if spec.color is not None
                     else [appear.uniform(0.25, 0.95) for _ in range(3)])
    bg = np.array([appear.uniform(0.02, 0.18) for _ in range(3)])

    half_t = spec.target_size / 2.0
    lo, hi = half_t + 2.0, size - half_t - 2.0
    target_centers = _walk(motion, (motion.uniform(lo, hi), motion.uniform(lo, hi)),
                           spec.frames, spec.motion_sigma, half_t, size)

    # distractors: same family, appearance interpolated towards the
    # target's, orbiting the target inside a radius band so they stay
    # inside typical search crops without ever overlapping the target
    dist_colors, dist_halves, dist_centers = [], [], []
    for d in range(spec.distractors):
        drift = 1.0 - spec.similarity
        dcolor = np.clip(color + drift * np.array([appear.uniform(-0.5, 0.5) for _ in range(3)]),
                         0.0, 1.0)
        dhalf = half_t * (1.0 + drift * appear.uniform(-0.4, 0.4))
        dm = motion.spawn(_DOMAIN_MOTION, d + 1)
        r_min = 1.47 * (half_t + dhalf)
        r_max = max(r_min + 6.0, 0.34 * size)
        theta = dm.uniform(0.0, 2.0 * np.pi)
        radius = dm.uniform(r_min, r_max)
        centers = []
        for t in range(spec.frames):
            tx, ty = target_centers[t]
            lo_d, hi_d = dhalf + 1.0, size - dhalf - 1.0
            for attempt in range(2):
                cand = theta + (np.pi if attempt else 0.0)
                cx = min(max(tx + radius * np.cos(cand), lo_d), hi_d)
                cy = min(max(ty + radius * np.sin(cand), lo_d), hi_d)
                if max(abs(cx - tx), abs(cy - ty)) > half_t + dhalf + 1.0:
                    break
            centers.append((cx, cy))
            theta += dm.normal(0.0, 0.02 * spec.motion_sigma)
            radius = min(max(radius + dm.normal(0.0, 0.6 * spec.motion_sigma), r_min), r_max)
        dist_colors.append(dcolor)
        dist_halves.append(dhalf)
        dist_centers.append(centers)

    clutter_rng = root.spawn(_DOMAIN_CLUTTER)
    other_families = [s for s in SHAPE_FAMILIES if s != spec.shape]
    clutter_items = []
    for _ in range(spec.clutter):
        fam = other_families[clutter_rng.randint(len(other_families))]
        chalf = clutter_rng.uniform(3.0, max(4.0, half_t * 0.7))
        ccolor = np.array([clutter_rng.uniform(0.1, 0.9) for _ in range(3)])
        start = (clutter_rng.uniform(chalf + 1, size - chalf - 1),
                 clutter_rng.uniform(chalf + 1, size - chalf - 1))
        cm = clutter_rng.spawn(_DOMAIN_MOTION, len(clutter_items) + 101)
        clutter_items.append((fam, chalf, ccolor,
                              _walk(cm, start, spec.frames, spec.motion_sigma, chalf, size)))

    frames, gts, dist_boxes = [], [], []
    for t in range(spec.frames):
        noise = root.spawn(_DOMAIN_NOISE, t)
        img = np.empty((3, size, size))
        for ch in range(3):
            img[ch].fill(bg[ch])

        for fam, chalf, ccolor, centers in clutter_items:
            cx, cy = centers[t]
            _paint(img, fam, Box(cx - chalf, cy - chalf, cx + chalf, cy + chalf),
                   ccolor, noise, spec.noise_sigma)

        gt_cx, gt_cy = target_centers[t]
        gt = Box(gt_cx - half_t, gt_cy - half_t, gt_cx + half_t, gt_cy + half_t)

        boxes_t = []
        for d in range(spec.distractors):
            dcx, dcy = dist_centers[d][t]
            dh = dist_halves[d]
            db = Box(dcx - dh, dcy - dh, dcx + dh, dcy + dh)
            boxes_t.append(db)
            _paint(img, spec.shape, db, dist_colors[d], noise, spec.noise_sigma)

        _paint(img, spec.shape, gt, color, noise, spec.noise_sigma)

        frames.append(img)
        gts.append(gt)
        dist_boxes.append(boxes_t)

    return Sequence(frames=frames, gt=gts, distractor_boxes=dist_boxes, spec=spec)


# -- cropping ------------------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    """Affine map between image coordinates and a square resized crop."""

    cx: float
    cy: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.out_size / self.side

    def to_crop(self, box: Box) -> Box:
        x0, y0 = self.cx - self.side / 2.0, self.cy - self.side / 2.0
        return Box((box.x1 - x0) * self.scale, (box.y1 - y0) * self.scale,
                   (box.x2 - x0) * self.scale, (box.y2 - y0) * self.scale)

    def to_image(self, box: Box) -> Box:
        x0, y0 = self.cx - self.side / 2.0, self.cy - self.side / 2.0
        return Box(box.x1 / self.scale + x0, box.y1 / self.scale + y0,
                   box.x2 / self.scale + x0, box.y2 / self.scale + y0)


def context_side(box: Box, margin_ratio: float = 0.5) -> float:
    """Square crop side with additive context margin ratio * (w + h)."""
    m = margin_ratio * (box.width + box.height)
    return float(np.sqrt((box.width + m) * (box.height + m)))


def crop_window(frame: np.ndarray, cx: float, cy: float, side: float,
                out_size: int) -> np.ndarray:
    """Bilinear square crop; regions outside the frame read as channel mean."""
    c, h, w = frame.shape
    xs = cx - side / 2.0 + (np.arange(out_size) + 0.5) * (side / out_size) - 0.5
    ys = cy - side / 2.0 + (np.arange(out_size) + 0.5) * (side / out_size) - 0.5
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0

    means = frame.reshape(c, -1).mean(axis=1)
    padded = np.empty((c, h + 2, w + 2))
    padded[:] = means[:, None, None]
    padded[:, 1:h + 1, 1:w + 1] = frame

    x0c = np.clip(x0 + 1, 0, w + 1)
    x1c = np.clip(x0 + 2, 0, w + 1)
    y0c = np.clip(y0 + 1, 0, h + 1)
    y1c = np.clip(y0 + 2, 0, h + 1)
    # any source pixel outside the frame collapses onto the mean border ring
    out_of_x = (x0 < -1) | (x0 > w)
    out_of_y = (y0 < -1) | (y0 > h)
    x0c[out_of_x] = 0
    x1c[out_of_x] = 0
    y0c[out_of_y] = 0
    y1c[out_of_y] = 0

    tl = padded[:, y0c[:, None], x0c[None, :]]
    tr = padded[:, y0c[:, None], x1c[None, :]]
    bl = padded[:, y1c[:, None], x0c[None, :]]
    br = padded[:, y1c[:, None], x1c[None, :]]
    wx = fx[None, None, :]
    wy = fy[None, :, None]
    return (tl * (1 - wx) * (1 - wy) + tr * wx * (1 - wy)
            + bl * (1 - wx) * wy + br * wx * wy)


def crop_pair(seq: Sequence, index: int, template_size: int = 64,
              search_size: int = 128, search_center: tuple[float, float] | None = None,
              ) -> tuple[np.ndarray, np.ndarray, Box, CropTransform]:
    """Template (frame 0) and search (frame ``index``) crops.

    The template is centered on the first-frame target with a 0.5*(w+h)
    context margin; the search covers the same physical extent scaled by
    search_size/template_size, centered on the current target unless
    ``search_center`` overrides it (training jitter, tracking). Returns
    the two rasters, the ground truth mapped into search coordinates,
    and the search transform.
    """
    if not (0 <= index < len(seq)):
        raise IndexError("frame index out of range")
    gt0 = seq.gt[0]
    z_side = context_side(gt0)
    z_cx, z_cy = gt0.center
    template = crop_window(seq.frames[0], z_cx, z_cy, z_side, template_size)

    gt = seq.gt[index]
    s_side = z_side * (search_size / template_size)
    s_cx, s_cy = search_center if search_center is not None else gt.center
    search = crop_window(seq.frames[index], s_cx, s_cy, s_side, search_size)
    tf = CropTransform(cx=s_cx, cy=s_cy, side=s_side, out_size=search_size)
    return template, search, tf.to_crop(gt), tf


# -- export / import -----------------------------------------------------------

def _write_ppm(path: str, img: np.ndarray) -> None:
    c, h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def _read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise ValueError(f"not a binary PPM file: {path}")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only maxval 255 PPMs are supported")
    raw = np.frombuffer(blob[m.end():], dtype=np.uint8, count=h * w * 3)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def export_sequence(seq: Sequence, out_dir: str) -> None:
    """Write frames as binary PPMs plus a plain-text annotation file.

    annotations.txt carries one block per object (target first,
    then each distractor), one "frame x1 y1 x2 y2" line per frame,
    blocks separated by blank lines. The generating spec, when present,
    is echoed to spec.txt.
    """
    os.makedirs(out_dir, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        _write_ppm(os.path.join(out_dir, f"frame_{t:06d}.ppm"), frame)

    blocks = [seq.gt] + [[seq.distractor_boxes[t][d] for t in range(len(seq))]
                         for d in range(len(seq.distractor_boxes[0]) if seq.distractor_boxes else 0)]
    lines = []
    for block in blocks:
        for t, box in enumerate(block):
            lines.append(f"{t} {box.x1!r} {box.y1!r} {box.x2!r} {box.y2!r}")
        lines.append("")
    with open(os.path.join(out_dir, "annotations.txt"), "w") as f:
        f.write("\n".join(lines))

    if seq.spec is not None:
        from . import configio
        with open(os.path.join(out_dir, "spec.txt"), "w") as f:
            f.write(configio.format_kv(spec_to_kv(seq.spec)))


def import_sequence(in_dir: str) -> Sequence:
    names = sorted(n for n in os.listdir(in_dir) if n.startswith("frame_") and n.endswith(".ppm"))
    if not names:
        raise ValueError(f"no frames found in {in_dir}")
    frames = [_read_ppm(os.path.join(in_dir, n)) for n in names]

    with open(os.path.join(in_dir, "annotations.txt")) as f:
        text = f.read()
    blocks = [b for b in text.split("\n\n") if b.strip()]
    parsed: list[list[Box]] = []
    for block in blocks:
        boxes = {}
        for line in block.strip().splitlines():
            t, x1, y1, x2, y2 = line.split()
            boxes[int(t)] = Box(float(x1), float(y1), float(x2), float(y2))
        parsed.append([boxes[t] for t in range(len(frames))])

    spec = None
    spec_path = os.path.join(in_dir, "spec.txt")
    if os.path.exists(spec_path):
        from . import configio
        with open(spec_path) as f:
            spec = spec_from_kv(configio.parse_kv(f.read()))

    distractors = [[parsed[d + 1][t] for d in range(len(parsed) - 1)]
                   for t in range(len(frames))]
    return Sequence(frames=frames, gt=parsed[0], distractor_boxes=distractors, spec=spec)


def spec_to_kv(spec: SequenceSpec) -> dict[str, str]:
    kv = {
        "seed": str(spec.seed),
        "frames": str(spec.frames),
        "image_size": str(spec.image_size),
        "shape": spec.shape,
        "target_size": repr(spec.target_size),
        "distractors": str(spec.distractors),
        "similarity": repr(spec.similarity),
        "clutter": str(spec.clutter),
        "motion_sigma": repr(spec.motion_sigma),
        "noise_sigma": repr(spec.noise_sigma),
    }
    if spec.color is not None:
        kv["color"] = ",".join(repr(c) for c in spec.color)
    return kv


def spec_from_kv(kv: dict[str, str]) -> SequenceSpec:
    spec = SequenceSpec(
        seed=int(kv.get("seed", "0")),
        frames=int(kv.get("frames", "8")),
        image_size=int(kv.get("image_size", "160")),
        shape=kv.get("shape", "rect"),
        target_size=float(kv.get("target_size", "26")),
        distractors=int(kv.get("distractors", "2")),
        similarity=float(kv.get("similarity", "0.85")),
        clutter=int(kv.get("clutter", "3")),
        motion_sigma=float(kv.get("motion_sigma", "3.0")),
        noise_sigma=float(kv.get("noise_sigma", "0.05")),
    )
    if "color" in kv:
        spec = replace(spec, color=tuple(float(c) for c in kv["color"].split(",")))
    spec.validate()
    return spec
