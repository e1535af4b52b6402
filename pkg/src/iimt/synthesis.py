"""Paired text-image synthesis.

Sentences are word-wrapped onto a fixed glyph grid, stamped in black onto
a random non-dark background, and the whole text block is shifted by a
random integer offset and rotated by a random angle about its center
(bilinear resampling). Source and target sides of a pair share the same
layout and transform but draw independent background colors. Ground-truth
per-line text boxes are tight ink bounds, re-axis-aligned after rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import ManifestRecord
from .errors import ConfigError
from .glyphs import GlyphAtlas, DEFAULT_ATLAS, GLYPH_H, GLYPH_W
from .imgio import save_image
from .seeding import make_rng

LUMA = np.array([0.299, 0.587, 0.114])


class RenderRejection(Exception):
    """Sample cannot be rendered within the spec (unknown glyph / overflow)."""


@dataclass
class TextBox:
    text: str
    box: Tuple[float, float, float, float]  # (x_min, y_min, x_max, y_max)

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ConfigError(f"degenerate box {self.box}")

    def to_dict(self) -> dict:
        return {"text": self.text, "box": [float(v) for v in self.box]}


@dataclass
class RenderSpec:
    image_size: Tuple[int, int] = (64, 64)      # (H, W)
    margin: int = 3
    char_spacing: int = 1                        # blank columns between cells
    line_spacing: int = 3                        # blank rows between cells
    theta_max: float = 8.0                       # degrees
    d_max: int = 4                               # pixels
    bg_luminance_min: float = 0.25               # exclusion band above black

    def __post_init__(self):
        if self.theta_max < 0 or self.d_max < 0:
            raise ConfigError("rotation/translation ranges must be non-negative")

    @property
    def pitch_x(self) -> int:
        return GLYPH_W + self.char_spacing

    @property
    def pitch_y(self) -> int:
        return GLYPH_H + self.line_spacing

    @property
    def anchor(self) -> int:
        """Block top-left before translation; reserves room for d_max."""
        return self.margin + self.d_max

    @property
    def max_cols(self) -> int:
        usable = self.image_size[1] - 2 * self.anchor
        return (usable + self.char_spacing) // self.pitch_x

    @property
    def max_lines(self) -> int:
        usable = self.image_size[0] - 2 * self.anchor
        return (usable + self.line_spacing) // self.pitch_y


@dataclass
class RenderedSample:
    image: np.ndarray                    # [H, W, 3] float in [0, 1]
    text: str
    line_boxes: List[TextBox]            # final coordinates, re-axis-aligned
    layout_boxes: List[TextBox]          # pre-rotation tight ink boxes
    rotation_deg: float
    translation_px: Tuple[int, int]      # (dx, dy)


def wrap_text(text: str, max_cols: int) -> List[str]:
    """Greedy word wrap; a word longer than the line width is unrepresentable."""
    words = text.split(" ")
    lines, cur = [], ""
    for word in words:
        if word == "":
            continue
        if len(word) > max_cols:
            raise RenderRejection(f"word of {len(word)} chars exceeds line width {max_cols}")
        cand = word if not cur else cur + " " + word
        if len(cand) <= max_cols:
            cur = cand
        else:
            lines.append(cur)
            cur = word
    if cur:
        lines.append(cur)
    if not lines:
        raise RenderRejection("empty text")
    return lines


def rotate_points(points: np.ndarray, deg: float, center: np.ndarray) -> np.ndarray:
    """Rotate (x, y) points by deg counter-clockwise about center."""
    rad = math.radians(deg)
    rot = np.array([[math.cos(rad), -math.sin(rad)], [math.sin(rad), math.cos(rad)]])
    return (points - center) @ rot.T + center


def rotate_mask_bilinear(mask: np.ndarray, deg: float, center_xy: np.ndarray) -> np.ndarray:
    """Rotate scalar field content by deg about center via inverse mapping."""
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    src = rotate_points(pts, -deg, center_xy)
    sx, sy = src[:, 0], src[:, 1]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros(h * w)
    for dy_i, dx_i, weight in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                               (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + dy_i, x0 + dx_i
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros(h * w)
        vals[valid] = mask[yy[valid], xx[valid]]
        out += weight * vals
    return out.reshape(h, w)


def sample_background(rng: np.random.Generator, lum_min: float) -> np.ndarray:
    """Uniform RGB, rejecting colors within the dark-luminance band."""
    while True:
        color = rng.random(3)
        if float(color @ LUMA) >= lum_min:
            return color


def _stamp_lines(lines: Sequence[str], spec: RenderSpec, atlas: GlyphAtlas,
                 origin_xy: Tuple[int, int]):
    """Stamp glyph masks; returns (ink mask, per-line tight boxes)."""
    h, w = spec.image_size
    ink = np.zeros((h, w))
    boxes = []
    ox, oy = origin_xy
    for li, line in enumerate(lines):
        top = oy + li * spec.pitch_y
        lo_x = lo_y = None
        hi_x = hi_y = None
        for ci, ch in enumerate(line.encode("latin-1")):
            if not atlas.has(ch):
                raise RenderRejection(f"no glyph for byte {int(ch)}")
            mask = atlas.mask(ch)
            left = ox + ci * spec.pitch_x
            rows, cols = np.nonzero(mask)
            if rows.size == 0:
                continue
            ink[top + rows, left + cols] = 1.0
            y0, y1 = top + rows.min(), top + rows.max() + 1
            x0, x1 = left + cols.min(), left + cols.max() + 1
            lo_x = x0 if lo_x is None else min(lo_x, x0)
            lo_y = y0 if lo_y is None else min(lo_y, y0)
            hi_x = x1 if hi_x is None else max(hi_x, x1)
            hi_y = y1 if hi_y is None else max(hi_y, y1)
        if lo_x is None:
            raise RenderRejection(f"line {li} has no ink")
        boxes.append(TextBox(text=line.rstrip(" "), box=(lo_x, lo_y, hi_x, hi_y)))
    return ink, boxes


def render_with(text: str, spec: RenderSpec, atlas: GlyphAtlas, theta: float,
                translation: Tuple[int, int], background: np.ndarray) -> RenderedSample:
    """Deterministic rendering with explicit transform and background."""
    h, w = spec.image_size
    lines = wrap_text(text, spec.max_cols)
    if len(lines) > spec.max_lines:
        raise RenderRejection(
            f"text needs {len(lines)} lines, image fits {spec.max_lines}")
    dx, dy = int(translation[0]), int(translation[1])
    origin = (spec.anchor + dx, spec.anchor + dy)

    ink, layout_boxes = _stamp_lines(lines, spec, atlas, origin)

    block = np.array([
        min(b.box[0] for b in layout_boxes),
        min(b.box[1] for b in layout_boxes),
        max(b.box[2] for b in layout_boxes),
        max(b.box[3] for b in layout_boxes),
    ])
    center = np.array([(block[0] + block[2]) / 2.0, (block[1] + block[3]) / 2.0])

    if theta != 0.0:
        corners = np.array([[block[0], block[1]], [block[2], block[1]],
                            [block[2], block[3]], [block[0], block[3]]])
        rotated = rotate_points(corners, theta, center)
        if (rotated[:, 0].min() < 0 or rotated[:, 1].min() < 0
                or rotated[:, 0].max() > w or rotated[:, 1].max() > h):
            raise RenderRejection("rotated text block exceeds image bounds")
        ink = rotate_mask_bilinear(ink, theta, center)
    else:
        if block[0] < 0 or block[1] < 0 or block[2] > w or block[3] > h:
            raise RenderRejection("text block exceeds image bounds")

    image = background[None, None, :] * (1.0 - ink[:, :, None])

    final_boxes = []
    for b in layout_boxes:
        x0, y0, x1, y1 = b.box
        if theta != 0.0:
            corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
            rc = rotate_points(corners, theta, center)
            fx0, fy0 = max(rc[:, 0].min(), 0.0), max(rc[:, 1].min(), 0.0)
            fx1, fy1 = min(rc[:, 0].max(), float(w)), min(rc[:, 1].max(), float(h))
        else:
            fx0, fy0, fx1, fy1 = float(x0), float(y0), float(x1), float(y1)
        final_boxes.append(TextBox(text=b.text, box=(fx0, fy0, fx1, fy1)))

    return RenderedSample(image=image, text=text, line_boxes=final_boxes,
                          layout_boxes=layout_boxes, rotation_deg=float(theta),
                          translation_px=(dx, dy))


def render(text: str, spec: RenderSpec, atlas: GlyphAtlas = DEFAULT_ATLAS,
           seed: int = 0) -> RenderedSample:
    """Render one text with transform and background sampled from the seed."""
    rng = make_rng(seed)
    theta = float(rng.uniform(-spec.theta_max, spec.theta_max)) if spec.theta_max > 0 else 0.0
    dx = int(rng.integers(-spec.d_max, spec.d_max + 1)) if spec.d_max > 0 else 0
    dy = int(rng.integers(-spec.d_max, spec.d_max + 1)) if spec.d_max > 0 else 0
    background = sample_background(rng, spec.bg_luminance_min)
    return render_with(text, spec, atlas, theta, (dx, dy), background)


@dataclass
class SynthPair:
    source: RenderedSample
    target: RenderedSample


def synth_pair(src_text: str, tgt_text: str, spec: RenderSpec,
               seed: int, atlas: GlyphAtlas = DEFAULT_ATLAS) -> SynthPair:
    """Render both sides with one sampled transform and independent backgrounds.

    Raises RenderRejection when either side overflows the image.
    """
    rng = make_rng(seed)
    theta = float(rng.uniform(-spec.theta_max, spec.theta_max)) if spec.theta_max > 0 else 0.0
    dx = int(rng.integers(-spec.d_max, spec.d_max + 1)) if spec.d_max > 0 else 0
    dy = int(rng.integers(-spec.d_max, spec.d_max + 1)) if spec.d_max > 0 else 0
    bg_src = sample_background(rng, spec.bg_luminance_min)
    bg_tgt = sample_background(rng, spec.bg_luminance_min)
    source = render_with(src_text, spec, atlas, theta, (dx, dy), bg_src)
    target = render_with(tgt_text, spec, atlas, theta, (dx, dy), bg_tgt)
    return SynthPair(source=source, target=target)


@dataclass
class BuildStats:
    accepted: int = 0
    rejected: int = 0
    skipped_lines: int = 0
    split_sizes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def read_corpus(path) -> Tuple[List[Tuple[str, str]], int]:
    """Tab-separated parallel corpus; malformed lines are skipped (counted)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus not found: {path}")
    pairs, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                skipped += 1
                continue
            pairs.append((parts[0].strip(), parts[1].strip()))
    return pairs, skipped


def build_dataset(pairs: Sequence[Tuple[str, str]], spec: RenderSpec, out_dir,
                  split_ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0, atlas: GlyphAtlas = DEFAULT_ATLAS) -> BuildStats:
    """Render a parallel corpus into a dataset directory.

    Writes ``images/{split}/{id}.{src,tgt}.png`` and one JSONL manifest per
    split; output is a pure function of (pairs, spec, seed).
    """
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {split_ratios}")
    out_dir = Path(out_dir)
    stats = BuildStats()

    accepted: List[Tuple[str, SynthPair, str, str]] = []
    for idx, (s_text, t_text) in enumerate(pairs):
        try:
            pair = synth_pair(s_text, t_text, spec, seed=_pair_seed(seed, idx), atlas=atlas)
        except RenderRejection:
            stats.rejected += 1
            continue
        accepted.append((f"{idx:06d}", pair, s_text, t_text))
    stats.accepted = len(accepted)

    order = make_rng(seed, 7).permutation(len(accepted))
    n = len(accepted)
    n_train = int(round(split_ratios[0] * n))
    n_valid = int(round(split_ratios[1] * n))
    n_valid = min(n_valid, n - n_train)
    bounds = {"train": (0, n_train), "valid": (n_train, n_train + n_valid),
              "test": (n_train + n_valid, n)}

    for split, (lo, hi) in bounds.items():
        records = []
        chosen = sorted(order[lo:hi])  # stable on-disk ordering by sample index
        for j in chosen:
            sample_id, pair, s_text, t_text = accepted[j]
            src_rel = f"images/{split}/{sample_id}.src.png"
            tgt_rel = f"images/{split}/{sample_id}.tgt.png"
            save_image(out_dir / src_rel, pair.source.image)
            save_image(out_dir / tgt_rel, pair.target.image)
            records.append(ManifestRecord(
                id=sample_id, src_image_path=src_rel, tgt_image_path=tgt_rel,
                src_text=s_text, tgt_text=t_text,
                src_boxes=[b.to_dict() for b in pair.source.line_boxes],
                tgt_boxes=[b.to_dict() for b in pair.target.line_boxes],
                rotation_deg=pair.source.rotation_deg,
                translation_px=list(pair.source.translation_px),
            ))
        manifest = out_dir / f"manifest.{split}.jsonl"
        manifest.parent.mkdir(parents=True, exist_ok=True)
        with open(manifest, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
        stats.split_sizes[split] = len(records)
    return stats


def _pair_seed(seed: int, index: int) -> int:
    seq = np.random.SeedSequence((seed, 11, index))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
