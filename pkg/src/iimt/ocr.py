"""Deterministic template-matching OCR used as the evaluation oracle.

Pipeline: binarize against the modal background color, shortlist skew
candidates by maximizing a sub-pixel row-projection profile of the ink,
de-rotate and split lines on blank row gaps, segment characters on the
fixed glyph pitch, and classify each cell to the nearest atlas glyph by
minimal mask distance. Two matching stages share that structure:

- stage A works on the de-rotated binarized field at integer grid phases;
  on clean axis-aligned renders it reaches distance zero and is exact.
- stage B re-scores the best candidates against the original image by
  forward-rotating the glyph templates through the same bilinear model
  the renderer uses, searching sub-pixel grid phases. Both sides of the
  comparison then carry identical resampling blur, which is what makes
  rotated 1-pixel strokes recoverable.

Line boxes are tight ink bounds in the de-rotated frame mapped back
through the winning rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .glyphs import GlyphAtlas, DEFAULT_ATLAS, GLYPH_H, GLYPH_W
from .synthesis import LUMA, TextBox, rotate_points, rotate_mask_bilinear

FG_THRESHOLD_FACTOR = 0.5   # foreground: luminance below this fraction of background
_BAND_THRESHOLD = 0.35      # de-rotated ink counts toward line bands above this
LINE_MERGE_GAP = 2          # blank-row gaps this small stay within one line
MAX_ANGLE_CANDIDATES = 6
_REFINE_ANGLES = 3          # stage-B candidates
_SUBPIXEL_STEPS = (-1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0)
_PROFILE_KERNEL = np.array([1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0]) / 4.0
_PROFILE_BINS_PER_ROW = 4


@dataclass
class OcrResult:
    boxes: List[TextBox] = field(default_factory=list)

    @property
    def full_text(self) -> str:
        """Line texts concatenated in reading order."""
        return " ".join(b.text for b in self.boxes)


def _modal_background(image: np.ndarray) -> np.ndarray:
    arr8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    flat = arr8.reshape(-1, 3)
    colors, counts = np.unique(flat, axis=0, return_counts=True)
    return colors[counts.argmax()].astype(float) / 255.0


def _ink_alpha(image: np.ndarray) -> Tuple[np.ndarray, float]:
    """Estimated ink coverage per pixel (1 = black glyph, 0 = background)."""
    bg_lum = float(_modal_background(image) @ LUMA)
    lum = np.clip(image, 0.0, 1.0) @ LUMA
    if bg_lum <= 0.0:
        return np.zeros(image.shape[:2]), 0.0
    return np.clip(1.0 - lum / bg_lum, 0.0, 1.0), bg_lum


def _profile_energy(y_coords: np.ndarray, weights: np.ndarray) -> float:
    """Energy of a smoothed sub-pixel row-projection profile."""
    q = y_coords * _PROFILE_BINS_PER_ROW
    base = np.floor(q).astype(int)
    frac = q - base
    base -= base.min()
    n = base.max() + 2
    hist = np.bincount(base, weights=weights * (1.0 - frac), minlength=n).astype(float)
    hist += np.bincount(base + 1, weights=weights * frac, minlength=n)
    smooth = np.convolve(hist, _PROFILE_KERNEL)
    return float((smooth**2).sum())


def candidate_skews(alpha: np.ndarray, max_deg: float = 10.0, step: float = 0.2,
                    max_candidates: int = MAX_ANGLE_CANDIDATES) -> List[float]:
    """Shortlist of de-skew angles ranked by row-projection energy.

    Always contains 0.0; nearby candidates (within two grid steps) are
    deduplicated so the list spans distinct local maxima.
    """
    ys, xs = np.nonzero(alpha > 0.05)
    if ys.size == 0:
        return [0.0]
    w = alpha[ys, xs]
    cx = alpha.shape[1] / 2.0
    cy = alpha.shape[0] / 2.0
    n_half = int(round(max_deg / step))
    angles = np.array([(k - n_half) * step for k in range(2 * n_half + 1)])
    rads = np.radians(-angles)
    # y' = sin(-a) (x - cx) + cos(-a) (y - cy) + cy, for all angles at once
    y_rot = (np.sin(rads)[:, None] * (xs - cx)[None, :]
             + np.cos(rads)[:, None] * (ys - cy)[None, :] + cy)
    scored = [(_profile_energy(y_rot[i], w), float(angles[i]))
              for i in range(len(angles))]
    scored.sort(key=lambda t: (-t[0], abs(t[1])))
    chosen: List[float] = []
    for _, angle in scored:
        if len(chosen) >= max_candidates:
            break
        if all(abs(angle - c) > 2 * step + 1e-9 for c in chosen):
            chosen.append(angle)
    if not any(abs(c) < 1e-9 for c in chosen):
        chosen.append(0.0)
    return chosen


def estimate_skew(alpha_or_mask: np.ndarray, max_deg: float = 10.0,
                  step: float = 0.2) -> float:
    """Single best angle by projection energy (first shortlist entry)."""
    return candidate_skews(np.asarray(alpha_or_mask, dtype=float),
                           max_deg=max_deg, step=step, max_candidates=1)[0]


def _line_bands(mask: np.ndarray) -> List[Tuple[int, int]]:
    occupied = np.nonzero(mask.any(axis=1))[0]
    if occupied.size == 0:
        return []
    bands = []
    start = prev = occupied[0]
    for r in occupied[1:]:
        if r - prev > LINE_MERGE_GAP:
            bands.append((int(start), int(prev)))
            start = r
        prev = r
    bands.append((int(start), int(prev)))
    return bands


# -- stage A: integer-grid matching on the de-rotated field ---------------


def _cells(field: np.ndarray, top: int, left: int, n_cells: int, pitch_x: int,
           width: int) -> np.ndarray:
    """Extract [n, GLYPH_H, width] cell windows, zero-padded at borders."""
    h, w = field.shape
    out = np.zeros((n_cells, GLYPH_H, width))
    for k in range(n_cells):
        x = left + k * pitch_x
        r0, r1 = max(top, 0), min(top + GLYPH_H, h)
        c0, c1 = max(x, 0), min(x + width, w)
        if r1 > r0 and c1 > c0:
            out[k, r0 - top:r1 - top, c0 - x:c1 - x] = field[r0:r1, c0:c1]
    return out


def _padded_templates(atlas: GlyphAtlas, pitch_x: int):
    """Templates widened to the pitch (spacing column is blank ink)."""
    ids, stack = atlas.template_stack()
    pad = pitch_x - GLYPH_W
    if pad > 0:
        stack = np.pad(stack, ((0, 0), (0, 0), (0, pad)))
    flat = stack.reshape(len(ids), -1).astype(float)
    return ids, flat, flat.sum(axis=1)


def _read_line(field: np.ndarray, mask: np.ndarray, band: Tuple[int, int],
               pitch_x: int, templates):
    """Integer-phase decode of one line band.

    L1 distance to binary templates equals Hamming distance on binary
    input; uncovered ink mass is charged so a phase cannot win by
    explaining nothing.
    """
    r0, r1 = band
    sub = mask[r0:r1 + 1]
    cols = np.nonzero(sub.any(axis=0))[0]
    c0, c1 = int(cols.min()), int(cols.max())

    lo = max(r0 - 1, 0)
    hi = min(r1 + 1, field.shape[0] - 1)
    band_mass = float(field[lo:hi + 1, max(c0 - 1, 0):c1 + 2].sum())

    ids, tmpl_flat, tmpl_mass = templates
    best = None
    top_lo = min(r1 - GLYPH_H + 1, r0)
    for top in range(top_lo, r0 + 1):
        for dx in range(GLYPH_W + 1):
            left = c0 - dx
            n_cells = math.ceil((c1 + 1 - left) / pitch_x)
            flat = _cells(field, top, left, n_cells, pitch_x, pitch_x).reshape(n_cells, -1)
            cell_mass = flat.sum(axis=1)
            # L1 distance to binary templates: |v| + |t| - 2 v.t
            dist = cell_mass[:, None] + tmpl_mass[None, :] - 2.0 * (flat @ tmpl_flat.T)
            choice = dist.argmin(axis=1)
            match_cost = float(dist[np.arange(n_cells), choice].sum())
            score = match_cost + max(0.0, band_mass - float(cell_mass.sum()))
            if best is None or score < best[0] - 1e-12:
                best = (score, choice.copy(), top, left)
    score, choice, top, left = best
    text = bytes(int(ids[c]) for c in choice).decode("latin-1").strip(" ")
    return score, text, (r0, c0, r1 + 1, c1 + 1), (top, left)


# -- stage B: forward-model sub-pixel matching on the original image ------


class _ForwardMatcher:
    """Scores glyph templates forward-rotated through the renderer's
    bilinear model against the original ink field."""

    def __init__(self, alpha: np.ndarray, angle: float, center: np.ndarray,
                 ids: np.ndarray, stack: np.ndarray):
        self.alpha = alpha
        self.angle = angle
        self.center = center
        self.ids = ids
        self.pad = np.zeros((len(ids), GLYPH_H + 2, GLYPH_W + 2))
        self.pad[:, 1:-1, 1:-1] = stack
        rad = math.radians(abs(angle))
        self.box_w = int(math.ceil(GLYPH_W * math.cos(rad) + GLYPH_H * math.sin(rad))) + 2
        self.box_h = int(math.ceil(GLYPH_H * math.cos(rad) + GLYPH_W * math.sin(rad))) + 2

    def match_cell(self, q_xy: Tuple[float, float]):
        """(best template index, cost, covered ink) for one grid cell.

        q_xy is the cell origin in the de-rotated frame (may be
        fractional); the comparison happens in the original frame.
        """
        h, w = self.alpha.shape
        p0 = rotate_points(np.array([q_xy], dtype=float), self.angle, self.center)[0]
        bx0 = int(math.floor(p0[0])) - 1
        by0 = int(math.floor(p0[1])) - 1
        ys, xs = np.mgrid[by0:by0 + self.box_h, bx0:bx0 + self.box_w]
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        src = rotate_points(pts - p0, -self.angle, np.zeros(2))
        sx, sy = src[:, 0], src[:, 1]
        x0 = np.floor(sx).astype(int)
        y0 = np.floor(sy).astype(int)
        fx, fy = sx - x0, sy - y0

        def gather(yy, xx):
            yy = np.clip(yy + 1, 0, GLYPH_H + 1)
            xx = np.clip(xx + 1, 0, GLYPH_W + 1)
            return self.pad[:, yy, xx]

        pred = (((1 - fx) * (1 - fy))[None] * gather(y0, x0)
                + (fx * (1 - fy))[None] * gather(y0, x0 + 1)
                + ((1 - fx) * fy)[None] * gather(y0 + 1, x0)
                + (fx * fy)[None] * gather(y0 + 1, x0 + 1))
        obs = np.zeros(self.box_h * self.box_w)
        yy, xx = ys.ravel(), xs.ravel()
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        obs[ok] = self.alpha[yy[ok], xx[ok]]
        core = ((sx > -0.5) & (sx < GLYPH_W - 0.5)
                & (sy > -0.5) & (sy < GLYPH_H - 0.5)).astype(float)
        dist = (np.abs(pred - obs[None]) * core[None]).sum(axis=1)
        k = int(dist.argmin())
        covered = float((obs * core).sum())
        return k, float(dist[k]), covered

    def _eval_phase(self, left: float, top: float, c1: int, pitch_x: int):
        n_cells = math.ceil((c1 + 1 - left) / pitch_x)
        total = covered = 0.0
        chars = []
        for k in range(n_cells):
            ch, cost, cov = self.match_cell((left + k * pitch_x, top))
            total += cost
            covered += cov
            chars.append(ch)
        return total, covered, chars

    def read_line(self, anchor: Tuple[int, int], c1: int, pitch_x: int):
        """Sub-pixel phase refinement around the integer-stage anchor.

        Pass 1 scans a 3x3 integer neighborhood; pass 2 scans fractional
        offsets around the winner. Returns (cost, covered, text).
        """
        a_top, a_left = anchor
        best = None
        for top in (a_top - 1, a_top, a_top + 1):
            for left in (a_left - 1, a_left, a_left + 1):
                result = self._eval_phase(float(left), float(top), c1, pitch_x)
                if best is None or result[0] < best[0][0] - 1e-12:
                    best = (result, top, left)
        (total, covered, chars), top, left = best
        for fy in _SUBPIXEL_STEPS:
            for fx in _SUBPIXEL_STEPS:
                if fy == 0.0 and fx == 0.0:
                    continue
                result = self._eval_phase(left + fx, top + fy, c1, pitch_x)
                if result[0] < total - 1e-12:
                    total, covered, chars = result
        text = bytes(int(self.ids[c]) for c in chars).decode("latin-1").strip(" ")
        return total, covered, text


def _read_rotation_integer(field, mask, pitch_x, templates):
    total = 0.0
    lines = []
    for band in _line_bands(mask):
        cost, text, box, anchor = _read_line(field, mask, band, pitch_x, templates)
        total += cost
        lines.append((text, box, anchor))
    return total, lines


def oracle_ocr(image: np.ndarray, atlas: GlyphAtlas = DEFAULT_ATLAS,
               max_skew: float = 10.0, skew_step: float = 0.2,
               char_spacing: int = 1) -> OcrResult:
    """Extract per-line texts and boxes from a rendered or generated image.

    An image without foreground pixels yields an empty (valid) result.
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    alpha, _ = _ink_alpha(image)
    fg = alpha > FG_THRESHOLD_FACTOR
    if not fg.any():
        return OcrResult([])

    center = np.array([w / 2.0, h / 2.0])
    pitch_x = GLYPH_W + char_spacing
    templates_a = _padded_templates(atlas, pitch_x)
    ids, stack = atlas.template_stack()

    # stage A: rank candidate angles by integer-grid matching cost
    ranked = []
    for angle in candidate_skews(alpha, max_deg=max_skew, step=skew_step):
        if angle != 0.0:
            field_r = rotate_mask_bilinear(alpha, -angle, center)
        else:
            field_r = alpha
        mask_r = field_r >= _BAND_THRESHOLD
        if not mask_r.any():
            continue
        cost, lines = _read_rotation_integer(field_r, mask_r, pitch_x, templates_a)
        ranked.append((cost, angle, lines, mask_r))
        if cost == 0.0:  # clean axis-aligned render: exact already
            break
    if not ranked:
        return OcrResult([])
    ranked.sort(key=lambda t: t[0])

    if ranked[0][0] == 0.0:
        cost, angle, lines, _ = ranked[0]
        decoded = [(text, box) for text, box, _ in lines]
    else:
        # stage B on the most promising angles
        total_mass = float(alpha.sum())
        best = None
        for cost_a, angle, lines, mask_r in ranked[:_REFINE_ANGLES]:
            matcher = _ForwardMatcher(alpha, angle, center,
                                      ids, stack.astype(float))
            total, covered, decoded_b = 0.0, 0.0, []
            for _, box, anchor in lines:
                r0, c0, r1, c1 = box
                cost_l, cov_l, text_l = matcher.read_line(anchor, c1 - 1, pitch_x)
                total += cost_l
                covered += cov_l
                decoded_b.append((text_l, box))
            score = total + max(0.0, total_mass - covered)
            if best is None or score < best[0]:
                best = (score, angle, decoded_b)
        _, angle, decoded = best

    boxes: List[TextBox] = []
    for text, (br0, bc0, br1, bc1) in decoded:
        if not text:
            continue
        corners = np.array([[bc0, br0], [bc1, br0], [bc1, br1], [bc0, br1]], dtype=float)
        mapped = rotate_points(corners, angle, center)
        x0 = float(np.clip(mapped[:, 0].min(), 0, w))
        x1 = float(np.clip(mapped[:, 0].max(), 0, w))
        y0 = float(np.clip(mapped[:, 1].min(), 0, h))
        y1 = float(np.clip(mapped[:, 1].max(), 0, h))
        if x1 > x0 and y1 > y0:
            boxes.append(TextBox(text=text, box=(x0, y0, x1, y1)))
    return OcrResult(boxes)
