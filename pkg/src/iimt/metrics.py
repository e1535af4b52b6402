"""Translation and image-quality metrics.

Text metrics run over the deterministic OCR oracle: corpus BLEU on the
transcribed output images against reference texts, and Structure-BLEU,
which first matches transcribed line boxes between generated and
reference images by IoU and scores only pairs overlapping at least 0.5.
Image quality uses windowed SSIM. Corpus evaluation buckets examples by
the recognition difficulty (word error rate) of their source images.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import ManifestRecord, load_manifest
from .errors import ContractError
from .glyphs import GlyphAtlas, DEFAULT_ATLAS
from .imgio import load_image
from .ocr import OcrResult, oracle_ocr


class UndefinedScoreError(ValueError):
    """The metric is undefined for this input (empty corpus/reference)."""


# -- boxes ----------------------------------------------------------------


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


# -- BLEU -----------------------------------------------------------------


def _ngrams(tokens: List[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU: whitespace tokens, clipped n-gram precision n=1..4,
    geometric mean, brevity penalty; scaled to 0..100. No smoothing."""
    if len(hypotheses) != len(references):
        raise ContractError(
            f"corpus sizes differ: {len(hypotheses)} vs {len(references)}")
    if not hypotheses:
        raise UndefinedScoreError("BLEU is undefined on an empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h_tok, r_tok = hyp.split(), ref.split()
        hyp_len += len(h_tok)
        ref_len += len(r_tok)
        for n in range(1, 5):
            h_counts = _ngrams(h_tok, n)
            r_counts = _ngrams(r_tok, n)
            totals[n - 1] += max(len(h_tok) - n + 1, 0)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if any(t == 0 for t in totals) or any(m == 0 for m in matches):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * math.exp(log_prec)


# -- WER ------------------------------------------------------------------


def word_edit_distance(hyp: str, ref: str) -> int:
    """Word-level Levenshtein distance."""
    h, r = hyp.split(), ref.split()
    prev = list(range(len(h) + 1))
    for i, r_tok in enumerate(r, start=1):
        cur = [i] + [0] * len(h)
        for j, h_tok in enumerate(h, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (r_tok != h_tok))
        prev = cur
    return prev[len(h)]


def wer(hyp: str, ref: str) -> float:
    """Word error rate: edit distance over reference length."""
    ref_len = len(ref.split())
    if ref_len == 0:
        raise UndefinedScoreError("WER is undefined for an empty reference")
    return word_edit_distance(hyp, ref) / ref_len


# -- SSIM -----------------------------------------------------------------

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 255.0


def _gaussian_kernel() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-(xs**2) / (2.0 * _SSIM_SIGMA**2))
    return k / k.sum()


def _filter_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable centered correlation with zero padding.

    Explicit pad + 'valid' keeps the output aligned even when the kernel
    is longer than the image side.
    """
    half = len(k) // 2

    def one(v):
        return np.convolve(np.pad(v, half), k, mode="valid")

    out = np.apply_along_axis(one, 1, x)
    return np.apply_along_axis(one, 0, out)


def _local_mean(x: np.ndarray, k: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return _filter_same(x, k) / norm


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, Gaussian window 11x11 sigma 1.5, dynamic range 255.

    Computed per channel and averaged. Windows overlapping the border are
    renormalized over their in-image support, so the metric is defined for
    any image at least 1x1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    a = a * _SSIM_L
    b = b * _SSIM_L
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    k = _gaussian_kernel()
    norm = _filter_same(np.ones(a.shape[:2]), k)
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _local_mean(x, k, norm)
        my = _local_mean(y, k, norm)
        mxx = _local_mean(x * x, k, norm)
        myy = _local_mean(y * y, k, norm)
        mxy = _local_mean(x * y, k, norm)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        values.append(float(np.mean(num / den)))
    return float(np.mean(values))


# -- Structure-BLEU -------------------------------------------------------


def match_text_boxes(hyp: OcrResult, ref: OcrResult,
                     threshold: float = 0.5) -> List[Tuple[str, str]]:
    """Best-IoU matching of hypothesis boxes onto reference boxes.

    Each hypothesis box keeps its single best reference (ties keep the
    first, i.e. reading order); pairs below the threshold are dropped.
    References may be matched by several hypotheses.
    """
    pairs = []
    for h in hyp.boxes:
        best_score, best_ref = 0.0, None
        for r in ref.boxes:
            score = iou(h.box, r.box)
            if score > best_score:
                best_score, best_ref = score, r
        if best_ref is not None and best_score >= threshold:
            pairs.append((h.text, best_ref.text))
    return pairs


def concat_pairs(pairs: Sequence[Tuple[str, str]]) -> Tuple[str, str]:
    """Matched pair texts joined in reading order, one string per side."""
    return (" ".join(h for h, _ in pairs), " ".join(r for _, r in pairs))


def structure_bleu(gen_image: np.ndarray, ref_image: np.ndarray,
                   atlas: GlyphAtlas = DEFAULT_ATLAS) -> Tuple[float, dict]:
    """Location-aware BLEU over IoU-matched transcribed line pairs.

    Matched texts are concatenated in reading order per image side and
    scored as one corpus sentence pair.
    """
    hyp = oracle_ocr(gen_image, atlas)
    ref = oracle_ocr(ref_image, atlas)
    pairs = match_text_boxes(hyp, ref)
    stats = {
        "matched_pairs": len(pairs),
        "hyp_boxes": len(hyp.boxes),
        "ref_boxes": len(ref.boxes),
        "zero_matches": not pairs,
    }
    if not pairs:
        return 0.0, stats
    hyp_cat, ref_cat = concat_pairs(pairs)
    return bleu([hyp_cat], [ref_cat]), stats


# -- corpus evaluation -----------------------------------------------------


@dataclass
class MetricReport:
    bleu: float = 0.0
    structure_bleu: float = 0.0
    ssim: float = 0.0
    wer: float = 0.0
    per_example: List[dict] = field(default_factory=list)
    match_stats: Dict[str, int] = field(default_factory=dict)
    buckets: List[dict] = field(default_factory=list)
    missing_outputs: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "structure_bleu": self.structure_bleu,
            "ssim": self.ssim,
            "wer": self.wer,
            "per_example": self.per_example,
            "match_stats": self.match_stats,
            "buckets": self.buckets,
            "missing_outputs": self.missing_outputs,
        }


def find_output_image(outputs_dir: Path, record: ManifestRecord) -> Optional[Path]:
    stem = Path(record.src_image_path).name
    for name in (stem.replace(".png", ".out.png"),
                 f"{record.id}.out.png", f"{record.id}.png"):
        candidate = outputs_dir / name
        if candidate.exists():
            return candidate
    return None


def evaluate_corpus(outputs_dir, manifest_path, dataset_root=None,
                    atlas: GlyphAtlas = DEFAULT_ATLAS,
                    bucket_edges: Sequence[float] = (0.1, 0.3, 0.6)) -> MetricReport:
    """Score one generated image per manifest record.

    Missing outputs are listed and scored as empty hypotheses (text
    metrics 0, SSIM against black). Examples are bucketed by the WER of
    the oracle transcription of their *source* image against the source
    text, and BLEU is reported per bucket.
    """
    outputs_dir = Path(outputs_dir)
    records = load_manifest(manifest_path)
    root = Path(dataset_root) if dataset_root is not None else Path(manifest_path).parent

    report = MetricReport()
    hyp_texts: List[str] = []
    ref_texts: List[str] = []
    all_pairs: List[Tuple[str, str]] = []  # per-image concatenated matched texts
    ssim_values: List[float] = []
    edit_total = 0
    ref_words_total = 0
    n_hyp_boxes = n_ref_boxes = zero_match_examples = line_pairs_total = 0

    for rec in records:
        ref_img = load_image(root / rec.tgt_image_path)
        src_img = load_image(root / rec.src_image_path)
        out_path = find_output_image(outputs_dir, rec)

        src_wer = wer(oracle_ocr(src_img, atlas).full_text, rec.src_text)

        if out_path is None:
            report.missing_outputs.append(rec.id)
            gen_img = np.zeros_like(ref_img)
        else:
            gen_img = load_image(out_path)

        hyp_res = oracle_ocr(gen_img, atlas)
        ref_res = oracle_ocr(ref_img, atlas)
        hyp_text = hyp_res.full_text
        pairs = match_text_boxes(hyp_res, ref_res)
        if pairs:
            s_bleu = bleu(*[[t] for t in concat_pairs(pairs)])
            all_pairs.append(concat_pairs(pairs))
        else:
            s_bleu = 0.0
        n_matched_pairs = len(pairs)
        n_hyp_boxes += len(hyp_res.boxes)
        n_ref_boxes += len(ref_res.boxes)
        zero_match_examples += not pairs

        example_ssim = ssim(gen_img, ref_img)
        ssim_values.append(example_ssim)
        hyp_texts.append(hyp_text)
        ref_texts.append(rec.tgt_text)
        edit_total += word_edit_distance(hyp_text, rec.tgt_text)
        ref_words_total += len(rec.tgt_text.split())

        line_pairs_total += n_matched_pairs
        report.per_example.append({
            "id": rec.id,
            "bleu": bleu([hyp_text], [rec.tgt_text]),
            "structure_bleu": s_bleu,
            "ssim": example_ssim,
            "wer": wer(hyp_text, rec.tgt_text),
            "src_wer": src_wer,
            "matched_pairs": n_matched_pairs,
            "missing": out_path is None,
        })

    if not records:
        raise UndefinedScoreError("empty manifest")

    report.bleu = bleu(hyp_texts, ref_texts)
    report.structure_bleu = bleu([h for h, _ in all_pairs],
                                 [r for _, r in all_pairs]) if all_pairs else 0.0
    report.ssim = float(np.mean(ssim_values))
    report.wer = edit_total / max(ref_words_total, 1)
    report.match_stats = {
        "matched_pairs": line_pairs_total,
        "hyp_boxes": n_hyp_boxes,
        "ref_boxes": n_ref_boxes,
        "examples_with_zero_matches": zero_match_examples,
    }

    edges = list(bucket_edges) + [math.inf]
    lo = 0.0
    for hi in edges:
        ids = [i for i, ex in enumerate(report.per_example)
               if lo <= ex["src_wer"] < hi]
        bucket = {"lo": lo, "hi": hi if hi != math.inf else None, "count": len(ids)}
        if ids:
            bucket["bleu"] = bleu([hyp_texts[i] for i in ids],
                                  [ref_texts[i] for i in ids])
        else:
            bucket["bleu"] = None
        report.buckets.append(bucket)
        lo = hi
    return report
