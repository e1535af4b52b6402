import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iimt import metrics as mt
from iimt import synthesis as sy
from iimt.errors import ContractError
from iimt.ocr import OcrResult
from iimt.synthesis import RenderSpec, TextBox, render


# -- independent oracles ---------------------------------------------------


def bleu_oracle(hyps, refs):
    """Brute-force n-gram counting with explicit list scans."""
    match, total = [0] * 4, [0] * 4
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = h.split(), r.split()
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, 5):
            hgrams = [tuple(ht[i:i + n]) for i in range(len(ht) - n + 1)]
            rgrams = [tuple(rt[i:i + n]) for i in range(len(rt) - n + 1)]
            total[n - 1] += len(hgrams)
            for g in set(hgrams):
                match[n - 1] += min(hgrams.count(g), rgrams.count(g))
    if any(t == 0 for t in total) or any(m == 0 for m in match):
        return 0.0
    logp = sum(math.log(m / t) for m, t in zip(match, total)) / 4
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(logp)


def edit_distance_oracle(hyp, ref):
    """Memoized recursive Levenshtein, independent of the DP-table path."""
    h, r = tuple(hyp.split()), tuple(ref.split())

    @functools.lru_cache(maxsize=None)
    def go(i, j):
        if i == len(h):
            return len(r) - j
        if j == len(r):
            return len(h) - i
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1,
                   go(i + 1, j + 1) + (h[i] != r[j]))

    return go(0, 0)


def ssim_oracle(a, b):
    """Direct windowed-formula evaluation with explicit loops."""
    a = np.asarray(a, dtype=float) * 255.0
    b = np.asarray(b, dtype=float) * 255.0
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    half = 5
    xs = np.arange(-half, half + 1)
    k1d = np.exp(-(xs**2) / (2 * 1.5**2))
    k1d /= k1d.sum()
    kern = np.outer(k1d, k1d)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    h, w, chans = a.shape
    vals = []
    for ch in range(chans):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                sw = sx = sy_ = sxx = syy = sxy = 0.0
                for di in range(-half, half + 1):
                    for dj in range(-half, half + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w:
                            wgt = kern[di + half, dj + half]
                            x, y = a[ii, jj, ch], b[ii, jj, ch]
                            sw += wgt
                            sx += wgt * x
                            sy_ += wgt * y
                            sxx += wgt * x * x
                            syy += wgt * y * y
                            sxy += wgt * x * y
                mx, my = sx / sw, sy_ / sw
                vx, vy = sxx / sw - mx * mx, syy / sw - my * my
                cov = sxy / sw - mx * my
                acc += ((2 * mx * my + c1) * (2 * cov + c2)) / \
                       ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(acc / (h * w))
    return float(np.mean(vals))


def random_corpus(rng, n_sentences, vocab=("a", "b", "c", "d", "e")):
    corpus = []
    for _ in range(n_sentences):
        k = rng.integers(1, 9)
        corpus.append(" ".join(rng.choice(vocab, size=k)))
    return corpus


# -- IoU --------------------------------------------------------------------


class TestIou:
    def test_identical(self):
        assert mt.iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert mt.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_one_seventh(self):
        assert mt.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_bounded(self, seed):
        rng = np.random.default_rng(seed)
        def box():
            x0, y0 = rng.uniform(0, 10, 2)
            return (x0, y0, x0 + rng.uniform(0.1, 5), y0 + rng.uniform(0.1, 5))
        a, b = box(), box()
        ab, ba = mt.iou(a, b), mt.iou(b, a)
        assert ab == ba
        assert 0.0 <= ab <= 1.0
        assert mt.iou(a, a) == 1.0


# -- BLEU --------------------------------------------------------------------


class TestBleu:
    def test_identity_corpus_scores_100(self):
        corpus = ["the cat sat on the mat", "a b c d e"]
        assert mt.bleu(corpus, corpus) == pytest.approx(100.0)

    def test_zero_fourgram_matches_give_zero(self):
        assert mt.bleu(["a b c d"], ["a b x d"]) == 0.0

    def test_short_hypothesis_no_fourgrams_gives_zero(self):
        assert mt.bleu(["a b"], ["a b"]) == 0.0

    def test_empty_corpus_undefined(self):
        with pytest.raises(mt.UndefinedScoreError):
            mt.bleu([], [])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            mt.bleu(["a"], ["a", "b"])

    def test_brevity_penalty_direction(self):
        long_ref = "a b c d e f g h"
        assert mt.bleu(["a b c d"], [long_ref]) < mt.bleu([long_ref], [long_ref])

    def test_matches_brute_force_oracle_on_random_corpora(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            hyps = random_corpus(rng, n)
            refs = random_corpus(rng, n)
            assert mt.bleu(hyps, refs) == pytest.approx(
                bleu_oracle(hyps, refs), abs=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        hyps = random_corpus(rng, 5)
        refs = random_corpus(rng, 5)
        perm = rng.permutation(5)
        assert mt.bleu(hyps, refs) == pytest.approx(
            mt.bleu([hyps[i] for i in perm], [refs[i] for i in perm]), abs=1e-12)


# -- WER ---------------------------------------------------------------------


class TestWer:
    def test_identity(self):
        assert mt.wer("a b c", "a b c") == 0.0

    def test_single_substitution(self):
        assert mt.wer("a x c", "a b c") == pytest.approx(1 / 3)

    def test_empty_reference_undefined(self):
        with pytest.raises(mt.UndefinedScoreError):
            mt.wer("a", "")

    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            hyp = " ".join(rng.choice(list("abcde"), size=rng.integers(0, 8)))
            ref = " ".join(rng.choice(list("abcde"), size=rng.integers(1, 8)))
            assert mt.word_edit_distance(hyp, ref) == edit_distance_oracle(hyp, ref)

    def test_can_exceed_one(self):
        assert mt.wer("a b c d e", "x") == 5.0


# -- SSIM --------------------------------------------------------------------


class TestSsim:
    def test_identical_images(self):
        rng = np.random.default_rng(3)
        img = rng.random((16, 16, 3))
        assert mt.ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_binary_image_scores_low(self):
        rng = np.random.default_rng(4)
        img = (rng.random((32, 32, 3)) > 0.5).astype(float)
        assert mt.ssim(img, 1.0 - img) < 0.5

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            mt.ssim(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))

    def test_matches_direct_formula_on_8x8(self):
        rng = np.random.default_rng(5)
        for _ in range(3):
            a = rng.random((8, 8, 3))
            b = rng.random((8, 8, 3))
            assert mt.ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-9)

    def test_noise_monotonicity(self):
        rng = np.random.default_rng(6)
        base = rng.random((16, 16, 3))
        lo = mt.ssim(base, np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1))
        hi = mt.ssim(base, np.clip(base + rng.normal(0, 0.1, base.shape), 0, 1))
        assert hi < lo


# -- Structure-BLEU ----------------------------------------------------------


def flat_spec():
    return RenderSpec(theta_max=0.0, d_max=0)


class TestStructureBleu:
    def test_identity_image(self):
        out = render("a b c d e f g h", flat_spec(), seed=0)
        score, stats = mt.structure_bleu(out.image, out.image)
        assert score == pytest.approx(100.0)
        assert stats["matched_pairs"] == len(out.line_boxes)

    def test_displaced_text_zero_structure_but_full_bleu(self):
        out = render("a b c d", flat_spec(), seed=1)
        h, w, _ = out.image.shape
        bg = out.image[-1, -1].copy()
        shifted = np.tile(bg, (h, w, 1))
        shifted[16:, 16:] = out.image[:-16, :-16]
        score, stats = mt.structure_bleu(shifted, out.image)
        assert score == 0.0
        assert stats["zero_matches"]
        from iimt.ocr import oracle_ocr
        assert mt.bleu([oracle_ocr(shifted).full_text],
                       [oracle_ocr(out.image).full_text]) == pytest.approx(100.0)

    def test_three_box_scene_matches_hand_enumeration(self):
        # three lines; the last one is moved beyond the IoU threshold
        text = "a b c d a b c d a b c d"
        out = render(text, flat_spec(), seed=2)
        assert len(out.line_boxes) == 3
        img = out.image.copy()
        x0, y0, x1, y1 = [int(v) for v in out.line_boxes[2].box]
        band = img[y0:y1 + 1].copy()
        img[y0:y1 + 1] = img[-1, -1]
        img[y0 + 12:y1 + 13] = band  # drop the last line 12 px
        score, stats = mt.structure_bleu(img, out.image)

        # Algorithm trace by hand: OCR both, best-IoU per hypothesis,
        # keep >= 0.5, concatenate in reading order, corpus BLEU
        from iimt.ocr import oracle_ocr
        hyp, ref = oracle_ocr(img), oracle_ocr(out.image)
        kept = []
        for hb in hyp.boxes:
            scores = [mt.iou(hb.box, rb.box) for rb in ref.boxes]
            best = int(np.argmax(scores))
            if max(scores) >= 0.5:
                kept.append((hb.text, ref.boxes[best].text))
        assert stats["matched_pairs"] == len(kept) == 2
        expect = mt.bleu([" ".join(h for h, _ in kept)],
                         [" ".join(r for _, r in kept)])
        assert score == pytest.approx(expect, abs=1e-12)

    def test_matching_allows_shared_references(self):
        # two hypothesis boxes may keep the same best reference
        hyp = OcrResult([TextBox("ab", (0, 0, 10, 5)), TextBox("ab", (0, 1, 10, 7))])
        ref = OcrResult([TextBox("ab", (0, 0, 10, 6))])
        pairs = mt.match_text_boxes(hyp, ref, threshold=0.5)
        assert len(pairs) == 2


# -- corpus evaluation --------------------------------------------------------


def tiny_dataset(tmp_path, n=5):
    words = ["ab", "cd", "ef", "gh"]
    rng = np.random.default_rng(7)
    pairs = []
    for _ in range(n):
        s = " ".join(rng.choice(words, size=4))
        t = " ".join(rng.choice(words, size=4))
        pairs.append((s, t))
    spec = RenderSpec(theta_max=0.0, d_max=2)
    stats = sy.build_dataset(pairs, spec, tmp_path, split_ratios=(0.0, 0.0, 1.0), seed=8)
    assert stats.split_sizes["test"] == n
    return tmp_path / "manifest.test.jsonl"


class TestEvaluateCorpus:
    def test_references_score_perfectly(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        out_dir = tmp_path / "outputs"
        out_dir.mkdir()
        from iimt.dataset import load_manifest
        for rec in load_manifest(manifest):
            src_name = rec.src_image_path.split("/")[-1].replace(".png", ".out.png")
            data = (tmp_path / rec.tgt_image_path).read_bytes()
            (out_dir / src_name).write_bytes(data)
        report = mt.evaluate_corpus(out_dir, manifest, dataset_root=tmp_path)
        assert report.bleu == pytest.approx(100.0)
        assert report.structure_bleu == pytest.approx(100.0)
        assert report.ssim == pytest.approx(1.0, abs=1e-9)
        assert report.wer == 0.0
        assert not report.missing_outputs

    def test_missing_outputs_scored_as_empty(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        out_dir = tmp_path / "none"
        out_dir.mkdir()
        report = mt.evaluate_corpus(out_dir, manifest, dataset_root=tmp_path)
        assert len(report.missing_outputs) == 5
        assert report.bleu == 0.0
        assert report.structure_bleu == 0.0
        assert all(ex["missing"] for ex in report.per_example)

    def test_aggregates_consistent_with_per_example(self, tmp_path):
        manifest = tiny_dataset(tmp_path)
        out_dir = tmp_path / "outputs"
        out_dir.mkdir()
        from iimt.dataset import load_manifest
        for i, rec in enumerate(load_manifest(manifest)):
            if i % 2 == 0:  # half the outputs are references, half missing
                src_name = rec.src_image_path.split("/")[-1].replace(".png", ".out.png")
                (out_dir / src_name).write_bytes((tmp_path / rec.tgt_image_path).read_bytes())
        report = mt.evaluate_corpus(out_dir, manifest, dataset_root=tmp_path)
        assert report.ssim == pytest.approx(
            np.mean([ex["ssim"] for ex in report.per_example]), abs=1e-12)
        assert sum(b["count"] for b in report.buckets) == len(report.per_example)
        # bucket BLEU of a bucket holding every example equals corpus BLEU
        full = [b for b in report.buckets if b["count"] == len(report.per_example)]
        for b in full:
            assert b["bleu"] == pytest.approx(report.bleu, abs=1e-12)
