import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from iimt.cli import main
from iimt.checkpoint import load_checkpoint


CORPUS = [
    ("das gut rot tag", "the good red day"),
    ("wort hier gut tag", "word here good day"),
    ("rot hund ein tag", "red dog one day"),
    ("gut tag das wort", "good day the word"),
    ("ein wort rot gut", "one word red good"),
    ("das tier gut hier", "the pet good here"),
    ("gut hund das tag", "good dog the day"),
    ("rot tag ein hund", "red day one dog"),
    ("ein tier rot wort", "one pet red word"),
    ("wort gut ein tier", "word good one pet"),
]

MICRO_CFG = """
render.theta_max = 4.0
render.d_max = 2
tokenizer.codebook_size = 64
tokenizer.code_dim = 16
tokenizer.model_dim = 16
tokenizer.num_heads = 2
tokenizer.ffn_dim = 32
tokenizer.enc_layers = 1
tokenizer.dec_layers = 1
stage1.steps = 12
stage1.batch_size = 4
teacher.model_dim = 12
teacher.num_heads = 2
teacher.ffn_dim = 24
teacher.text_layers = 1
teacher.img_layers = 1
teacher_train.steps = 8
teacher_train.batch_size = 4
model.model_dim = 16
model.num_heads = 2
model.ffn_dim = 32
model.enc_layers = 2
model.txt_layers = 1
model.img_layers = 1
model.tap_layer = 1
stage2.max_steps = 8
stage2.batch_size = 2
stage2.eval_interval = 4
seed = 5
"""


def write_inputs(tmp_path):
    corpus = tmp_path / "corpus.tsv"
    corpus.write_text("\n".join(f"{s}\t{t}" for s, t in CORPUS), encoding="utf-8")
    cfg = tmp_path / "micro.cfg"
    cfg.write_text(MICRO_CFG, encoding="utf-8")
    return corpus, cfg


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth + all three training stages at micro scale."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus, cfg = write_inputs(root)
    assert main(["synth", "--corpus", str(corpus), "--out", str(root / "data"),
                 "--config", str(cfg), "--ratios", "0.7,0.15,0.15"]) == 0
    assert main(["train", "tokenizer", "--data", str(root / "data"),
                 "--out", str(root / "runs/tokenizer"), "--config", str(cfg)]) == 0
    assert main(["train", "teacher", "--data", str(root / "data"),
                 "--out", str(root / "runs/teacher"), "--config", str(cfg)]) == 0
    assert main(["train", "iimt", "--data", str(root / "data"),
                 "--out", str(root / "runs/iimt"), "--config", str(cfg)]) == 0
    return root, cfg


class TestSynth:
    def test_manifest_and_echo(self, tmp_path):
        corpus, cfg = write_inputs(tmp_path)
        rc = main(["synth", "--corpus", str(corpus), "--out", str(tmp_path / "d"),
                   "--config", str(cfg)])
        assert rc == 0
        assert (tmp_path / "d" / "effective_config.txt").exists()
        total = 0
        for split in ("train", "valid", "test"):
            manifest = tmp_path / "d" / f"manifest.{split}.jsonl"
            total += sum(1 for line in manifest.read_text().splitlines() if line)
        assert total <= len(CORPUS)

    def test_same_seed_identical_directories(self, tmp_path):
        corpus, cfg = write_inputs(tmp_path)
        for d in ("a", "b"):
            assert main(["synth", "--corpus", str(corpus), "--out",
                         str(tmp_path / d), "--config", str(cfg), "--seed", "7"]) == 0
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_bad_corpus_lines_skipped(self, tmp_path):
        corpus = tmp_path / "c.tsv"
        corpus.write_text("ok gut\tok good\nno tab here\n", encoding="utf-8")
        _, cfg = write_inputs(tmp_path)
        assert main(["synth", "--corpus", str(corpus), "--out", str(tmp_path / "d"),
                     "--config", str(cfg)]) == 0
        stats = json.loads((tmp_path / "d" / "synth_stats.json").read_text())
        assert stats["skipped_lines"] == 1

    def test_missing_corpus_is_usage_error(self, tmp_path):
        assert main(["synth", "--corpus", str(tmp_path / "nope.tsv"),
                     "--out", str(tmp_path / "d")]) == 1


class TestTrainOrdering:
    def test_iimt_before_tokenizer_fails_actionably(self, tmp_path, capsys):
        corpus, cfg = write_inputs(tmp_path)
        assert main(["synth", "--corpus", str(corpus), "--out",
                     str(tmp_path / "data"), "--config", str(cfg)]) == 0
        rc = main(["train", "iimt", "--data", str(tmp_path / "data"),
                   "--out", str(tmp_path / "runs/iimt"), "--config", str(cfg)])
        assert rc == 1
        assert "train tokenizer" in capsys.readouterr().err

    def test_teacher_before_tokenizer_fails(self, tmp_path):
        corpus, cfg = write_inputs(tmp_path)
        assert main(["synth", "--corpus", str(corpus), "--out",
                     str(tmp_path / "data"), "--config", str(cfg)]) == 0
        rc = main(["train", "teacher", "--data", str(tmp_path / "data"),
                   "--out", str(tmp_path / "runs/teacher"), "--config", str(cfg)])
        assert rc == 1


class TestTrainArtifacts:
    def test_log_schema_and_checkpoints(self, pipeline):
        root, _ = pipeline
        log_path = root / "runs/iimt/train_log.jsonl"
        records = [json.loads(l) for l in log_path.read_text().splitlines() if l]
        assert records
        for rec in records:
            assert set(rec) == {"step", "l_iimt", "l_ocr", "l_tit", "l_kd",
                                "l_total", "lr"}
        for name in ("checkpoint.bin", "averaged.bin", "last.bin",
                     "loss_curve.png", "effective_config.txt"):
            assert (root / "runs/iimt" / name).exists(), name

    def test_resume_reaches_same_final_step(self, tmp_path, pipeline):
        root, cfg_path = pipeline
        cfg_text = cfg_path.read_text().replace("stage1.steps = 12",
                                                "stage1.steps = 6")
        short_cfg = tmp_path / "short.cfg"
        short_cfg.write_text(cfg_text)
        long_cfg = tmp_path / "long.cfg"
        long_cfg.write_text(cfg_path.read_text())
        out = tmp_path / "tok"
        # "interrupt" after 6 steps, then resume with the full budget
        assert main(["train", "tokenizer", "--data", str(root / "data"),
                     "--out", str(out), "--config", str(short_cfg)]) == 0
        assert int(load_checkpoint(out / "last.bin").meta["step"]) == 6
        assert main(["train", "tokenizer", "--data", str(root / "data"),
                     "--out", str(out), "--config", str(long_cfg)]) == 0
        assert int(load_checkpoint(out / "last.bin").meta["step"]) == 12
        steps = [json.loads(l)["step"] for l in
                 (out / "train_log.jsonl").read_text().splitlines() if l]
        assert steps == list(range(6)) + list(range(6, 12))


class TestTranslate:
    def test_single_image_round_trip(self, pipeline, tmp_path):
        root, _ = pipeline
        src = sorted((root / "data/images/train").glob("*.src.png"))[0]
        out = tmp_path / "out"
        rc = main(["translate", "--model", str(root / "runs/iimt"),
                   "--tokenizer", str(root / "runs/tokenizer"),
                   "--out", str(out), str(src)])
        assert rc == 0
        png = out / (src.stem + ".out.png")
        txt = out / (src.stem + ".out.txt")
        assert png.exists() and txt.exists()
        from iimt.imgio import load_image
        assert load_image(png).shape == (64, 64, 3)

    def test_partial_failure_exit_code(self, pipeline, tmp_path):
        root, _ = pipeline
        srcs = sorted((root / "data/images/train").glob("*.src.png"))[:2]
        corrupt = tmp_path / "corrupt.png"
        corrupt.write_bytes(b"not a png at all")
        out = tmp_path / "out"
        rc = main(["translate", "--model", str(root / "runs/iimt"),
                   "--tokenizer", str(root / "runs/tokenizer"), "--out", str(out),
                   str(srcs[0]), str(corrupt), str(srcs[1])])
        assert rc == 2
        assert len(list(out.glob("*.out.png"))) == 2
        errors = json.loads((out / "translate_errors.json").read_text())
        assert len(errors) == 1
        assert "corrupt.png" in errors[0]["input"]

    def test_sidecar_matches_offline_greedy_decode(self, pipeline, tmp_path):
        root, _ = pipeline
        src = sorted((root / "data/images/train").glob("*.src.png"))[0]
        out = tmp_path / "out"
        assert main(["translate", "--model", str(root / "runs/iimt"),
                     "--tokenizer", str(root / "runs/tokenizer"),
                     "--out", str(out), str(src)]) == 0
        # drop exactly the newline the writer appends; an untrained model's
        # byte soup may itself end in newlines
        sidecar = (out / (src.stem + ".out.txt")).read_text(encoding="utf-8")[:-1]

        from iimt.imgio import load_image
        from iimt.model import model_from_checkpoint
        from iimt.tokenizer import tokenizer_from_checkpoint
        model_ck = load_checkpoint(root / "runs/iimt/averaged.bin")
        tok_ck = load_checkpoint(root / "runs/tokenizer/checkpoint.bin")
        model = model_from_checkpoint(model_ck.config, model_ck.arrays)
        tokenizer = tokenizer_from_checkpoint(tok_ck.config, tok_ck.arrays)
        replay = model.translate(load_image(src), tokenizer)
        assert replay.target_text == sidecar


class TestEvaluate:
    def flat_dataset(self, tmp_path):
        """Axis-aligned dataset: the OCR noise floor is exactly zero there."""
        corpus, cfg = write_inputs(tmp_path)
        flat_cfg = tmp_path / "flat.cfg"
        flat_cfg.write_text(MICRO_CFG.replace("render.theta_max = 4.0",
                                              "render.theta_max = 0.0"))
        data = tmp_path / "flat_data"
        assert main(["synth", "--corpus", str(corpus), "--out", str(data),
                     "--config", str(flat_cfg), "--ratios", "1.0,0.0,0.0"]) == 0
        return data

    def reference_outputs(self, data, outputs):
        from iimt.dataset import load_manifest
        outputs.mkdir()
        records = load_manifest(data / "manifest.train.jsonl")
        for rec in records:
            name = Path(rec.src_image_path).name.replace(".png", ".out.png")
            (outputs / name).write_bytes((data / rec.tgt_image_path).read_bytes())
        return records

    def test_references_score_perfectly(self, tmp_path):
        data = self.flat_dataset(tmp_path)
        outputs = tmp_path / "outputs"
        self.reference_outputs(data, outputs)
        out = tmp_path / "report"
        rc = main(["evaluate", "--outputs", str(outputs),
                   "--manifest", str(data / "manifest.train.jsonl"),
                   "--dataset-root", str(data), "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["bleu"] == pytest.approx(100.0)
        assert report["structure_bleu"] == pytest.approx(100.0)
        assert report["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert "matched_pairs" in report["match_stats"]
        assert (out / "wer_buckets.csv").exists()
        assert (out / "wer_buckets.png").exists()

    def test_corpus_values_match_recomputed_aggregates(self, tmp_path):
        from iimt.metrics import bleu
        from iimt.ocr import oracle_ocr
        from iimt.imgio import load_image
        data = self.flat_dataset(tmp_path)
        outputs = tmp_path / "outputs"
        records = self.reference_outputs(data, outputs)
        out = tmp_path / "report"
        assert main(["evaluate", "--outputs", str(outputs),
                     "--manifest", str(data / "manifest.train.jsonl"),
                     "--dataset-root", str(data), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        hyps = [oracle_ocr(load_image(outputs / Path(r.src_image_path).name
                                      .replace(".png", ".out.png"))).full_text
                for r in records]
        assert report["bleu"] == pytest.approx(
            bleu(hyps, [r.tgt_text for r in records]), abs=1e-9)


class TestUsage:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["synth", "--out", "x"]) == 1

    def test_unknown_config_namespace(self, tmp_path):
        corpus, _ = write_inputs(tmp_path)
        bad = tmp_path / "bad.cfg"
        bad.write_text("tokenzier.steps = 5\n")
        assert main(["synth", "--corpus", str(corpus), "--out", str(tmp_path / "d"),
                     "--config", str(bad)]) == 1
