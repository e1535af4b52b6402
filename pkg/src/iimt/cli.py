"""The ``iimt`` command: dataset synthesis, staged training, translation,
and evaluation.

Stage ordering is enforced through checkpoint presence: the tokenizer
trains first, the teacher needs the tokenizer, and the translation model
needs both. Every command is deterministic under a fixed seed, writes only
below its output directory, and echoes its effective configuration there.

Exit codes: 0 success, 1 usage or configuration error, 2 partial failure,
3 runtime abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import config as cfgmod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import build_examples, load_manifest
from .errors import ConfigError, ContractError, NanLossError
from .imgio import load_image, save_image
from .metrics import evaluate_corpus
from .model import IimtConfig, IimtModel, model_from_checkpoint, model_state_config
from .optim import AdamW
from .report import write_loss_curve, write_metric_report
from .seeding import make_rng
from .synthesis import RenderSpec, build_dataset, read_corpus
from .teacher import (TeacherConfig, TeacherModel, TeacherTrainConfig,
                      teacher_from_checkpoint, teacher_state_config, train_teacher)
from .tokenizer import (Stage1Config, TokenizerConfig, TokenizerModel,
                        tokenizer_from_checkpoint, tokenizer_state_config,
                        train_stage1)
from .training import Stage2Config, train_stage2

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="iimt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="overrides every config seed")
        p.add_argument("--out", required=True, help="output directory")

    p_synth = sub.add_parser("synth", help="render a parallel corpus into a dataset")
    p_synth.add_argument("--corpus", required=True, help="TSV file: source<TAB>target")
    p_synth.add_argument("--ratios", default="0.8,0.1,0.1",
                         help="train,valid,test split ratios")
    common(p_synth)

    p_train = sub.add_parser("train", help="train one pipeline stage")
    p_train.add_argument("stage", choices=["tokenizer", "teacher", "iimt"])
    p_train.add_argument("--data", required=True, help="dataset directory from synth")
    p_train.add_argument("--tokenizer", help="tokenizer checkpoint (teacher/iimt stages)")
    p_train.add_argument("--teacher", help="teacher checkpoint (iimt stage)")
    common(p_train)

    p_tr = sub.add_parser("translate", help="translate source images")
    p_tr.add_argument("--model", required=True, help="model checkpoint or run dir")
    p_tr.add_argument("--tokenizer", required=True, help="tokenizer checkpoint or run dir")
    p_tr.add_argument("inputs", nargs="+", help="input PNG images")
    common(p_tr)

    p_ev = sub.add_parser("evaluate", help="score generated images against a manifest")
    p_ev.add_argument("--outputs", required=True, help="directory of generated images")
    p_ev.add_argument("--manifest", required=True, help="dataset manifest JSONL")
    p_ev.add_argument("--dataset-root", help="root for manifest image paths")
    p_ev.add_argument("--bucket-edges", default="0.1,0.3,0.6")
    common(p_ev)
    return parser


_NAMESPACES = ("render", "tokenizer", "stage1", "teacher", "teacher_train",
               "model", "stage2")


def _load_kv(args) -> Dict[str, str]:
    """Config file plus flag overrides; one file may serve every command."""
    kv = cfgmod.load_kv(args.config) if args.config else {}
    bad = sorted(k for k in kv if "." in k and k.split(".", 1)[0] not in _NAMESPACES)
    if bad:
        raise ConfigError(f"unknown config namespaces: {bad} "
                          f"(known: {', '.join(_NAMESPACES)})")
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    return kv


def _resolve_checkpoint(path_str: str, *names: str) -> Path:
    path = Path(path_str)
    if path.is_dir():
        for name in names:
            if (path / name).exists():
                return path / name
        raise ConfigError(f"no checkpoint ({', '.join(names)}) in {path}")
    return path


def _echo(out_dir: Path, instances: Dict[str, object], extra: Optional[Dict] = None):
    cfgmod.write_kv(out_dir / "effective_config.txt",
                    cfgmod.effective_config(instances, extra))


# -- synth ------------------------------------------------------------------


def cmd_synth(args) -> int:
    kv = _load_kv(args)
    spec = cfgmod.apply_namespace(RenderSpec(), kv, "render")
    seed = int(kv.get("seed", "0"))
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if len(ratios) != 3:
        raise ConfigError("--ratios needs three comma-separated values")

    pairs, skipped = read_corpus(args.corpus)
    out_dir = Path(args.out)
    stats = build_dataset(pairs, spec, out_dir, split_ratios=ratios, seed=seed)
    stats.skipped_lines = skipped
    _echo(out_dir, {"render": spec}, {"seed": seed, "ratios": args.ratios,
                                      "corpus": args.corpus})
    with open(out_dir / "synth_stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"synth: {stats.accepted} accepted, {stats.rejected} rejected, "
          f"{skipped} corpus lines skipped -> {out_dir}")
    return EXIT_OK


# -- train ------------------------------------------------------------------


def _train_images(data_dir: Path) -> List[np.ndarray]:
    records = load_manifest(data_dir / "manifest.train.jsonl")
    images = []
    for rec in records:
        images.append(load_image(data_dir / rec.src_image_path))
        images.append(load_image(data_dir / rec.tgt_image_path))
    return images


def _jsonl_logger(path: Path):
    fh = open(path, "a", encoding="utf-8")

    def log(rec: dict):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return log, fh


def _load_resume(out_dir: Path):
    last = out_dir / "last.bin"
    if last.exists():
        return load_checkpoint(last)
    return None


def cmd_train_tokenizer(args, kv: Dict[str, str]) -> int:
    model_cfg = cfgmod.apply_namespace(TokenizerConfig(), kv, "tokenizer")
    train_cfg = cfgmod.apply_namespace(Stage1Config(), kv, "stage1")
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = _train_images(data_dir)

    resume = _load_resume(out_dir)
    model = optimizer = None
    start_step = 0
    if resume is not None:
        model = tokenizer_from_checkpoint(resume.config, resume.arrays)
        optimizer = AdamW(model.named_parameters(), lr=train_cfg.lr,
                          betas=(train_cfg.beta1, train_cfg.beta2),
                          weight_decay=train_cfg.weight_decay)
        optimizer.load_state_arrays(resume.arrays)
        start_step = int(resume.meta.get("step", 0))

    log_fn, fh = _jsonl_logger(out_dir / "train_log.jsonl")
    save_every = max(1, train_cfg.steps // 10)

    def hook(rec, m, opt):
        log_fn(rec)
        step = rec["step"] + 1
        if step % save_every == 0 or step == train_cfg.steps:
            arrays = {**m.state(), **opt.state_arrays()}
            save_checkpoint(out_dir / "last.bin", tokenizer_state_config(m.cfg),
                            arrays, meta={"step": step, "kind": "tokenizer"})

    try:
        model, log = train_stage1(images, train_cfg, model_cfg=model_cfg,
                                  model=model, start_step=start_step,
                                  optimizer=optimizer, log_hook=hook)
    finally:
        fh.close()
    save_checkpoint(out_dir / "checkpoint.bin", tokenizer_state_config(model.cfg),
                    model.state(), meta={"step": train_cfg.steps, "kind": "tokenizer"})
    write_loss_curve(log, out_dir / "loss_curve.png")
    _echo(out_dir, {"tokenizer": model_cfg, "stage1": train_cfg},
          {"data": str(data_dir), "stage": "tokenizer"})
    print(f"train tokenizer: {train_cfg.steps} steps -> {out_dir / 'checkpoint.bin'}")
    return EXIT_OK


def _require_tokenizer(args, out_dir: Path) -> Checkpoint:
    if args.tokenizer:
        path = _resolve_checkpoint(args.tokenizer, "checkpoint.bin")
    else:
        path = out_dir.parent / "tokenizer" / "checkpoint.bin"
    if not Path(path).exists():
        raise ConfigError(
            f"tokenizer checkpoint not found at {path}; run `iimt train tokenizer` first")
    return load_checkpoint(path)


def _require_teacher(args, out_dir: Path) -> Checkpoint:
    if args.teacher:
        path = _resolve_checkpoint(args.teacher, "checkpoint.bin")
    else:
        path = out_dir.parent / "teacher" / "checkpoint.bin"
    if not Path(path).exists():
        raise ConfigError(
            f"teacher checkpoint not found at {path}; run `iimt train teacher` first")
    return load_checkpoint(path)


def cmd_train_teacher(args, kv: Dict[str, str]) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tok_ck = _require_tokenizer(args, out_dir)
    tokenizer = tokenizer_from_checkpoint(tok_ck.config, tok_ck.arrays)

    model_cfg = cfgmod.apply_namespace(TeacherConfig(), kv, "teacher")
    model_cfg.image_size = tokenizer.cfg.image_size
    model_cfg.token_grid = tokenizer.cfg.grid
    model_cfg.codebook_size = tokenizer.cfg.codebook_size
    train_cfg = cfgmod.apply_namespace(TeacherTrainConfig(), kv, "teacher_train")

    data_dir = Path(args.data)
    examples = build_examples(load_manifest(data_dir / "manifest.train.jsonl"),
                              tokenizer, root=data_dir)

    resume = _load_resume(out_dir)
    model = optimizer = None
    start_step = 0
    if resume is not None:
        model = teacher_from_checkpoint(resume.config, resume.arrays)
        optimizer = AdamW(model.named_parameters(), lr=train_cfg.lr,
                          weight_decay=train_cfg.weight_decay)
        optimizer.load_state_arrays(resume.arrays)
        start_step = int(resume.meta.get("step", 0))

    log_fn, fh = _jsonl_logger(out_dir / "train_log.jsonl")
    save_every = max(1, train_cfg.steps // 10)

    def hook(rec, m, opt):
        log_fn(rec)
        step = rec["step"] + 1
        if step % save_every == 0 or step == train_cfg.steps:
            save_checkpoint(out_dir / "last.bin", teacher_state_config(m.cfg),
                            {**m.state(), **opt.state_arrays()},
                            meta={"step": step, "kind": "teacher"})

    try:
        model, log = train_teacher(examples, train_cfg, model_cfg=model_cfg,
                                   model=model, start_step=start_step,
                                   optimizer=optimizer, log_hook=hook)
    finally:
        fh.close()
    save_checkpoint(out_dir / "checkpoint.bin", teacher_state_config(model.cfg),
                    model.state(), meta={"step": train_cfg.steps, "kind": "teacher"})
    write_loss_curve(log, out_dir / "loss_curve.png")
    _echo(out_dir, {"teacher": model_cfg, "teacher_train": train_cfg},
          {"data": str(data_dir), "stage": "teacher"})
    print(f"train teacher: {train_cfg.steps} steps -> {out_dir / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_train_iimt(args, kv: Dict[str, str]) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tok_ck = _require_tokenizer(args, out_dir)
    tokenizer = tokenizer_from_checkpoint(tok_ck.config, tok_ck.arrays)

    model_cfg = cfgmod.apply_namespace(IimtConfig(), kv, "model")
    model_cfg.image_size = tokenizer.cfg.image_size
    model_cfg.token_grid = tokenizer.cfg.grid
    model_cfg.codebook_size = tokenizer.cfg.codebook_size
    train_cfg = cfgmod.apply_namespace(Stage2Config(), kv, "stage2")

    teacher = None
    if train_cfg.gamma > 0:
        teach_ck = _require_teacher(args, out_dir)
        teacher = teacher_from_checkpoint(teach_ck.config, teach_ck.arrays)

    data_dir = Path(args.data)
    train_examples = build_examples(load_manifest(data_dir / "manifest.train.jsonl"),
                                    tokenizer, root=data_dir)
    valid_path = data_dir / "manifest.valid.jsonl"
    valid_examples = None
    if valid_path.exists():
        valid_records = load_manifest(valid_path)
        if valid_records:
            valid_examples = build_examples(valid_records, tokenizer, root=data_dir)

    model_cfg.dropout = train_cfg.dropout
    resume = _load_resume(out_dir)
    start_step = 0
    optimizer = None
    if resume is not None:
        student = model_from_checkpoint(resume.config, resume.arrays)
        optimizer = AdamW(student.named_parameters(), lr=train_cfg.lr,
                          betas=(0.9, 0.999), weight_decay=train_cfg.weight_decay)
        optimizer.load_state_arrays(resume.arrays)
        start_step = int(resume.meta.get("step", 0))
    else:
        student = IimtModel(model_cfg, make_rng(train_cfg.seed, 201))

    log_fn, fh = _jsonl_logger(out_dir / "train_log.jsonl")

    def hook(rec, m, opt, epoch_step):
        log_fn(rec)
        if epoch_step is not None:
            save_checkpoint(out_dir / "last.bin", model_state_config(m.cfg),
                            {**m.state(), **opt.state_arrays()},
                            meta={"step": epoch_step, "kind": "iimt"})

    try:
        result = train_stage2(train_examples, valid_examples, student, teacher,
                              train_cfg, start_step=start_step,
                              optimizer=optimizer, log_hook=hook)
    finally:
        fh.close()
    save_checkpoint(out_dir / "checkpoint.bin", model_state_config(student.cfg),
                    student.state(), meta={"step": result.steps_run, "kind": "iimt"})
    save_checkpoint(out_dir / "averaged.bin", model_state_config(student.cfg),
                    result.averaged_state,
                    meta={"step": result.steps_run, "kind": "iimt", "averaged": True})
    write_loss_curve(result.log, out_dir / "loss_curve.png")
    _echo(out_dir, {"model": model_cfg, "stage2": train_cfg},
          {"data": str(data_dir), "stage": "iimt",
           "stopped_early": result.stopped_early})
    print(f"train iimt: {result.steps_run} steps"
          f"{' (early stop)' if result.stopped_early else ''} -> {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    kv = _load_kv(args)
    if args.stage == "tokenizer":
        return cmd_train_tokenizer(args, kv)
    if args.stage == "teacher":
        return cmd_train_teacher(args, kv)
    return cmd_train_iimt(args, kv)


# -- translate ----------------------------------------------------------------


def cmd_translate(args) -> int:
    kv = _load_kv(args)
    tok_path = _resolve_checkpoint(args.tokenizer, "checkpoint.bin")
    model_path = _resolve_checkpoint(args.model, "averaged.bin", "checkpoint.bin")
    tok_ck = load_checkpoint(tok_path)
    tokenizer = tokenizer_from_checkpoint(tok_ck.config, tok_ck.arrays)
    model_ck = load_checkpoint(model_path)
    model = model_from_checkpoint(model_ck.config, model_ck.arrays)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    errors = []
    produced = 0
    for input_path in args.inputs:
        input_path = Path(input_path)
        try:
            image = load_image(input_path)
            result = model.translate(image, tokenizer)
        except Exception as exc:  # per-file failure keeps the batch going
            errors.append({"input": str(input_path), "error": str(exc)})
            print(f"translate: {input_path}: {exc}", file=sys.stderr)
            continue
        stem = input_path.stem
        save_image(out_dir / f"{stem}.out.png", result.target_image)
        (out_dir / f"{stem}.out.txt").write_text(result.target_text + "\n",
                                                 encoding="utf-8")
        if result.truncated:
            print(f"translate: {input_path}: text decode hit the length cap",
                  file=sys.stderr)
        produced += 1
    if errors:
        with open(out_dir / "translate_errors.json", "w", encoding="utf-8") as fh:
            json.dump(errors, fh, sort_keys=True, indent=2)
            fh.write("\n")
    _echo(out_dir, {}, {"model": str(model_path), "tokenizer": str(tok_path),
                        "inputs": len(args.inputs), "produced": produced,
                        "seed": kv.get("seed", "0")})
    print(f"translate: {produced}/{len(args.inputs)} images -> {out_dir}")
    return EXIT_PARTIAL if errors else EXIT_OK


# -- evaluate -------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    kv = _load_kv(args)
    edges = tuple(float(x) for x in args.bucket_edges.split(",") if x.strip())
    report = evaluate_corpus(args.outputs, args.manifest,
                             dataset_root=args.dataset_root, bucket_edges=edges)
    out_dir = Path(args.out)
    paths = write_metric_report(report, out_dir)
    _echo(out_dir, {}, {"outputs": args.outputs, "manifest": args.manifest,
                        "bucket_edges": args.bucket_edges,
                        "seed": kv.get("seed", "0")})
    print(f"evaluate: BLEU {report.bleu:.2f}  Structure-BLEU {report.structure_bleu:.2f}"
          f"  SSIM {report.ssim:.4f}  WER {report.wer:.3f} -> {paths['json']}")
    return EXIT_OK


# -- entry ---------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "translate":
            return cmd_translate(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        raise _UsageError(f"unknown command {args.command}")
    except NanLossError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ContractError, FileNotFoundError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
