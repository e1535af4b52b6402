"""Stage-2 joint optimization of the translation model.

Four terms over a frozen tokenizer's targets: visual-token prediction,
source-text recognition from the tapped encoder states, target-text
prediction, and distillation against a frozen text-to-image teacher.
The total is a weighted sum; by default all weights are one. Training
uses decoupled-weight-decay Adam with polynomial LR decay, early stopping
on validation loss, and arithmetic averaging of the last N epoch
checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from collections import deque
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import IimtExample
from .errors import ConfigError, ContractError, NanLossError
from .model import EOS, IimtModel
from .optim import AdamW, polynomial_decay
from .seeding import SeedStream, make_rng
from .teacher import TeacherModel, teacher_distributions

_STEP_TAG = 402

TERMS = ("l_iimt", "l_ocr", "l_tit", "l_kd")


@dataclass
class Stage2Config:
    alpha: float = 1.0       # recognition (OCR) weight
    beta_w: float = 1.0      # text-translation (TIT) weight
    gamma: float = 1.0       # distillation weight
    lr: float = 1e-3
    lr_end: float = 1e-4
    lr_power: float = 1.0
    weight_decay: float = 0.001
    label_smoothing: float = 0.1
    dropout: float = 0.1
    max_steps: int = 1200
    batch_size: int = 8
    eval_interval: int = 100         # steps per "epoch" for snapshots/validation
    early_stop_patience: int = 10    # epochs without improvement
    avg_last_n: int = 10
    seed: int = 0
    per_token_normalize: bool = True
    kd_temperature: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta_w, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.early_stop_patience < 1 or self.avg_last_n < 1:
            raise ConfigError("patience and avg_last_n must be >= 1")


def _reduction(cfg: Stage2Config) -> str:
    return "mean" if cfg.per_token_normalize else "sum"


def _with_eos(ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Teacher-forced (inputs, targets) pair for a byte sequence."""
    ids = np.asarray(ids, dtype=int)
    return np.concatenate([[EOS], ids]), np.concatenate([ids, [EOS]])


def example_losses(ex: IimtExample, student: IimtModel,
                   teacher: Optional[TeacherModel], cfg: Stage2Config,
                   need: Sequence[str], train: bool = False,
                   seeds: Optional[SeedStream] = None) -> Dict[str, Tensor]:
    """Requested loss terms for one example, sharing forward passes.

    The encoder runs once; the target-text states feed both the text loss
    and the image decoder's cross-attention (teacher-forced gold text).
    """
    red = _reduction(cfg)
    out: Dict[str, Tensor] = {}
    enc_final, enc_tap = student.encode(ex.x, train=train, seeds=seeds)

    txt_states = None
    if student.target_text_decoder is not None:
        t_in, t_tgt = _with_eos(ex.t)
        txt_states = student.target_text_decoder.states(enc_final, t_in,
                                                        train=train, seeds=seeds)
        if "l_tit" in need:
            logits = student.target_text_decoder.logits(txt_states)
            out["l_tit"] = ad.cross_entropy(logits, t_tgt,
                                            label_smoothing=cfg.label_smoothing,
                                            reduction=red)
    elif "l_tit" in need:
        raise ConfigError("TIT loss requires the target text decoder (set beta_w=0)")

    if "l_ocr" in need:
        s_in, s_tgt = _with_eos(ex.s)
        std_states = student.source_text_decoder.states(enc_tap, s_in,
                                                        train=train, seeds=seeds)
        logits = student.source_text_decoder.logits(std_states)
        out["l_ocr"] = ad.cross_entropy(logits, s_tgt,
                                        label_smoothing=cfg.label_smoothing,
                                        reduction=red)

    if "l_iimt" in need or "l_kd" in need:
        z = np.asarray(ex.z, dtype=int)
        z_in = np.concatenate([[student.image_decoder.bos], z[:-1]])
        logits = student.image_decoder.logits(enc_final, txt_states, z_in,
                                              train=train, seeds=seeds)
        if "l_iimt" in need:
            out["l_iimt"] = ad.cross_entropy(logits, z,
                                             label_smoothing=cfg.label_smoothing,
                                             reduction=red)
        if "l_kd" in need:
            if teacher is None:
                raise ConfigError("distillation loss requires a teacher (set gamma=0)")
            q = teacher_distributions(ex.x, ex.t, ex.z, teacher,
                                      temperature=cfg.kd_temperature)
            out["l_kd"] = ad.soft_cross_entropy(logits, q, reduction=red)
    return out


def _batch_term(batch: Sequence[IimtExample], student, teacher, cfg, term) -> Tensor:
    parts = [example_losses(ex, student, teacher, cfg, need=(term,))[term] for ex in batch]
    return ad.concat([p.reshape((1,)) for p in parts], axis=0).mean()


def loss_iimt(batch: Sequence[IimtExample], student: IimtModel,
              cfg: Optional[Stage2Config] = None) -> Tensor:
    return _batch_term(batch, student, None, cfg or Stage2Config(), "l_iimt")


def loss_ocr(batch: Sequence[IimtExample], student: IimtModel,
             cfg: Optional[Stage2Config] = None) -> Tensor:
    return _batch_term(batch, student, None, cfg or Stage2Config(), "l_ocr")


def loss_tit(batch: Sequence[IimtExample], student: IimtModel,
             cfg: Optional[Stage2Config] = None) -> Tensor:
    return _batch_term(batch, student, None, cfg or Stage2Config(), "l_tit")


def loss_kd(batch: Sequence[IimtExample], student: IimtModel, teacher: TeacherModel,
            cfg: Optional[Stage2Config] = None) -> Tensor:
    return _batch_term(batch, student, teacher, cfg or Stage2Config(), "l_kd")


def average_checkpoints(states: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Elementwise arithmetic mean of parameter sets with identical layouts."""
    if not states:
        raise ConfigError("no checkpoints to average")
    keys = set(states[0])
    for s in states[1:]:
        if set(s) != keys:
            raise ContractError("checkpoints disagree on parameter names")
    out = {}
    for k in keys:
        shape = states[0][k].shape
        for s in states[1:]:
            if s[k].shape != shape:
                raise ContractError(f"checkpoint parameter '{k}' shape mismatch")
        out[k] = np.mean([s[k] for s in states], axis=0)
    return out


@dataclass
class Stage2Result:
    model: IimtModel
    averaged_state: Dict[str, np.ndarray]
    log: List[dict] = field(default_factory=list)
    val_log: List[dict] = field(default_factory=list)
    stopped_early: bool = False
    steps_run: int = 0


def _needed_terms(cfg: Stage2Config, student: IimtModel) -> Tuple[str, ...]:
    need = ["l_iimt"]
    if cfg.alpha > 0:
        need.append("l_ocr")
    if cfg.beta_w > 0 and student.target_text_decoder is not None:
        need.append("l_tit")
    if cfg.gamma > 0:
        need.append("l_kd")
    return tuple(need)


def validation_loss(examples: Sequence[IimtExample], student: IimtModel,
                    teacher: Optional[TeacherModel], cfg: Stage2Config) -> float:
    """Weighted total loss in eval mode (no dropout)."""
    need = _needed_terms(cfg, student)
    weights = {"l_iimt": 1.0, "l_ocr": cfg.alpha, "l_tit": cfg.beta_w, "l_kd": cfg.gamma}
    total = 0.0
    for ex in examples:
        terms = example_losses(ex, student, teacher, cfg, need=need)
        total += sum(weights[k] * terms[k].item() for k in need)
    return total / len(examples)


def train_stage2(train_examples: Sequence[IimtExample],
                 valid_examples: Optional[Sequence[IimtExample]],
                 student: IimtModel,
                 teacher: Optional[TeacherModel],
                 cfg: Stage2Config,
                 start_step: int = 0,
                 stop_step: Optional[int] = None,
                 optimizer: Optional[AdamW] = None,
                 log_hook=None) -> Stage2Result:
    """Optimize the weighted four-term objective; tokenizer and teacher stay frozen.

    Epochs are fixed step intervals (``eval_interval``): each one snapshots
    the parameters and scores the validation split; training stops early
    after ``early_stop_patience`` epochs without improvement, and the final
    artifact also includes the mean of the last ``avg_last_n`` snapshots.

    ``start_step``/``stop_step`` support interrupted runs: the LR schedule
    and per-step RNG depend only on the config and the absolute step, so a
    resumed run (same config, restored optimizer) reproduces an
    uninterrupted one bit for bit.
    """
    train_examples = list(train_examples)
    if not train_examples:
        raise ConfigError("stage-2 training needs a non-empty dataset")
    if cfg.gamma > 0 and teacher is None:
        raise ConfigError("gamma > 0 requires a trained teacher (run the teacher stage first)")
    valid = list(valid_examples) if valid_examples else train_examples

    params = student.named_parameters()
    opt = optimizer or AdamW(params, lr=cfg.lr, betas=(0.9, 0.999),
                             weight_decay=cfg.weight_decay)
    need = _needed_terms(cfg, student)
    weights = {"l_iimt": 1.0, "l_ocr": cfg.alpha, "l_tit": cfg.beta_w, "l_kd": cfg.gamma}

    snapshots: deque = deque(maxlen=cfg.avg_last_n)
    result = Stage2Result(model=student, averaged_state={})
    best_val = np.inf
    epochs_since_best = 0
    batch = min(cfg.batch_size, len(train_examples))

    limit = cfg.max_steps if stop_step is None else min(stop_step, cfg.max_steps)
    step = start_step
    while step < limit:
        rng = make_rng(cfg.seed, _STEP_TAG, step)
        idx = rng.choice(len(train_examples), size=batch, replace=False)
        seeds = SeedStream(cfg.seed, _STEP_TAG, step)
        opt.zero_grad()
        term_scalars = {k: [] for k in need}
        try:
            for i in idx:
                terms = example_losses(train_examples[i], student, teacher, cfg,
                                       need=need, train=cfg.dropout > 0, seeds=seeds)
                for k in need:
                    term_scalars[k].append(terms[k])
        except ValueError as exc:  # non-finite values inside a forward pass
            raise NanLossError("forward", step) from exc
        term_means = {k: ad.concat([t.reshape((1,)) for t in v], axis=0).mean()
                      for k, v in term_scalars.items()}
        for k, t in term_means.items():
            if not np.isfinite(t.item()):
                raise NanLossError(k, step)
        total = None
        for k in need:
            contrib = term_means[k] * Tensor(weights[k])
            total = contrib if total is None else total + contrib
        total.backward()
        lr = polynomial_decay(step, cfg.max_steps, cfg.lr, cfg.lr_end, cfg.lr_power)
        opt.step(lr=lr)

        rec = {"step": step,
               "l_iimt": term_means["l_iimt"].item() if "l_iimt" in term_means else 0.0,
               "l_ocr": term_means["l_ocr"].item() if "l_ocr" in term_means else 0.0,
               "l_tit": term_means["l_tit"].item() if "l_tit" in term_means else 0.0,
               "l_kd": term_means["l_kd"].item() if "l_kd" in term_means else 0.0,
               "l_total": total.item(), "lr": lr}
        result.log.append(rec)
        step += 1

        epoch_end = step % cfg.eval_interval == 0 or step == cfg.max_steps
        if epoch_end:
            snapshots.append(student.state())
            val = validation_loss(valid, student, teacher, cfg)
            result.val_log.append({"step": step, "val_l2": val})
            if val < best_val - 1e-12:
                best_val = val
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if log_hook:
                log_hook(rec, student, opt, step)
            if epochs_since_best >= cfg.early_stop_patience:
                result.stopped_early = True
                break
        elif log_hook:
            log_hook(rec, student, opt, None)

    if not snapshots:
        snapshots.append(student.state())
    result.averaged_state = average_checkpoints(list(snapshots))
    result.steps_run = step
    return result
