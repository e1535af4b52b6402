"""Text-to-image teacher used for knowledge distillation.

A transformer text encoder over target bytes and a small residual
convolution stack over the source image feed the same dual-cross-attention
visual-token decoder as the translation model. The teacher is trained
first on (source image, target text, target tokens) triples and then
frozen; during distillation only its output distributions are consumed.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import IimtExample
from .errors import ConfigError
from .model import EOS, CHAR_VOCAB, ImageDecoder
from .nn import (AttentionConfig, Embedding, EncoderLayer, LayerNorm, Linear,
                 Module, PositionalEmbedding)
from .optim import AdamW, polynomial_decay
from .seeding import SeedStream, make_rng

_INIT_TAG = 301
_STEP_TAG = 302


@dataclass
class TeacherConfig:
    image_size: int = 64
    model_dim: int = 48          # 0.75x the student width
    num_heads: int = 4
    ffn_dim: int = 192
    text_layers: int = 2
    img_layers: int = 2
    conv_channels: Tuple[int, int] = (16, 32)  # third block lands on model_dim
    token_grid: int = 8
    codebook_size: int = 512
    max_text_len: int = 48
    dropout: float = 0.1

    def __post_init__(self):
        # three stride-2 blocks: image_size must reduce to the token grid
        if self.image_size // 8 != self.token_grid:
            raise ConfigError(
                f"conv stack downsamples by 8: image_size {self.image_size} "
                f"does not land on token_grid {self.token_grid}")


class ConvBlock(Module):
    """Stride-2 downsampling conv followed by a two-conv residual refinement."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        def w(c_o, c_i, k):
            return rng.normal(0.0, np.sqrt(2.0 / (c_i * k * k)), (c_o, c_i, k, k))
        self.w_down = self.param("w_down", w(c_out, c_in, 3))
        self.b_down = self.param("b_down", np.zeros(c_out))
        self.w_a = self.param("w_a", w(c_out, c_out, 3))
        self.b_a = self.param("b_a", np.zeros(c_out))
        self.w_b = self.param("w_b", w(c_out, c_out, 3))
        self.b_b = self.param("b_b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.gelu(ad.conv2d(x, self.w_down, self.b_down, stride=2, padding=1))
        r = ad.conv2d(ad.gelu(ad.conv2d(y, self.w_a, self.b_a, stride=1, padding=1)),
                      self.w_b, self.b_b, stride=1, padding=1)
        return y + r


class TeacherModel(Module):
    def __init__(self, cfg: TeacherConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        acfg = AttentionConfig(cfg.model_dim, cfg.num_heads, cfg.ffn_dim,
                               dropout_rate=cfg.dropout)
        self.txt_embed = self.child("txt_embed", Embedding(CHAR_VOCAB, cfg.model_dim, rng))
        self.txt_pos = self.child("txt_pos",
                                  PositionalEmbedding(cfg.max_text_len + 2, cfg.model_dim, rng))
        self.txt_layers = [self.child(f"txt{i}", EncoderLayer(acfg, rng))
                           for i in range(cfg.text_layers)]
        self.txt_ln = self.child("txt_ln", LayerNorm(cfg.model_dim))

        c1, c2 = cfg.conv_channels
        self.conv1 = self.child("conv1", ConvBlock(3, c1, rng))
        self.conv2 = self.child("conv2", ConvBlock(c1, c2, rng))
        self.conv3 = self.child("conv3", ConvBlock(c2, cfg.model_dim, rng))
        self.feat_pos = self.child("feat_pos",
                                   PositionalEmbedding(cfg.token_grid**2, cfg.model_dim, rng))
        self.feat_ln = self.child("feat_ln", LayerNorm(cfg.model_dim))

        self.image_decoder = self.child("img_dec", ImageDecoder(
            cfg.model_dim, cfg.num_heads, cfg.ffn_dim, cfg.img_layers,
            cfg.codebook_size, cfg.token_grid, cfg.dropout, rng, use_text=True))

    def encode_target_text(self, text_ids: np.ndarray, train: bool = False,
                           seeds: Optional[SeedStream] = None) -> Tensor:
        ids = np.concatenate([np.asarray(text_ids, dtype=int), [EOS]])
        h = self.txt_embed(ids) + self.txt_pos(len(ids))
        for layer in self.txt_layers:
            h = layer(h, train=train, seeds=seeds)
        return self.txt_ln(h)

    def encode_source_image(self, image: np.ndarray, train: bool = False,
                            seeds: Optional[SeedStream] = None) -> Tensor:
        x = Tensor(np.asarray(image, dtype=float).transpose(2, 0, 1))
        feat = self.conv3(self.conv2(self.conv1(x)))
        n = self.cfg.token_grid**2
        seq = feat.reshape((self.cfg.model_dim, n)).transpose((1, 0))
        return self.feat_ln(seq + self.feat_pos(n))

    def token_logits(self, image: np.ndarray, text_ids: np.ndarray,
                     tokens: np.ndarray, train: bool = False,
                     seeds: Optional[SeedStream] = None) -> Tensor:
        """Teacher-forced logits [|z|, K]: position i predicts tokens[i]."""
        txt_states = self.encode_target_text(text_ids, train=train, seeds=seeds)
        feat = self.encode_source_image(image, train=train, seeds=seeds)
        inputs = np.concatenate([[self.image_decoder.bos], np.asarray(tokens[:-1], dtype=int)])
        # image-feature memory plays the visual stream, text plays the other
        return self.image_decoder.logits(feat, txt_states, inputs, train=train, seeds=seeds)


def teacher_distributions(image: np.ndarray, text_ids: np.ndarray, tokens: np.ndarray,
                          teacher: TeacherModel, temperature: float = 1.0) -> np.ndarray:
    """Per-step soft target rows over the token vocabulary, one forward pass."""
    with ad.no_grad():
        logits = teacher.token_logits(image, text_ids, tokens)
        scaled = logits.data / temperature if temperature != 1.0 else logits.data
        return ad.softmax(Tensor(scaled), axis=-1).data


@dataclass
class TeacherTrainConfig:
    steps: int = 600
    batch_size: int = 8
    lr: float = 1e-3
    lr_end: float = 1e-4
    lr_power: float = 1.0
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    seed: int = 0


def train_teacher(examples: Sequence[IimtExample], train_cfg: TeacherTrainConfig,
                  model_cfg: Optional[TeacherConfig] = None,
                  model: Optional[TeacherModel] = None,
                  start_step: int = 0,
                  optimizer: Optional[AdamW] = None,
                  log_hook=None) -> Tuple[TeacherModel, List[dict]]:
    """Cross-entropy training of p(z | t, x) with the tokenizer's z as labels."""
    examples = list(examples)
    if not examples:
        raise ConfigError("teacher training needs a non-empty dataset")
    if model is None:
        model_cfg = model_cfg or TeacherConfig()
        model = TeacherModel(model_cfg, make_rng(train_cfg.seed, _INIT_TAG))
    opt = optimizer or AdamW(model.named_parameters(), lr=train_cfg.lr,
                             weight_decay=train_cfg.weight_decay)
    log: List[dict] = []
    batch = min(train_cfg.batch_size, len(examples))
    for step in range(start_step, train_cfg.steps):
        rng = make_rng(train_cfg.seed, _STEP_TAG, step)
        idx = rng.choice(len(examples), size=batch, replace=False)
        seeds = SeedStream(train_cfg.seed, _STEP_TAG, step)
        opt.zero_grad()
        losses = []
        for i in idx:
            ex = examples[i]
            logits = model.token_logits(ex.x, ex.t, ex.z, train=True, seeds=seeds)
            losses.append(ad.cross_entropy(logits, ex.z,
                                           label_smoothing=train_cfg.label_smoothing))
        loss = ad.concat([l.reshape((1,)) for l in losses], axis=0).mean()
        loss.backward()
        lr = polynomial_decay(step, train_cfg.steps, train_cfg.lr,
                              train_cfg.lr_end, train_cfg.lr_power)
        opt.step(lr=lr)
        rec = {"step": step, "l_total": loss.item(), "lr": lr}
        log.append(rec)
        if log_hook:
            log_hook(rec, model, opt)
    return model, log


def teacher_state_config(cfg: TeacherConfig) -> dict:
    d = asdict(cfg)
    d["conv_channels"] = list(cfg.conv_channels)
    return d


def teacher_from_checkpoint(config: dict, arrays: Dict[str, np.ndarray]) -> TeacherModel:
    config = dict(config)
    config["conv_channels"] = tuple(config.get("conv_channels", (16, 32)))
    cfg = TeacherConfig(**config)
    model = TeacherModel(cfg, make_rng(0, _INIT_TAG))
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model
