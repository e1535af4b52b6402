"""Discrete visual-token image tokenizer.

A transformer encoder maps image patches to code vectors, a nearest-
neighbour codebook lookup turns them into token indices, and a transformer
decoder reconstructs pixels from the selected code vectors. Stage-1
training optimizes reconstruction, codebook (VQ), and commitment terms,
with a straight-through gradient across the quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import (AttentionConfig, EncoderLayer, LayerNorm, Linear, Module,
                 PositionalEmbedding)
from .optim import AdamW, polynomial_decay
from .seeding import SeedStream, make_rng

_INIT_TAG = 101
_STEP_TAG = 102


@dataclass
class TokenizerConfig:
    image_size: int = 64
    patch_size: int = 8
    codebook_size: int = 512
    code_dim: int = 64
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    enc_layers: int = 4
    dec_layers: int = 4
    commitment_weight: float = 0.25

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least 2 entries")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[H, W, 3] -> [N, P*P*3] in raster (row-major) patch order."""
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ad.ShapeError(
            f"image dims {(h, w)} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    return (image.reshape(gh, patch_size, gw, patch_size, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch_size * patch_size * c))


def unpatchify(patches: np.ndarray, image_size: int, patch_size: int) -> np.ndarray:
    g = image_size // patch_size
    return (patches.reshape(g, g, patch_size, patch_size, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(image_size, image_size, 3))


class Codebook(Module):
    """The visual-token vocabulary: K embedding vectors addressed by index."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        if size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        self.size = size
        self.dim = dim
        self.entries = self.param("entries", rng.uniform(-1.0 / size, 1.0 / size, (size, dim)))

    def nearest(self, vectors: np.ndarray) -> np.ndarray:
        """Indices of nearest entries by squared Euclidean distance.

        Distances are explicit difference norms (not the expanded inner-
        product form) so results, including lowest-index tie-breaking,
        match an exhaustive linear scan bit for bit.
        """
        v = np.atleast_2d(vectors)
        dists = ((v[:, None, :] - self.entries.data[None, :, :]) ** 2).sum(axis=-1)
        return dists.argmin(axis=1)


def quantize(vector: np.ndarray, codebook: Codebook) -> Tuple[int, np.ndarray]:
    """Nearest codebook entry for one code vector: (index, entry copy)."""
    vector = np.asarray(vector, dtype=float)
    if codebook.entries.data.size == 0:
        raise ConfigError("empty codebook")
    if vector.shape != (codebook.dim,):
        raise ad.ShapeError(
            f"vector dim {vector.shape} does not match code_dim ({codebook.dim},)")
    idx = int(codebook.nearest(vector[None, :])[0])
    return idx, codebook.entries.data[idx].copy()


class TokenizerModel(Module):
    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        acfg = AttentionConfig(cfg.model_dim, cfg.num_heads, cfg.ffn_dim)
        self.acfg = acfg
        pdim = cfg.patch_size * cfg.patch_size * 3
        self.enc_proj = self.child("enc_proj", Linear(pdim, cfg.model_dim, rng))
        self.enc_pos = self.child("enc_pos", PositionalEmbedding(cfg.num_tokens, cfg.model_dim, rng))
        self.enc_layers = [self.child(f"enc{i}", EncoderLayer(acfg, rng))
                           for i in range(cfg.enc_layers)]
        self.enc_ln = self.child("enc_ln", LayerNorm(cfg.model_dim))
        self.enc_out = self.child("enc_out", Linear(cfg.model_dim, cfg.code_dim, rng))
        self.codebook = self.child("codebook", Codebook(cfg.codebook_size, cfg.code_dim, rng))
        # normalizes the (initially tiny) code vectors to unit scale so the
        # decoder sees O(1) content from the first step
        self.dec_in_ln = self.child("dec_in_ln", LayerNorm(cfg.code_dim))
        self.dec_proj = self.child("dec_proj", Linear(cfg.code_dim, cfg.model_dim, rng))
        self.dec_pos = self.child("dec_pos", PositionalEmbedding(cfg.num_tokens, cfg.model_dim, rng))
        self.dec_layers = [self.child(f"dec{i}", EncoderLayer(acfg, rng))
                           for i in range(cfg.dec_layers)]
        self.dec_ln = self.child("dec_ln", LayerNorm(cfg.model_dim))
        self.dec_out = self.child("dec_out", Linear(cfg.model_dim, pdim, rng))

    def encode_vectors(self, image: np.ndarray, train: bool = False,
                       seeds: Optional[SeedStream] = None) -> Tensor:
        patches = patchify(np.asarray(image, dtype=float), self.cfg.patch_size)
        h = self.enc_proj(Tensor(patches)) + self.enc_pos(self.cfg.num_tokens)
        for layer in self.enc_layers:
            h = layer(h, train=train, seeds=seeds)
        return self.enc_out(self.enc_ln(h))

    def decode_vectors(self, code_vectors: Tensor, train: bool = False,
                       seeds: Optional[SeedStream] = None) -> Tensor:
        h = self.dec_proj(self.dec_in_ln(code_vectors)) + self.dec_pos(self.cfg.num_tokens)
        for layer in self.dec_layers:
            h = layer(h, train=train, seeds=seeds)
        return self.dec_out(self.dec_ln(h))


def encode_image(image: np.ndarray, model: TokenizerModel) -> np.ndarray:
    """Tokenize one image into its visual-token index sequence."""
    with ad.no_grad():
        vecs = model.encode_vectors(image)
        return model.codebook.nearest(vecs.data)


def decode_tokens(tokens: Sequence[int], model: TokenizerModel) -> np.ndarray:
    """Reconstruct an image from token indices; pixels clamped to [0, 1]."""
    tokens = np.asarray(tokens)
    cfg = model.cfg
    if tokens.shape != (cfg.num_tokens,):
        raise ad.ShapeError(
            f"token sequence length {tokens.shape} does not match grid ({cfg.num_tokens},)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.codebook_size):
        raise IndexError(
            f"token index out of range [0, {cfg.codebook_size})")
    with ad.no_grad():
        vecs = ad.embedding(model.codebook.entries, tokens)
        patches = model.decode_vectors(vecs)
        return np.clip(unpatchify(patches.data, cfg.image_size, cfg.patch_size), 0.0, 1.0)


def stage1_loss(image: np.ndarray, model: TokenizerModel, train: bool = False,
                seeds: Optional[SeedStream] = None) -> Tuple[Tensor, Dict[str, float]]:
    """Reconstruction + VQ + commitment objective for one image.

    Gradient routing: the reconstruction term reaches the encoder through a
    straight-through copy across the quantizer; the VQ term updates only
    codebook entries; the commitment term updates only the encoder.
    """
    cfg = model.cfg
    z_e = model.encode_vectors(image, train=train, seeds=seeds)
    indices = model.codebook.nearest(z_e.data)
    z_q = ad.embedding(model.codebook.entries, indices)

    bridged = ad.straight_through(z_q, z_e)
    recon = model.decode_vectors(bridged, train=train, seeds=seeds)
    target = Tensor(patchify(np.asarray(image, dtype=float), cfg.patch_size))
    l_rec = ad.mse(recon, target)

    l_vq = ad.mse(z_q, z_e.detach())
    l_commit = ad.mse(z_e, z_q.detach()) * Tensor(cfg.commitment_weight)
    total = l_rec + l_vq + l_commit
    parts = {"l_rec": l_rec.item(), "l_vq": l_vq.item(), "l_commit": l_commit.item()}
    return total, parts


@dataclass
class Stage1Config:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 3e-3
    lr_end: float = 3e-4
    lr_power: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    # Adam's normalized steps let the first assigned codes leap ahead of
    # the untouched pack, collapsing assignments; a slower codebook keeps
    # the vocabulary interleaved with the encoder's spread while it learns.
    codebook_lr_scale: float = 0.1
    seed: int = 0


def train_stage1(images: Sequence[np.ndarray], train_cfg: Stage1Config,
                 model_cfg: Optional[TokenizerConfig] = None,
                 model: Optional[TokenizerModel] = None,
                 start_step: int = 0,
                 optimizer: Optional[AdamW] = None,
                 log_hook=None) -> Tuple[TokenizerModel, List[dict]]:
    """Train the tokenizer on an unlabeled image set; returns (model, log)."""
    images = list(images)
    if not images:
        raise ConfigError("stage-1 training needs a non-empty image dataset")
    if model is None:
        model_cfg = model_cfg or TokenizerConfig()
        model = TokenizerModel(model_cfg, make_rng(train_cfg.seed, _INIT_TAG))
    params = model.named_parameters()
    opt = optimizer or AdamW(params, lr=train_cfg.lr,
                             betas=(train_cfg.beta1, train_cfg.beta2),
                             weight_decay=train_cfg.weight_decay,
                             lr_scales={"codebook.": train_cfg.codebook_lr_scale})
    log: List[dict] = []
    batch = min(train_cfg.batch_size, len(images))
    for step in range(start_step, train_cfg.steps):
        rng = make_rng(train_cfg.seed, _STEP_TAG, step)
        idx = rng.choice(len(images), size=batch, replace=False)
        opt.zero_grad()
        totals = {"l_rec": 0.0, "l_vq": 0.0, "l_commit": 0.0}
        loss_terms = []
        for i in idx:
            loss_i, parts = stage1_loss(images[i], model)
            loss_terms.append(loss_i)
            for k in totals:
                totals[k] += parts[k] / batch
        loss = ad.concat([t.reshape((1,)) for t in loss_terms], axis=0).mean()
        loss.backward()
        lr = polynomial_decay(step, train_cfg.steps, train_cfg.lr,
                              train_cfg.lr_end, train_cfg.lr_power)
        opt.step(lr=lr)
        rec = {"step": step, "l_total": loss.item(), **{k: v for k, v in totals.items()},
               "lr": lr}
        log.append(rec)
        if log_hook:
            log_hook(rec, model, opt)
    return model, log


def tokenizer_state_config(cfg: TokenizerConfig) -> dict:
    return asdict(cfg)


def tokenizer_from_checkpoint(config: dict, arrays: Dict[str, np.ndarray]) -> TokenizerModel:
    cfg = TokenizerConfig(**config)
    model = TokenizerModel(cfg, make_rng(0, _INIT_TAG))
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model
