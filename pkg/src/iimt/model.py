"""The end-to-end in-image translation model.

Image encoder (ViT over patches plus a prepended special token), a target
text decoder over a 256-entry byte vocabulary, and an image decoder whose
layers run causal self-attention with a 2D relative position bias, two
cross-attentions (encoder states and text-decoder states), and a gated
fusion of the two streams. A source text decoder tapped from an
intermediate encoder layer exists for the auxiliary recognition task and
is never used at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .nn import (AttentionConfig, DecoderLayer, EncoderLayer, Embedding,
                 FeedForward, GatedFusion, LayerNorm, Linear, Module,
                 MultiHeadAttention, PositionalEmbedding, RelPos2D, causal_mask)
from .seeding import SeedStream, make_rng
from .tokenizer import TokenizerModel, decode_tokens, patchify

CHAR_VOCAB = 256
EOS = 255  # also the decoder start symbol
PAD = 254

_INIT_TAG = 201


@dataclass
class IimtConfig:
    image_size: int = 64
    patch_size: int = 8
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    enc_layers: int = 4
    txt_layers: int = 2
    img_layers: int = 2
    tap_layer: int = 0  # 0 -> enc_layers // 2
    token_grid: int = 8
    codebook_size: int = 512
    max_text_len: int = 48
    dropout: float = 0.1
    use_text_decoder: bool = True  # ablation switch

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.tap_layer == 0:
            self.tap_layer = max(1, self.enc_layers // 2)
        if not 1 <= self.tap_layer <= self.enc_layers:
            raise ConfigError(
                f"tap_layer {self.tap_layer} outside [1, {self.enc_layers}]")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.token_grid * self.token_grid


def encode_text(text) -> np.ndarray:
    """Text to byte ids (latin-1); bytes 254/255 are reserved and rejected."""
    if isinstance(text, str):
        data = text.encode("latin-1")
    else:
        data = bytes(text)
    ids = np.frombuffer(data, dtype=np.uint8).astype(int)
    if ids.size and ids.max() >= PAD:
        bad = int(ids[ids >= PAD][0])
        raise ContractError(f"byte {bad} is reserved (PAD/EOS) and cannot appear in text")
    return ids


def decode_text_ids(ids) -> str:
    """Byte ids back to text, stopping at the first EOS."""
    out = []
    for i in ids:
        if i == EOS:
            break
        if i == PAD:
            continue
        out.append(int(i))
    return bytes(out).decode("latin-1")


class TextDecoder(Module):
    """Byte-level transformer decoder over one encoder memory."""

    def __init__(self, cfg: IimtConfig, rng: np.random.Generator):
        super().__init__()
        acfg = AttentionConfig(cfg.model_dim, cfg.num_heads, cfg.ffn_dim,
                               dropout_rate=cfg.dropout, causal=True)
        self.embed = self.child("embed", Embedding(CHAR_VOCAB, cfg.model_dim, rng))
        self.pos = self.child("pos", PositionalEmbedding(cfg.max_text_len + 2, cfg.model_dim, rng))
        self.layers = [self.child(f"layer{i}", DecoderLayer(acfg, rng))
                       for i in range(cfg.txt_layers)]
        self.ln = self.child("ln", LayerNorm(cfg.model_dim))
        self.head = self.child("head", Linear(cfg.model_dim, CHAR_VOCAB, rng))

    def states(self, memory: Tensor, input_ids: np.ndarray, train: bool = False,
               seeds: Optional[SeedStream] = None) -> Tensor:
        h = self.embed(input_ids) + self.pos(len(input_ids))
        for layer in self.layers:
            h = layer(h, memory, train=train, seeds=seeds)
        return self.ln(h)

    def logits(self, states: Tensor) -> Tensor:
        return self.head(states)


class ImageDecoderLayer(Module):
    """Causal self-attention with 2D relative bias, dual cross-attention
    over encoder and text states, gated fusion, then FFN. When the text
    stream is absent the layer degrades to a single cross-attention."""

    def __init__(self, acfg: AttentionConfig, rng: np.random.Generator,
                 use_text: bool = True):
        super().__init__()
        self.acfg = acfg
        d = acfg.model_dim
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.self_attn = self.child("self_attn", MultiHeadAttention(acfg, rng))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.cross_img = self.child("cross_img", MultiHeadAttention(acfg, rng))
        self.has_text = use_text
        if self.has_text:
            self.ln3 = self.child("ln3", LayerNorm(d))
            self.cross_txt = self.child("cross_txt", MultiHeadAttention(acfg, rng))
            self.fusion = self.child("fusion", GatedFusion(d, rng))
        self.ln4 = self.child("ln4", LayerNorm(d))
        self.ffn = self.child("ffn", FeedForward(acfg, rng))

    def __call__(self, h: Tensor, enc_memory: Tensor, txt_memory: Optional[Tensor],
                 rel_bias: Optional[Tensor], train: bool = False,
                 seeds: Optional[SeedStream] = None) -> Tensor:
        mask = causal_mask(h.shape[0])
        x = self.ln1(h)
        a = h + self.self_attn(x, x, x, mask_bias=mask, rel_bias=rel_bias,
                               train=train, seeds=seeds)
        img_stream = self.cross_img(self.ln2(a), enc_memory, enc_memory,
                                    train=train, seeds=seeds)
        if self.has_text and txt_memory is not None:
            txt_stream = self.cross_txt(self.ln3(a), txt_memory, txt_memory,
                                        train=train, seeds=seeds)
            fused = self.fusion(img_stream, txt_stream)
        else:
            fused = img_stream
        h = a + fused
        h = h + self.ffn(self.ln4(h), train=train, seeds=seeds)
        return h


class ImageDecoder(Module):
    """Autoregressive visual-token decoder over one or two memories."""

    def __init__(self, model_dim: int, num_heads: int, ffn_dim: int, layers: int,
                 codebook_size: int, token_grid: int, dropout: float,
                 rng: np.random.Generator, use_text: bool = True):
        super().__init__()
        self.codebook_size = codebook_size
        self.token_grid = token_grid
        self.num_tokens = token_grid * token_grid
        acfg = AttentionConfig(model_dim, num_heads, ffn_dim,
                               dropout_rate=dropout, causal=True, rel_pos_2d=True)
        # input vocabulary has one extra row: the beginning-of-image token
        self.embed = self.child("embed", Embedding(codebook_size + 1, model_dim, rng))
        self.pos = self.child("pos", PositionalEmbedding(self.num_tokens, model_dim, rng))
        self.rel = self.child("rel", RelPos2D(num_heads, token_grid, token_grid, rng))
        self.layers = [self.child(f"layer{i}", ImageDecoderLayer(acfg, rng, use_text=use_text))
                       for i in range(layers)]
        self.ln = self.child("ln", LayerNorm(model_dim))
        self.head = self.child("head", Linear(model_dim, codebook_size, rng))

    @property
    def bos(self) -> int:
        return self.codebook_size

    def logits(self, enc_memory: Tensor, txt_memory: Optional[Tensor],
               input_ids: np.ndarray, train: bool = False,
               seeds: Optional[SeedStream] = None) -> Tensor:
        t = len(input_ids)
        if t > self.num_tokens:
            raise ContractError(
                f"visual prefix length {t} exceeds token grid {self.num_tokens}")
        h = self.embed(input_ids) + self.pos(t)
        rel_full = self.rel.bias(self.token_grid, self.token_grid)
        rel = rel_full if t == self.num_tokens else \
            Tensor(rel_full.data[:, :t, :t])
        for layer in self.layers:
            h = layer(h, enc_memory, txt_memory, rel, train=train, seeds=seeds)
        return self.head(self.ln(h))


@dataclass
class TranslationOutput:
    target_text: str
    visual_tokens: np.ndarray
    target_image: np.ndarray
    truncated: bool = False


class IimtModel(Module):
    def __init__(self, cfg: IimtConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        acfg = AttentionConfig(cfg.model_dim, cfg.num_heads, cfg.ffn_dim,
                               dropout_rate=cfg.dropout)
        pdim = cfg.patch_size * cfg.patch_size * 3
        self.patch_proj = self.child("patch_proj", Linear(pdim, cfg.model_dim, rng))
        self.special_token = self.param("special_token", rng.normal(0.0, 0.02, (1, cfg.model_dim)))
        self.pos = self.child("pos", PositionalEmbedding(cfg.num_patches + 1, cfg.model_dim, rng))
        self.enc_layers = [self.child(f"enc{i}", EncoderLayer(acfg, rng))
                           for i in range(cfg.enc_layers)]
        self.enc_ln = self.child("enc_ln", LayerNorm(cfg.model_dim))
        self.tap_ln = self.child("tap_ln", LayerNorm(cfg.model_dim))
        if cfg.use_text_decoder:
            self.target_text_decoder = self.child("ttd", TextDecoder(cfg, rng))
        else:
            self.target_text_decoder = None
        self.source_text_decoder = self.child("std", TextDecoder(cfg, rng))
        self.image_decoder = self.child("img_dec", ImageDecoder(
            cfg.model_dim, cfg.num_heads, cfg.ffn_dim, cfg.img_layers,
            cfg.codebook_size, cfg.token_grid, cfg.dropout, rng,
            use_text=cfg.use_text_decoder))

    # -- encoder ---------------------------------------------------------

    def encode(self, image: np.ndarray, train: bool = False,
               seeds: Optional[SeedStream] = None) -> Tuple[Tensor, Tensor]:
        """Returns (final-layer states, tapped intermediate states).

        Sequence layout: position 0 is the special token, positions 1..N
        are patch embeddings in raster order.
        """
        cfg = self.cfg
        patches = patchify(np.asarray(image, dtype=float), cfg.patch_size)
        emb = self.patch_proj(Tensor(patches))
        h = ad.concat([self.special_token, emb], axis=0) + self.pos(cfg.num_patches + 1)
        tapped = None
        for i, layer in enumerate(self.enc_layers, start=1):
            h = layer(h, train=train, seeds=seeds)
            if i == cfg.tap_layer:
                tapped = h
        return self.enc_ln(h), self.tap_ln(tapped)

    # -- inference -------------------------------------------------------

    def next_char_distribution(self, enc_states: Tensor, prefix: np.ndarray) -> np.ndarray:
        """Distribution over the byte vocabulary for the next character."""
        if self.target_text_decoder is None:
            raise ConfigError("model was built without a target text decoder")
        with ad.no_grad():
            states = self.target_text_decoder.states(enc_states, np.asarray(prefix))
            logits = self.target_text_decoder.logits(states)
            return ad.softmax(Tensor(logits.data[-1:]), axis=-1).data[0]

    def next_token_distribution(self, enc_states: Tensor, txt_states: Optional[Tensor],
                                prefix: np.ndarray) -> np.ndarray:
        """Distribution over the visual-token vocabulary for the next cell."""
        with ad.no_grad():
            logits = self.image_decoder.logits(enc_states, txt_states, np.asarray(prefix))
            return ad.softmax(Tensor(logits.data[-1:]), axis=-1).data[0]

    def greedy_text(self, enc_states: Tensor, max_len: Optional[int] = None) -> Tuple[np.ndarray, bool]:
        """Greedy byte decoding up to EOS; returns (ids without EOS, truncated)."""
        cap = max_len or self.cfg.max_text_len
        prefix = [EOS]
        with ad.no_grad():
            for _ in range(cap):
                dist = self.next_char_distribution(enc_states, np.array(prefix))
                nxt = int(dist.argmax())
                if nxt == EOS:
                    return np.array(prefix[1:], dtype=int), False
                prefix.append(nxt)
        return np.array(prefix[1:], dtype=int), True

    def greedy_visual_tokens(self, enc_states: Tensor, txt_states: Optional[Tensor]) -> np.ndarray:
        """Exactly grid-size tokens in raster order; never stops early."""
        bos = self.image_decoder.bos
        prefix = [bos]
        with ad.no_grad():
            for _ in range(self.cfg.num_tokens):
                dist = self.next_token_distribution(enc_states, txt_states, np.array(prefix))
                prefix.append(int(dist.argmax()))
        return np.array(prefix[1:], dtype=int)

    def translate(self, image: np.ndarray, tokenizer: TokenizerModel,
                  max_text_len: Optional[int] = None) -> TranslationOutput:
        """Two-pass greedy inference: text first, then visual tokens."""
        with ad.no_grad():
            enc_states, _ = self.encode(image)
            if self.target_text_decoder is not None:
                text_ids, truncated = self.greedy_text(enc_states, max_text_len)
                txt_states = self.target_text_decoder.states(
                    enc_states, np.concatenate([[EOS], text_ids]))
            else:
                text_ids, truncated = np.array([], dtype=int), False
                txt_states = None
            tokens = self.greedy_visual_tokens(enc_states, txt_states)
            image_out = decode_tokens(tokens, tokenizer)
        return TranslationOutput(
            target_text=decode_text_ids(text_ids),
            visual_tokens=tokens,
            target_image=image_out,
            truncated=truncated,
        )


def model_state_config(cfg: IimtConfig) -> dict:
    return asdict(cfg)


def model_from_checkpoint(config: dict, arrays: Dict[str, np.ndarray]) -> IimtModel:
    cfg = IimtConfig(**config)
    model = IimtModel(cfg, make_rng(0, _INIT_TAG))
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model
