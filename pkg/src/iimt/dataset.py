"""Training-record structures and manifest reading.

A dataset directory holds ``manifest.{train,valid,test}.jsonl`` plus the
referenced PNGs. Each manifest line carries one paired example:
id, image paths, texts, per-line boxes on both sides, and the applied
rotation/translation. Target visual tokens are derived lazily from the
frozen tokenizer when examples are materialized for training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .imgio import load_image
from .model import encode_text
from .tokenizer import TokenizerModel, encode_image


@dataclass
class ManifestRecord:
    id: str
    src_image_path: str
    tgt_image_path: str
    src_text: str
    tgt_text: str
    src_boxes: List[dict]
    tgt_boxes: List[dict]
    rotation_deg: float
    translation_px: List[int]

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "src_image_path": self.src_image_path,
            "tgt_image_path": self.tgt_image_path,
            "src_text": self.src_text,
            "tgt_text": self.tgt_text,
            "src_boxes": self.src_boxes,
            "tgt_boxes": self.tgt_boxes,
            "rotation_deg": self.rotation_deg,
            "translation_px": self.translation_px,
        }, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        return cls(
            id=d["id"], src_image_path=d["src_image_path"],
            tgt_image_path=d["tgt_image_path"], src_text=d["src_text"],
            tgt_text=d["tgt_text"], src_boxes=d["src_boxes"],
            tgt_boxes=d["tgt_boxes"], rotation_deg=d["rotation_deg"],
            translation_px=list(d["translation_px"]),
        )


def load_manifest(path) -> List[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ManifestRecord.from_json(line))
    return records


@dataclass
class IimtExample:
    """One training record: source/target images, texts, and target tokens."""
    x: np.ndarray          # source image [H, W, 3] in [0, 1]
    y: np.ndarray          # target image
    s: np.ndarray          # source byte ids (no EOS)
    t: np.ndarray          # target byte ids (no EOS)
    z: np.ndarray          # target visual tokens, length = tokenizer grid

    def __post_init__(self):
        if self.s.size == 0 or self.t.size == 0:
            raise ConfigError("example texts must be non-empty")


def build_examples(records: Sequence[ManifestRecord], tokenizer: TokenizerModel,
                   root: Optional[Path] = None) -> List[IimtExample]:
    """Materialize manifest records; z comes from the frozen tokenizer."""
    root = Path(root) if root is not None else Path(".")
    out = []
    for rec in records:
        x = load_image(root / rec.src_image_path)
        y = load_image(root / rec.tgt_image_path)
        out.append(IimtExample(
            x=x, y=y,
            s=encode_text(rec.src_text),
            t=encode_text(rec.tgt_text),
            z=encode_image(y, tokenizer),
        ))
    return out
