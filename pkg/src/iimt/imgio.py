"""Lossless 8-bit RGB PNG input/output.

Arrays are float64 in [0, 1] everywhere inside the package; files are
plain 8-bit RGB PNGs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
