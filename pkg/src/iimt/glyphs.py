"""Embedded monospaced bitmap glyph atlas.

A hand-drawn 5x8 pixel font covering printable ASCII plus the Latin-1
accented letters used by German, French, and Romanian text. The same
binary masks drive both rendering (stamping) and the evaluation OCR's
template matching, so recognition on clean axis-aligned renders is exact.

Glyph grid conventions: capitals and digits occupy rows 0-6, lowercase
x-height sits in rows 2-6, accents use rows 0-1, descenders use row 7.
"""

from __future__ import annotations

from typing import Dict, Iterable

import numpy as np

from .errors import ConfigError

GLYPH_W = 5
GLYPH_H = 8

_G = {
    " ": ["....."] * 8,
    "!": ["..X..", "..X..", "..X..", "..X..", "..X..", ".....", "..X..", "....."],
    '"': [".X.X.", ".X.X.", ".X.X.", ".....", ".....", ".....", ".....", "....."],
    "#": [".X.X.", ".X.X.", "XXXXX", ".X.X.", "XXXXX", ".X.X.", ".X.X.", "....."],
    "$": ["..X..", ".XXXX", "X.X..", ".XXX.", "..X.X", "XXXX.", "..X..", "....."],
    "%": ["XX...", "XX..X", "...X.", "..X..", ".X...", "X..XX", "...XX", "....."],
    "&": [".XX..", "X..X.", "X.X..", ".X...", "X.X.X", "X..X.", ".XX.X", "....."],
    "'": ["..X..", "..X..", ".X...", ".....", ".....", ".....", ".....", "....."],
    "(": ["...X.", "..X..", ".X...", ".X...", ".X...", "..X..", "...X.", "....."],
    ")": [".X...", "..X..", "...X.", "...X.", "...X.", "..X..", ".X...", "....."],
    "*": [".....", "..X..", "X.X.X", ".XXX.", "X.X.X", "..X..", ".....", "....."],
    "+": [".....", "..X..", "..X..", "XXXXX", "..X..", "..X..", ".....", "....."],
    ",": [".....", ".....", ".....", ".....", ".....", "..XX.", "..X..", ".X..."],
    "-": [".....", ".....", ".....", "XXXXX", ".....", ".....", ".....", "....."],
    ".": [".....", ".....", ".....", ".....", ".....", ".XX..", ".XX..", "....."],
    "/": [".....", "....X", "...X.", "..X..", ".X...", "X....", ".....", "....."],
    "0": [".XXX.", "X...X", "X..XX", "X.X.X", "XX..X", "X...X", ".XXX.", "....."],
    "1": ["..X..", ".XX..", "..X..", "..X..", "..X..", "..X..", ".XXX.", "....."],
    "2": [".XXX.", "X...X", "....X", "...X.", "..X..", ".X...", "XXXXX", "....."],
    "3": ["XXXXX", "...X.", "..X..", "...X.", "....X", "X...X", ".XXX.", "....."],
    "4": ["...X.", "..XX.", ".X.X.", "X..X.", "XXXXX", "...X.", "...X.", "....."],
    "5": ["XXXXX", "X....", "XXXX.", "....X", "....X", "X...X", ".XXX.", "....."],
    "6": ["..XX.", ".X...", "X....", "XXXX.", "X...X", "X...X", ".XXX.", "....."],
    "7": ["XXXXX", "....X", "...X.", "..X..", ".X...", ".X...", ".X...", "....."],
    "8": [".XXX.", "X...X", "X...X", ".XXX.", "X...X", "X...X", ".XXX.", "....."],
    "9": [".XXX.", "X...X", "X...X", ".XXXX", "....X", "...X.", ".XX..", "....."],
    ":": [".....", ".XX..", ".XX..", ".....", ".XX..", ".XX..", ".....", "....."],
    ";": [".....", ".XX..", ".XX..", ".....", ".XX..", "..X..", ".X...", "....."],
    "<": ["...X.", "..X..", ".X...", "X....", ".X...", "..X..", "...X.", "....."],
    "=": [".....", ".....", "XXXXX", ".....", "XXXXX", ".....", ".....", "....."],
    ">": [".X...", "..X..", "...X.", "....X", "...X.", "..X..", ".X...", "....."],
    "?": [".XXX.", "X...X", "....X", "...X.", "..X..", ".....", "..X..", "....."],
    "@": [".XXX.", "X...X", "....X", ".XX.X", "X.X.X", "X.X.X", ".XXX.", "....."],
    "A": [".XXX.", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X", "....."],
    "B": ["XXXX.", "X...X", "X...X", "XXXX.", "X...X", "X...X", "XXXX.", "....."],
    "C": [".XXX.", "X...X", "X....", "X....", "X....", "X...X", ".XXX.", "....."],
    "D": ["XXXX.", "X...X", "X...X", "X...X", "X...X", "X...X", "XXXX.", "....."],
    "E": ["XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "XXXXX", "....."],
    "F": ["XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "X....", "....."],
    "G": [".XXX.", "X...X", "X....", "X.XXX", "X...X", "X...X", ".XXX.", "....."],
    "H": ["X...X", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X", "....."],
    "I": [".XXX.", "..X..", "..X..", "..X..", "..X..", "..X..", ".XXX.", "....."],
    "J": ["..XXX", "...X.", "...X.", "...X.", "...X.", "X..X.", ".XX..", "....."],
    "K": ["X...X", "X..X.", "X.X..", "XX...", "X.X..", "X..X.", "X...X", "....."],
    "L": ["X....", "X....", "X....", "X....", "X....", "X....", "XXXXX", "....."],
    "M": ["X...X", "XX.XX", "X.X.X", "X.X.X", "X...X", "X...X", "X...X", "....."],
    "N": ["X...X", "XX..X", "X.X.X", "X..XX", "X...X", "X...X", "X...X", "....."],
    "O": [".XXX.", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX.", "....."],
    "P": ["XXXX.", "X...X", "X...X", "XXXX.", "X....", "X....", "X....", "....."],
    "Q": [".XXX.", "X...X", "X...X", "X...X", "X.X.X", "X..X.", ".XX.X", "....."],
    "R": ["XXXX.", "X...X", "X...X", "XXXX.", "X.X..", "X..X.", "X...X", "....."],
    "S": [".XXXX", "X....", "X....", ".XXX.", "....X", "....X", "XXXX.", "....."],
    "T": ["XXXXX", "..X..", "..X..", "..X..", "..X..", "..X..", "..X..", "....."],
    "U": ["X...X", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX.", "....."],
    "V": ["X...X", "X...X", "X...X", "X...X", "X...X", ".X.X.", "..X..", "....."],
    "W": ["X...X", "X...X", "X...X", "X.X.X", "X.X.X", "XX.XX", "X...X", "....."],
    "X": ["X...X", "X...X", ".X.X.", "..X..", ".X.X.", "X...X", "X...X", "....."],
    "Y": ["X...X", "X...X", ".X.X.", "..X..", "..X..", "..X..", "..X..", "....."],
    "Z": ["XXXXX", "....X", "...X.", "..X..", ".X...", "X....", "XXXXX", "....."],
    "[": [".XXX.", ".X...", ".X...", ".X...", ".X...", ".X...", ".XXX.", "....."],
    "\\": [".....", "X....", ".X...", "..X..", "...X.", "....X", ".....", "....."],
    "]": [".XXX.", "...X.", "...X.", "...X.", "...X.", "...X.", ".XXX.", "....."],
    "^": ["..X..", ".X.X.", "X...X", ".....", ".....", ".....", ".....", "....."],
    "_": [".....", ".....", ".....", ".....", ".....", ".....", ".....", "XXXXX"],
    "`": [".X...", "..X..", "...X.", ".....", ".....", ".....", ".....", "....."],
    "a": [".....", ".....", ".XXX.", "....X", ".XXXX", "X...X", ".XXXX", "....."],
    "b": ["X....", "X....", "XXXX.", "X...X", "X...X", "X...X", "XXXX.", "....."],
    "c": [".....", ".....", ".XXX.", "X....", "X....", "X....", ".XXX.", "....."],
    "d": ["....X", "....X", ".XXXX", "X...X", "X...X", "X...X", ".XXXX", "....."],
    "e": [".....", ".....", ".XXX.", "X...X", "XXXXX", "X....", ".XXX.", "....."],
    "f": ["..XX.", ".X...", "XXXX.", ".X...", ".X...", ".X...", ".X...", "....."],
    "g": [".....", ".....", ".XXXX", "X...X", "X...X", ".XXXX", "....X", ".XXX."],
    "h": ["X....", "X....", "XXXX.", "X...X", "X...X", "X...X", "X...X", "....."],
    "i": ["..X..", ".....", ".XX..", "..X..", "..X..", "..X..", ".XXX.", "....."],
    "j": ["...X.", ".....", "..XX.", "...X.", "...X.", "...X.", "X..X.", ".XX.."],
    "k": ["X....", "X....", "X..X.", "X.X..", "XX...", "X.X..", "X..X.", "....."],
    "l": [".XX..", "..X..", "..X..", "..X..", "..X..", "..X..", ".XXX.", "....."],
    "m": [".....", ".....", "XX.X.", "X.X.X", "X.X.X", "X.X.X", "X.X.X", "....."],
    "n": [".....", ".....", "XXXX.", "X...X", "X...X", "X...X", "X...X", "....."],
    "o": [".....", ".....", ".XXX.", "X...X", "X...X", "X...X", ".XXX.", "....."],
    "p": [".....", ".....", "XXXX.", "X...X", "X...X", "XXXX.", "X....", "X...."],
    "q": [".....", ".....", ".XXXX", "X...X", "X...X", ".XXXX", "....X", "....X"],
    "r": [".....", ".....", "X.XX.", "XX..X", "X....", "X....", "X....", "....."],
    "s": [".....", ".....", ".XXXX", "X....", ".XXX.", "....X", "XXXX.", "....."],
    "t": [".X...", ".X...", "XXXX.", ".X...", ".X...", ".X...", "..XX.", "....."],
    "u": [".....", ".....", "X...X", "X...X", "X...X", "X...X", ".XXXX", "....."],
    "v": [".....", ".....", "X...X", "X...X", "X...X", ".X.X.", "..X..", "....."],
    "w": [".....", ".....", "X...X", "X...X", "X.X.X", "X.X.X", ".X.X.", "....."],
    "x": [".....", ".....", "X...X", ".X.X.", "..X..", ".X.X.", "X...X", "....."],
    "y": [".....", ".....", "X...X", "X...X", "X...X", ".XXXX", "....X", ".XXX."],
    "z": [".....", ".....", "XXXXX", "...X.", "..X..", ".X...", "XXXXX", "....."],
    "{": ["...XX", "..X..", "..X..", ".X...", "..X..", "..X..", "...XX", "....."],
    "|": ["..X..", "..X..", "..X..", "..X..", "..X..", "..X..", "..X..", "....."],
    "}": ["XX...", "..X..", "..X..", "...X.", "..X..", "..X..", "XX...", "....."],
    "~": [".....", ".X...", "X.X.X", "...X.", ".....", ".....", ".....", "....."],
    # German
    "ä": [".X.X.", ".....", ".XXX.", "....X", ".XXXX", "X...X", ".XXXX", "....."],
    "ö": [".X.X.", ".....", ".XXX.", "X...X", "X...X", "X...X", ".XXX.", "....."],
    "ü": [".X.X.", ".....", "X...X", "X...X", "X...X", "X...X", ".XXXX", "....."],
    "ß": [".XXX.", "X...X", "X..X.", "X.X..", "X..X.", "X...X", "X.XX.", "X...."],
    "Ä": [".X.X.", ".XXX.", "X...X", "XXXXX", "X...X", "X...X", "X...X", "....."],
    "Ö": [".X.X.", ".XXX.", "X...X", "X...X", "X...X", "X...X", ".XXX.", "....."],
    "Ü": [".X.X.", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX.", "....."],
    # French
    "é": ["...X.", "..X..", ".XXX.", "X...X", "XXXXX", "X....", ".XXX.", "....."],
    "è": [".X...", "..X..", ".XXX.", "X...X", "XXXXX", "X....", ".XXX.", "....."],
    "ê": ["..X..", ".X.X.", ".XXX.", "X...X", "XXXXX", "X....", ".XXX.", "....."],
    "ë": [".X.X.", ".....", ".XXX.", "X...X", "XXXXX", "X....", ".XXX.", "....."],
    "à": [".X...", "..X..", ".XXX.", "....X", ".XXXX", "X...X", ".XXXX", "....."],
    "â": ["..X..", ".X.X.", ".XXX.", "....X", ".XXXX", "X...X", ".XXXX", "....."],
    "ç": [".....", ".....", ".XXX.", "X....", "X....", "X....", ".XXX.", "..X.."],
    "î": ["..X..", ".X.X.", ".XX..", "..X..", "..X..", "..X..", ".XXX.", "....."],
    "ï": [".X.X.", ".....", ".XX..", "..X..", "..X..", "..X..", ".XXX.", "....."],
    "ô": ["..X..", ".X.X.", ".XXX.", "X...X", "X...X", "X...X", ".XXX.", "....."],
    "û": ["..X..", ".X.X.", "X...X", "X...X", "X...X", "X...X", ".XXXX", "....."],
    "ù": [".X...", "..X..", "X...X", "X...X", "X...X", "X...X", ".XXXX", "....."],
    "É": ["...X.", "XXXXX", "X....", "XXXX.", "X....", "X....", "XXXXX", "....."],
    "È": [".X...", "XXXXX", "X....", "XXXX.", "X....", "X....", "XXXXX", "....."],
    "À": [".X...", ".XXX.", "X...X", "XXXXX", "X...X", "X...X", "X...X", "....."],
    "Ç": [".XXX.", "X...X", "X....", "X....", "X...X", ".XXX.", "..X..", "....."],
}


def _mask(rows) -> np.ndarray:
    if len(rows) != GLYPH_H or any(len(r) != GLYPH_W for r in rows):
        raise ConfigError("glyph rows must be 8 strings of width 5")
    return np.array([[c == "X" for c in row] for row in rows], dtype=bool)


class GlyphAtlas:
    """Byte-indexed fixed-cell binary glyph masks."""

    def __init__(self, glyphs: Dict[str, list] | None = None):
        glyphs = glyphs if glyphs is not None else _G
        self.glyph_w = GLYPH_W
        self.glyph_h = GLYPH_H
        self.masks: Dict[int, np.ndarray] = {}
        for ch, rows in glyphs.items():
            byte = ord(ch.encode("latin-1"))
            self.masks[byte] = _mask(rows)
        # distinct shapes are required for template recognition
        seen = {}
        for byte, m in self.masks.items():
            key = m.tobytes()
            if key in seen and byte != ord(" "):
                raise ConfigError(
                    f"glyphs for bytes {seen[key]} and {byte} are identical")
            seen.setdefault(key, byte)

    @property
    def cell(self):
        return (self.glyph_w, self.glyph_h)

    def has(self, byte: int) -> bool:
        return int(byte) in self.masks

    def mask(self, byte: int) -> np.ndarray:
        try:
            return self.masks[int(byte)]
        except KeyError:
            raise KeyError(f"no glyph for byte {int(byte)}") from None

    def bytes_covered(self) -> Iterable[int]:
        return sorted(self.masks)

    def template_stack(self):
        """(byte ids, [n, GLYPH_H, GLYPH_W] bool stack) for vectorized matching."""
        ids = np.array(sorted(self.masks))
        stack = np.stack([self.masks[i] for i in ids])
        return ids, stack


DEFAULT_ATLAS = GlyphAtlas()
