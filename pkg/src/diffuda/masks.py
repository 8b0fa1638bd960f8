"""Nested disc/cup label masks and their single-file pixel encoding.

Pixel code table: 0 = background, 128 = disc only, 255 = cup (cup pixels
are also disc pixels by the nesting invariant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND_CODE = 0
DISC_CODE = 128
CUP_CODE = 255


@dataclass
class LabelMask:
    """Binary disc and cup masks with cup contained in disc."""

    disc: np.ndarray
    cup: np.ndarray

    def __post_init__(self):
        self.disc = np.asarray(self.disc, dtype=bool)
        self.cup = np.asarray(self.cup, dtype=bool)
        if self.disc.shape != self.cup.shape:
            raise ValueError(f"disc {self.disc.shape} and cup {self.cup.shape} differ")
        if np.any(self.cup & ~self.disc):
            raise ValueError("cup mask must be contained in disc mask")

    @classmethod
    def nested(cls, disc, cup) -> "LabelMask":
        """Build a mask pair, forcing cup inside disc."""
        disc = np.asarray(disc, dtype=bool)
        cup = np.asarray(cup, dtype=bool) & disc
        return cls(disc=disc, cup=cup)

    @property
    def shape(self):
        return self.disc.shape

    def to_codes(self) -> np.ndarray:
        codes = np.full(self.disc.shape, BACKGROUND_CODE, dtype=np.uint8)
        codes[self.disc & ~self.cup] = DISC_CODE
        codes[self.cup] = CUP_CODE
        return codes

    @classmethod
    def from_codes(cls, codes: np.ndarray) -> "LabelMask":
        codes = np.asarray(codes)
        cup = codes == CUP_CODE
        disc = (codes == DISC_CODE) | cup
        return cls(disc=disc, cup=cup)
