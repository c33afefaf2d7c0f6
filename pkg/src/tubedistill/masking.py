"""Tube masking: one random spatial keep/drop pattern shared by every temporal slice.

The same spatial positions are kept in all temporal slices of the token grid,
so masked content forms tubes through time. Masks are never persisted; they are
re-derived from seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError
from .util import derive_rng
from .validation import require


@dataclass(frozen=True)
class TokenGrid:
    """Token layout of a tubelet-tokenized clip."""

    temporal_slices: int
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        if self.temporal_slices < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise ConfigurationError(f"degenerate token grid: {self}")

    @property
    def spatial_positions(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def total_tokens(self) -> int:
        return self.temporal_slices * self.spatial_positions

    @classmethod
    def for_video(cls, frames: int, tubelet_size: int, height: int, width: int, patch_size: int) -> "TokenGrid":
        if frames % tubelet_size != 0:
            raise ConfigurationError(f"frames={frames} not divisible by tubelet_size={tubelet_size}")
        if height % patch_size != 0 or width % patch_size != 0:
            raise ConfigurationError(f"{height}x{width} not divisible by patch_size={patch_size}")
        return cls(frames // tubelet_size, height // patch_size, width // patch_size)


def kept_spatial_count(ratio: float, spatial_positions: int) -> int:
    """Number of spatial positions kept at mask ratio `ratio`.

    round() on the unmasked fraction, floored at 1 so the visible set is never
    empty at extreme ratios.
    """
    return max(1, int(math.floor((1.0 - ratio) * spatial_positions + 0.5)))


@dataclass(frozen=True)
class TubeMask:
    """A kept spatial index set replicated across all temporal slices."""

    grid: TokenGrid
    kept_spatial: tuple[int, ...]
    ratio: float

    def __post_init__(self) -> None:
        expected = kept_spatial_count(self.ratio, self.grid.spatial_positions)
        if len(self.kept_spatial) != expected:
            raise ConfigurationError(
                f"kept_spatial has {len(self.kept_spatial)} entries, expected {expected}"
            )
        if list(self.kept_spatial) != sorted(set(self.kept_spatial)):
            raise ConfigurationError("kept_spatial must be sorted and unique")
        if self.kept_spatial and not (0 <= self.kept_spatial[0] and self.kept_spatial[-1] < self.grid.spatial_positions):
            raise ConfigurationError("kept_spatial index out of range")

    @property
    def n_visible(self) -> int:
        return self.grid.temporal_slices * len(self.kept_spatial)

    @cached_property
    def visible_indices(self) -> np.ndarray:
        """Visible token indices in canonical slice-major, spatial-ascending order."""
        kept = np.asarray(self.kept_spatial, dtype=np.int64)
        slices = np.arange(self.grid.temporal_slices, dtype=np.int64) * self.grid.spatial_positions
        return (slices[:, None] + kept[None, :]).reshape(-1)

    @cached_property
    def masked_indices(self) -> np.ndarray:
        """Masked token indices, same canonical ordering."""
        s = self.grid.spatial_positions
        dropped = np.setdiff1d(np.arange(s, dtype=np.int64), np.asarray(self.kept_spatial, dtype=np.int64))
        slices = np.arange(self.grid.temporal_slices, dtype=np.int64) * s
        return (slices[:, None] + dropped[None, :]).reshape(-1)


def tube_mask(grid: TokenGrid, ratio: float, seed: int) -> TubeMask:
    """Sample a tube mask: kept positions drawn uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"mask ratio must be in [0, 1), got {ratio}")
    n_keep = kept_spatial_count(ratio, grid.spatial_positions)
    rng = derive_rng(seed, "tube-mask")
    kept = np.sort(rng.choice(grid.spatial_positions, size=n_keep, replace=False))
    return TubeMask(grid=grid, kept_spatial=tuple(int(k) for k in kept), ratio=float(ratio))


def apply_mask(tokens, mask: TubeMask):
    """Select the visible rows of a full token sequence.

    tokens: array or tensor of shape (I, dim). Returns (visible rows in canonical
    order, visible index array). Works for numpy arrays and torch tensors alike.
    """
    require(
        tokens.shape[0] == mask.grid.total_tokens,
        f"token count {tokens.shape[0]} does not match grid total {mask.grid.total_tokens}",
    )
    indices = mask.visible_indices
    return tokens[indices], indices
