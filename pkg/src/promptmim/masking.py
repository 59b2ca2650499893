"""Visible/masked partitions of a patch grid.

Two sampling strategies are provided: uniform random masking and
block-wise masking that removes contiguous rectangles.  Both satisfy the
same count law, ``|masked| == floor(ratio * n_patches)``, which keeps at
least one patch visible for every ratio below 1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError

STRATEGIES = ("random", "block")

# Block sampler bounds: minimum rectangle area (cells) and aspect range,
# scaled down for a 4x4 grid from the usual block-masking recipe.
MIN_BLOCK_AREA = 4
ASPECT_RANGE = (0.5, 2.0)


def _seed_material(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def rng_from(*keys) -> np.random.Generator:
    """Deterministic, platform-stable generator derived from mixed keys.

    Strings are hashed; ints pass through.  The same key tuple always
    yields the same stream, and distinct tuples yield independent ones.
    """
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([_seed_material(k) for k in keys]))
    )


@dataclass(frozen=True)
class MaskSpec:
    """Masking strategy, ratio and base seed, as persisted in run manifests."""

    strategy: str = "random"
    ratio: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InputError(f"unknown masking strategy {self.strategy!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise InputError(f"mask ratio must be in [0, 1), got {self.ratio}")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "ratio": self.ratio, "seed": self.seed}


@dataclass(frozen=True)
class MaskResult:
    """Sorted visible/masked index partition of ``n_patches`` cells."""

    visible: tuple[int, ...]
    masked: tuple[int, ...]
    n_patches: int

    def __post_init__(self):
        combined = sorted(self.visible + self.masked)
        if combined != list(range(self.n_patches)):
            raise InputError("visible/masked must partition the patch range")


def masked_count(ratio: float, n_patches: int) -> int:
    # Floor keeps at least one patch visible for any ratio < 1.
    return math.floor(ratio * n_patches)


def sample_random_mask(
    n_patches: int, ratio: float, rng: np.random.Generator
) -> MaskResult:
    """Mask ``floor(ratio * n)`` indices drawn uniformly without replacement."""
    if n_patches < 1:
        raise InputError("need at least one patch")
    if not 0.0 <= ratio < 1.0:
        raise InputError(f"mask ratio must be in [0, 1), got {ratio}")
    n_masked = masked_count(ratio, n_patches)
    perm = rng.permutation(n_patches)
    masked = sorted(int(i) for i in perm[:n_masked])
    visible = sorted(set(range(n_patches)) - set(masked))
    return MaskResult(tuple(visible), tuple(masked), n_patches)


def block_rectangles(
    grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator
) -> tuple[list[tuple[int, int, int, int]], list[int]]:
    """Sample rectangles until coverage reaches the target count.

    Returns the rectangles as (top, left, height, width) and the masked
    cell indices in the order they were first covered (row-major within
    each rectangle).  Callers trim the tail of that order to hit the
    exact count law.
    """
    if grid_h < 1 or grid_w < 1:
        raise InputError("grid must have at least one cell")
    if not 0.0 <= ratio < 1.0:
        raise InputError(f"mask ratio must be in [0, 1), got {ratio}")
    n = grid_h * grid_w
    target = masked_count(ratio, n)
    rects: list[tuple[int, int, int, int]] = []
    order: list[int] = []
    covered: set[int] = set()
    lo, hi = np.log(ASPECT_RANGE[0]), np.log(ASPECT_RANGE[1])
    draws = 0
    while len(order) < target:
        draws += 1
        if draws > 10_000:  # unreachable in practice; keeps termination provable
            for cell in range(n):
                if cell not in covered and len(order) < target:
                    order.append(cell)
                    covered.add(cell)
            break
        remaining = target - len(order)
        h = w = 0
        for _ in range(100):
            area = int(
                rng.integers(MIN_BLOCK_AREA, max(MIN_BLOCK_AREA, remaining) + 1)
            )
            aspect = float(np.exp(rng.uniform(lo, hi)))
            h = max(1, round(math.sqrt(area * aspect)))
            w = max(1, round(math.sqrt(area / aspect)))
            # Rounding can break the area or aspect bounds; resample until
            # the realized rectangle honors both and fits the grid.
            if (
                h * w >= MIN_BLOCK_AREA
                and ASPECT_RANGE[0] <= h / w <= ASPECT_RANGE[1]
                and h <= grid_h
                and w <= grid_w
            ):
                break
        else:
            h = w = min(2, grid_h, grid_w)
        top = int(rng.integers(0, grid_h - h + 1))
        left = int(rng.integers(0, grid_w - w + 1))
        rects.append((top, left, h, w))
        for r in range(top, top + h):
            for c in range(left, left + w):
                cell = r * grid_w + c
                if cell not in covered:
                    covered.add(cell)
                    order.append(cell)
    return rects, order


def sample_block_mask(
    grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator
) -> MaskResult:
    """Mask a union of rectangles, trimmed in last-covered order to the count law."""
    n = grid_h * grid_w
    target = masked_count(ratio, n)
    _, order = block_rectangles(grid_h, grid_w, ratio, rng)
    masked = sorted(order[:target])
    visible = sorted(set(range(n)) - set(masked))
    return MaskResult(tuple(visible), tuple(masked), n)


def sample_mask(
    spec: MaskSpec, grid_h: int, grid_w: int, rng: np.random.Generator
) -> MaskResult:
    if spec.strategy == "random":
        return sample_random_mask(grid_h * grid_w, spec.ratio, rng)
    return sample_block_mask(grid_h, grid_w, spec.ratio, rng)


def apply_mask(grid, mask: MaskResult):
    """Select the visible patches of a grid, keeping their original indices.

    Returns (indices, patches) where ``patches[k]`` is the pixel vector of
    patch ``indices[k]``, in ascending index order.
    """
    if mask.n_patches != grid.n_patches:
        raise DimensionError(
            f"mask covers {mask.n_patches} patches, grid has {grid.n_patches}"
        )
    idx = list(mask.visible)
    return idx, grid.patches[idx]


def adjacency_count(mask: MaskResult, grid_h: int, grid_w: int) -> int:
    """Number of masked cells that touch another masked cell (4-neighborhood)."""
    masked = set(mask.masked)
    count = 0
    for cell in mask.masked:
        r, c = divmod(cell, grid_w)
        neighbors = []
        if r > 0:
            neighbors.append(cell - grid_w)
        if r < grid_h - 1:
            neighbors.append(cell + grid_w)
        if c > 0:
            neighbors.append(cell - 1)
        if c < grid_w - 1:
            neighbors.append(cell + 1)
        if any(nb in masked for nb in neighbors):
            count += 1
    return count
