"""Time and frequency masking of feature maps (SpecAugment style)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMap

AXES = {"frequency": 0, "time": 1}
FILLS = ("mean", "zero")


@dataclass(frozen=True)
class MaskSpec:
    """One masking policy.

    ``max_width=None`` means 20% of the masked axis, resolved against the map
    being augmented.
    """

    axis: str = "time"
    max_width: int | None = None
    n_masks: int = 1
    fill: str = "mean"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"mask axis must be one of {sorted(AXES)}, got {self.axis!r}")
        if self.fill not in FILLS:
            raise ValueError(f"mask fill must be one of {FILLS}, got {self.fill!r}")
        if self.n_masks < 0 or (self.max_width is not None and self.max_width < 0):
            raise ValueError("n_masks and max_width must be non-negative")

    def width_for(self, extent: int) -> int:
        width = max(1, int(0.2 * extent)) if self.max_width is None else int(self.max_width)
        if width > extent:
            raise ValueError(f"mask width {width} exceeds the {self.axis} extent {extent}")
        return width


TIME_MASK = MaskSpec("time")
FREQ_MASK = MaskSpec("frequency")


def mask_array(x: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Mask a single (n_mcep, n_frames) array or a batch (..., n_mcep, n_frames).

    Batched input draws independent bands per map.  The input is never mutated.
    """
    x = np.asarray(x)
    axis = x.ndim - 2 + AXES[spec.axis]
    extent = x.shape[axis]
    max_width = spec.width_for(extent)
    out = x.copy()
    if spec.n_masks == 0 or max_width == 0:
        return out
    flat = out.reshape(-1, *x.shape[-2:])
    src = x.reshape(-1, *x.shape[-2:])
    for k in range(len(flat)):
        fill = src[k].mean(dtype=np.float64) if spec.fill == "mean" else 0.0
        for _ in range(spec.n_masks):
            w = int(rng.integers(0, max_width + 1))
            start = int(rng.integers(0, extent - w + 1))
            if AXES[spec.axis] == 0:
                flat[k, start : start + w, :] = fill
            else:
                flat[k, :, start : start + w] = fill
    return out


def apply_mask(x: FeatureMap, spec: MaskSpec, rng: np.random.Generator) -> FeatureMap:
    return FeatureMap(mask_array(x.data, spec, rng), x.domain)


def augment_pair(x: FeatureMap, t1: MaskSpec, t2: MaskSpec, rng: np.random.Generator):
    """Two views of ``x``: ``(t1(x), t2(x))`` with independent draws."""
    return apply_mask(x, t1, rng), apply_mask(x, t2, rng)
