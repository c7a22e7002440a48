"""Shared patch sampling and paired embedding assembly.

One plan is drawn per training step and reused for the input and output
images, so embeddings at the same list position form a positive pair and the
remaining S-1 positions of the same image are its negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensorcore import Tensor


@dataclass
class PatchPlan:
    """Flat spatial indices per tap layer, drawn without replacement."""

    layer_shapes: tuple[tuple[int, int], ...]
    indices: list[np.ndarray]

    @property
    def patches_per_layer(self) -> int:
        return len(self.indices[0]) if self.indices else 0


@dataclass
class PatchEmbeddingSet:
    """Index-aligned unit-norm embeddings, one (B, S, E) pair per tap layer.

    ``w`` holds input-side embeddings, ``z`` output-side ones; position q of
    ``w[l]`` and ``z[l]`` is a positive pair and the other S-1 positions of the
    same image are its negatives.
    """

    w: list[Tensor]
    z: list[Tensor]

    def __post_init__(self):
        if len(self.w) != len(self.z) or not self.w:
            raise ContractError("PatchEmbeddingSet: need matching, non-empty layer lists")
        for tw, tz in zip(self.w, self.z):
            if tw.shape != tz.shape:
                raise ContractError(f"PatchEmbeddingSet: shape mismatch {tw.shape} vs {tz.shape}")
            if tw.shape[1] < 2:
                raise ContractError("PatchEmbeddingSet: need at least 2 patches per layer")

    @property
    def n_layers(self) -> int:
        return len(self.w)


def sample_plan(layer_shapes, s: int, rng: np.random.Generator | int) -> PatchPlan:
    """Draw `s` distinct flat locations per layer, uniformly."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if s < 2:
        raise ContractError(f"sample_plan: need s >= 2, got {s}")
    shapes = tuple((int(h), int(w)) for h, w in layer_shapes)
    indices = []
    for h, w in shapes:
        cells = h * w
        if s > cells:
            raise ContractError(f"sample_plan: s={s} exceeds layer size {h}x{w}")
        indices.append(np.sort(rng.choice(cells, size=s, replace=False)).astype(np.int64))
    return PatchPlan(shapes, indices)


def build_pairs(plan: PatchPlan, taps_x, taps_y, heads) -> PatchEmbeddingSet:
    """Embed both tap stacks at the plan's locations with the same heads."""
    for tap, (h, w) in zip(taps_x, plan.layer_shapes):
        if (tap.shape[2], tap.shape[3]) != (h, w):
            raise ContractError(
                f"build_pairs: plan drawn for {h}x{w}, tap is {tap.shape[2]}x{tap.shape[3]}"
            )
    return PatchEmbeddingSet(
        w=heads.project(taps_x, plan.indices),
        z=heads.project(taps_y, plan.indices),
    )
