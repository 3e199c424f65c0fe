"""Uniform magnitude pruning and mixed-sparsity transfer.

Both build immutable per-layer masks from weight magnitudes; they differ
only in where the per-layer sparsity comes from (one shared fraction vs. a
profile learned by a gated model).
"""

from __future__ import annotations

import numpy as np

from .gates import layer_sparsity


class FixedMask:
    """Immutable binary mask applied to a layer's weights."""

    def __init__(self, mask):
        self.mask = np.array(mask, dtype=np.float64)
        self.mask.setflags(write=False)


def pruned_count(p, n):
    # guard against p*n landing a hair below an integer (0.29 * 100 -> 28.999...)
    return int(np.floor(p * n + 1e-9))


def ump_mask(w, p):
    """Zero the floor(p * size) smallest-magnitude entries; ties prune the lower flat index first."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"pruning fraction must lie in [0, 1], got {p}")
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    k = pruned_count(p, w.size)
    order = np.argsort(np.abs(w).ravel(), kind="stable")
    mask = np.ones(w.size)
    mask[order[:k]] = 0.0
    return mask.reshape(w.shape)


def extract_layer_sparsities(model):
    """Hard-mask sparsity of every gated layer, in block-then-role order."""
    layers = model.prunable_layers()
    if not any(layer.kind == "gate" for layer in layers):
        raise ValueError("model carries no self-pinching gates")
    out = []
    for layer in layers:
        if layer.kind != "gate":
            raise ValueError(f"layer {layer.name} is not gated")
        out.append(layer_sparsity(layer.retained_mask()))
    return out


def mixed_sparsity_transfer(uncompressed, sparsities):
    """Copy of ``uncompressed`` with magnitude masks at the given per-layer sparsities.

    No weights change and no training follows.
    """
    layers = uncompressed.prunable_layers()
    if len(sparsities) != len(layers):
        raise ValueError(f"got {len(sparsities)} sparsities for {len(layers)} prunable layers")
    pruned = uncompressed.clone()
    for layer, s in zip(pruned.prunable_layers(), sparsities):
        if layer.kind != "none":
            raise ValueError(f"layer {layer.name} already carries a {layer.kind} attachment")
        layer.attachment = FixedMask(ump_mask(layer.W.data, s))
    return pruned


def apply_ump(model, p):
    """Uniform magnitude pruning: every layer at the same fraction ``p``."""
    return mixed_sparsity_transfer(model, [p] * len(model.prunable_layers()))
