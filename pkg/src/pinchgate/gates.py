"""Self-pinching gates: one learnable magnitude threshold per weight matrix.

A weight survives when ``W**2 >= t**2``. Training sees a sigmoid soft mask
``sigmoid((W**2 - t**2) / tau)`` that is rounded in the forward pass and
differentiated through its soft values in the backward pass.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor, make_node

T_INIT = 1e-5


class SelfPinchGate:
    """Learnable threshold ``t`` plus the (scheduled, not learned) temperature ``tau``."""

    def __init__(self, t=T_INIT, tau=0.5):
        self.t = Tensor(np.array(float(t)), requires_grad=True, name="threshold")
        self.tau = tau

    @property
    def tau(self):
        return self._tau

    @tau.setter
    def tau(self, value):
        if not value > 0:
            raise ValueError(f"tau must be positive, got {value}")
        self._tau = float(value)

    @property
    def threshold(self):
        return float(self.t.data)


def soft_mask(w, gate, weight_grad=True):
    """Per-entry retention probability ``sigmoid((W**2 - t**2) / tau)``.

    With ``weight_grad=False`` the mask is treated as constant in ``W`` and
    only the threshold receives a gradient through it.
    """
    tau = gate.tau
    wd = w.data
    t = float(gate.t.data)
    diff = wd * wd - t * t
    m = np.array(expit(diff / tau))
    # expit rounds to exactly 0.5 for |z| < 1e-16; keep rounding consistent with hard_mask.
    m[(diff < 0) & (m >= 0.5)] = np.nextafter(0.5, 0.0)
    dm = m * (1.0 - m) / tau

    def bwd(g):
        gw = g * dm * 2.0 * wd if weight_grad else None
        gt = np.array(-2.0 * t * float((g * dm).sum()))
        return gw, gt

    return make_node(m, (w, gate.t), bwd)


def hard_mask(w, gate):
    """Binary retention indicator ``W**2 >= t**2``."""
    t = float(gate.t.data if isinstance(gate, SelfPinchGate) else gate)
    wd = w.data if isinstance(w, Tensor) else np.asarray(w)
    return (wd * wd >= t * t).astype(np.float64)


def layer_sparsity(mask):
    """Fraction of zero entries in a binary mask."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if mask.size == 0:
        raise ValueError("layer_sparsity: empty mask")
    return 1.0 - np.count_nonzero(mask) / mask.size


def gated_weight(w, gate, weight_grad=True):
    """``W * round(soft_mask(W))``: pruned forward, straight-through backward."""
    return ad.mul(w, ad.ste_round(soft_mask(w, gate, weight_grad)))


def gated_forward(x, w, bias, gate, weight_grad=True):
    return ad.linear(x, gated_weight(w, gate, weight_grad), bias)


def l0_surrogate(w, gate, weight_grad=True):
    """Retained-weight count: forward equals ``||hard_mask||_0``, backward is
    the gradient of the soft mask sum."""
    return ad.sum(ad.ste_round(soft_mask(w, gate, weight_grad)))
