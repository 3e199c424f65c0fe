"""NAS-based channel-wise pruning baseline.

Channels are scored once per block by the summed L2 norms of the slices that
are pruned together, seven nested candidate masks are cut from that ranking,
and each layer mixes its candidates with Gumbel-softmax weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node
from .pruners import FixedMask

PROPORTIONS = (0.0, 0.25, 0.5, 0.75, 0.875, 0.9, 0.925)
MHSA_ROLES = ("Q", "K", "V", "O")
FFN_ROLES = ("FFN.1", "FFN.2")
# roles whose channel is a column (input side) rather than a row
COLUMN_ROLES = ("O", "FFN.2")


class CandidateMaskSet:
    """Seven nested channel masks for one layer plus its architecture parameters.

    The learnable quantity is ``log_alpha`` so that alpha stays positive under
    unconstrained optimizer updates.
    """

    def __init__(self, masks, temperature=0.5):
        masks = np.asarray(masks, dtype=np.float64)
        if masks.ndim != 3 or masks.shape[0] != len(PROPORTIONS):
            raise ValueError(f"expected {len(PROPORTIONS)} candidate masks, got shape {masks.shape}")
        self.masks = masks
        self.log_alpha = Tensor(np.full(len(PROPORTIONS), np.log(1.0 / len(PROPORTIONS))), requires_grad=True,
                                name="log_alpha")
        self.temperature = temperature
        self.u = None
        self.steps = 0

    @property
    def alpha(self):
        return np.exp(self.log_alpha.data)

    @property
    def counts(self):
        return self.masks.reshape(len(self.masks), -1).sum(axis=1)

    def sample(self, rng):
        # open interval keeps both logs finite
        self.u = rng.uniform(np.finfo(float).tiny, 1.0, size=len(PROPORTIONS))
        return self.u

    def weights(self):
        """Current mixture weights lambda (requires a prior ``sample``)."""
        if self.u is None:
            raise RuntimeError("no Gumbel sample drawn for this layer")
        return gumbel_lambda(ad.exp(self.log_alpha), self.temperature, self.u)


def channel_scores(weights):
    """Per-channel summed L2 norms for one block.

    ``weights`` maps role -> (out, in) array. Returns ``(mhsa, ffn)`` score
    vectors of length d_model and d_ff.
    """
    mhsa = sum(np.linalg.norm(weights[r], axis=1) for r in ("Q", "K", "V")) + np.linalg.norm(weights["O"], axis=0)
    ffn = np.linalg.norm(weights["FFN.1"], axis=1) + np.linalg.norm(weights["FFN.2"], axis=0)
    return mhsa, ffn


def build_candidate_masks(scores, proportions=PROPORTIONS):
    """Channel keep-matrix (len(proportions), G): candidate i drops the
    floor(p_i * G) lowest-scoring channels, ties dropping the lower index first."""
    proportions = list(proportions)
    if any(p < 0 or p >= 1 for p in proportions):
        raise ValueError("proportions must lie in [0, 1)")
    if proportions != sorted(proportions) or proportions[0] != 0:
        raise ValueError("proportions must be ascending and start at 0")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(scores, kind="stable")
    keep = np.ones((len(proportions), scores.size))
    for i, p in enumerate(proportions):
        k = int(np.floor(p * scores.size + 1e-9))
        keep[i, order[:k]] = 0.0
    return keep


def expand_channel_mask(keep, role, shape):
    """Turn per-channel keep flags (C, G) into weight masks (C, out, in) for ``role``."""
    out_f, in_f = shape
    if role in COLUMN_ROLES:
        return np.repeat(keep[:, None, :], out_f, axis=1)
    return np.repeat(keep[:, :, None], in_f, axis=2)


def gumbel_lambda(alpha, temperature, u):
    """Gumbel-softmax mixture weights ``softmax((log alpha + G) / T)`` with
    ``G = -log(-log u)``; differentiable in ``alpha``."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    u = np.asarray(u, dtype=np.float64)
    if np.any(alpha.data <= 0):
        raise ValueError("alpha must be positive")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform variates must lie in (0, 1)")
    g = -np.log(-np.log(u))
    return ad.softmax_rows(ad.scale(ad.add(ad.log(alpha), Tensor(g)), 1.0 / temperature))


def supernet_weight(w, masks, lam):
    """``W * sum_i lam_i M_i``."""
    if masks.shape[1:] != w.shape:
        raise ValueError(f"masks {masks.shape[1:]} do not fit weight {w.shape}")
    wd = w.data
    mixed = np.tensordot(lam.data, masks, axes=1)

    def bwd(g):
        return g * mixed, np.tensordot(masks, g * wd, axes=([1, 2], [0, 1]))

    return make_node(wd * mixed, (w, lam), bwd)


def expected_count(lam, counts):
    """``sum_i lam_i * ||M_i||_0`` as a tape scalar."""
    counts = np.asarray(counts, dtype=np.float64)
    return make_node(np.array(float(lam.data @ counts)), (lam,), lambda g: (float(g) * counts,))


def nascp_penalty(terms, eta):
    """``eta * sum_l sum_i lam_i ||M_i||_0`` over ``(lam, counts)`` pairs."""
    total = None
    for lam, counts in terms:
        term = expected_count(lam, counts)
        total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(0.0)
    return ad.scale(total, eta)


def attach_supernet(model, temperature=0.5):
    """Score channels on the current weights and give every prunable layer
    its seven candidate masks. Masks stay frozen from here on."""
    for block in model.blocks:
        weights = {r: layer.W.data for r, layer in block.layers.items()}
        mhsa, ffn = channel_scores(weights)
        keep = {"mhsa": build_candidate_masks(mhsa), "ffn": build_candidate_masks(ffn)}
        for role, layer in block.layers.items():
            group = "mhsa" if role in MHSA_ROLES else "ffn"
            layer.attachment = CandidateMaskSet(expand_channel_mask(keep[group], role, layer.W.shape), temperature)
    return model


def module_choices(model):
    """Candidate index per (block, module): argmax of summed log alpha over the
    module's layers, so Q/K/V/O (and FFN.1/FFN.2) always agree."""
    choices = {}
    for block in model.blocks:
        for group, roles in (("mhsa", MHSA_ROLES), ("ffn", FFN_ROLES)):
            sets = [block.layers[r].attachment for r in roles]
            if not all(isinstance(s, CandidateMaskSet) for s in sets):
                raise ValueError(f"block {block.index} {group} is not a supernet module")
            score = np.sum([s.log_alpha.data for s in sets], axis=0)
            choices[(block.index, group)] = int(np.argmax(score))
    return choices


def architecture_masks(model):
    """Per-layer masks of the architecture ``finalize_architecture`` would pick."""
    choices = module_choices(model)
    out = []
    for layer in model.prunable_layers():
        group = "mhsa" if layer.role in MHSA_ROLES else "ffn"
        out.append(layer.attachment.masks[choices[(layer.block, group)]])
    return out


def architecture_sparsity(model):
    masks = architecture_masks(model)
    return 1.0 - sum(np.count_nonzero(m) for m in masks) / sum(m.size for m in masks)


def finalize_architecture(model):
    """Replace every candidate set by its chosen mask; alphas are dropped."""
    layers = model.prunable_layers()
    if any(layer.attachment.steps == 0 for layer in layers if isinstance(layer.attachment, CandidateMaskSet)):
        raise ValueError("supernet has not been trained")
    masks = architecture_masks(model)
    for layer, mask in zip(layers, masks):
        layer.attachment = FixedMask(mask)
    return model
