"""Desk-scale transformer encoder with six prunable linear layers per block.

A batch is a packed ``(sum(frames), F)`` matrix; attention is kept inside
each utterance with a block-diagonal additive mask so every op stays 2-D.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gates import SelfPinchGate, gated_weight, hard_mask, layer_sparsity
from .nascp import CandidateMaskSet, architecture_masks, supernet_weight
from .pruners import FixedMask

ROLES = ("Q", "K", "V", "O", "FFN.1", "FFN.2")
_MASKED = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int = 2
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    vocab_size: int = 12
    feature_dim: int = 8

    def __post_init__(self):
        for name in ("blocks", "d_model", "d_ff", "heads", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must include blank and at least one token")


class PrunableLinear:
    def __init__(self, role, block, out_features, in_features, rng):
        self.role = role
        self.block = block
        self.W = Tensor(rng.normal(scale=1.0 / math.sqrt(in_features), size=(out_features, in_features)),
                        requires_grad=True, name=self.name)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{self.name}.bias")
        self.attachment = None
        self.mask_weight_grad = True

    @property
    def name(self):
        return f"block{self.block}.{self.role}"

    @property
    def kind(self):
        a = self.attachment
        if a is None:
            return "none"
        if isinstance(a, SelfPinchGate):
            return "gate"
        if isinstance(a, FixedMask):
            return "fixed"
        if isinstance(a, CandidateMaskSet):
            return "candidates"
        raise TypeError(f"unknown attachment {type(a).__name__}")

    def effective_weight(self):
        a = self.attachment
        kind = self.kind
        if kind == "none":
            return self.W
        if kind == "gate":
            return gated_weight(self.W, a, self.mask_weight_grad)
        if kind == "fixed":
            return ad.mul(self.W, Tensor(a.mask))
        return supernet_weight(self.W, a.masks, a.weights())

    def retained_mask(self):
        """Binary mask of weights kept by the current attachment."""
        kind = self.kind
        if kind == "none":
            return np.ones(self.W.shape)
        if kind == "gate":
            return hard_mask(self.W, self.attachment)
        if kind == "fixed":
            return np.array(self.attachment.mask)
        raise ValueError(f"{self.name}: a supernet layer's mask depends on its whole module; use retained_masks(model)")

    def __call__(self, x):
        return ad.linear(x, self.effective_weight(), self.bias)


class Block:
    def __init__(self, index, cfg, rng):
        d, f = cfg.d_model, cfg.d_ff
        self.index = index
        self.heads = cfg.heads
        self.ln1 = (Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))
        self.ln2 = (Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))
        shapes = {"Q": (d, d), "K": (d, d), "V": (d, d), "O": (d, d), "FFN.1": (f, d), "FFN.2": (d, f)}
        self.layers = {r: PrunableLinear(r, index, *shapes[r], rng) for r in ROLES}

    def __call__(self, h, attn_mask):
        L = self.layers
        a = ad.layer_norm(h, *self.ln1)
        q, k, v = L["Q"](a), L["K"](a), L["V"](a)
        dh = q.shape[1] // self.heads
        scale = 1.0 / math.sqrt(dh)
        heads = []
        for i in range(self.heads):
            lo, hi = i * dh, (i + 1) * dh
            qh, kh, vh = ad.cols(q, lo, hi), ad.cols(k, lo, hi), ad.cols(v, lo, hi)
            scores = ad.add(ad.scale(ad.matmul(qh, ad.transpose(kh)), scale), attn_mask)
            heads.append(ad.matmul(ad.softmax_rows(scores), vh))
        h = ad.add(h, L["O"](ad.concat_cols(heads)))
        f = ad.layer_norm(h, *self.ln2)
        f = L["FFN.2"](ad.gelu(L["FFN.1"](f)))
        return ad.add(h, f)

    def attention_weights(self, h, attn_mask):
        """Per-head attention probabilities (no tape), for inspection."""
        L = self.layers
        a = ad.layer_norm(Tensor(h), *self.ln1)
        q, k = L["Q"](a).data, L["K"](a).data
        dh = q.shape[1] // self.heads
        out = []
        for i in range(self.heads):
            s = q[:, i * dh:(i + 1) * dh] @ k[:, i * dh:(i + 1) * dh].T / math.sqrt(dh) + attn_mask.data
            s = np.exp(s - s.max(axis=1, keepdims=True))
            out.append(s / s.sum(axis=1, keepdims=True))
        return out


def positional_encoding(frames, d):
    pos = np.arange(frames)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def block_diagonal_mask(lengths):
    n = int(np.sum(lengths))
    mask = np.full((n, n), _MASKED)
    start = 0
    for length in lengths:
        mask[start:start + length, start:start + length] = 0.0
        start += length
    return mask


class Encoder:
    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or EncoderConfig()
        rng = np.random.default_rng([seed, 0xE4C0DE])
        d = self.cfg.d_model
        self.w_in = Tensor(rng.normal(scale=1.0 / math.sqrt(self.cfg.feature_dim), size=(d, self.cfg.feature_dim)),
                           requires_grad=True)
        self.b_in = Tensor(np.zeros(d), requires_grad=True)
        self.blocks = [Block(p, self.cfg, rng) for p in range(self.cfg.blocks)]
        self.ln_f = (Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))
        self.w_out = Tensor(rng.normal(scale=1.0 / math.sqrt(d), size=(self.cfg.vocab_size, d)), requires_grad=True)
        self.b_out = Tensor(np.zeros(self.cfg.vocab_size), requires_grad=True)
        self._mask_cache = {}

    # structure ---------------------------------------------------------

    def prunable_layers(self):
        """Every prunable layer, ordered by block then role (Q, K, V, O, FFN.1, FFN.2)."""
        return [b.layers[r] for b in self.blocks for r in ROLES]

    def layer(self, block, role):
        return self.blocks[block].layers[role]

    def named_parameters(self):
        """(name, tensor) for every trainable array, in a stable order."""
        out = [("input.W", self.w_in), ("input.bias", self.b_in)]
        for b in self.blocks:
            p = f"block{b.index}"
            out += [(f"{p}.ln1.gain", b.ln1[0]), (f"{p}.ln1.bias", b.ln1[1])]
            out += [(f"{p}.ln2.gain", b.ln2[0]), (f"{p}.ln2.bias", b.ln2[1])]
            for r in ROLES:
                layer = b.layers[r]
                out += [(layer.name, layer.W), (f"{layer.name}.bias", layer.bias)]
        out += [("final_ln.gain", self.ln_f[0]), ("final_ln.bias", self.ln_f[1])]
        out += [("output.W", self.w_out), ("output.bias", self.b_out)]
        return out

    def pruning_parameters(self):
        """(name, tensor) for thresholds and architecture parameters."""
        out = []
        for layer in self.prunable_layers():
            if layer.kind == "gate":
                out.append((f"{layer.name}.threshold", layer.attachment.t))
            elif layer.kind == "candidates":
                out.append((f"{layer.name}.log_alpha", layer.attachment.log_alpha))
        return out

    def set_temperature(self, value):
        """Set gate tau and Gumbel T on every attached layer."""
        for layer in self.prunable_layers():
            if layer.kind == "gate":
                layer.attachment.tau = value
            elif layer.kind == "candidates":
                layer.attachment.temperature = value

    def clone(self):
        fresh = copy.deepcopy(self)
        fresh._mask_cache = {}
        return fresh

    # forward -----------------------------------------------------------

    def _attn_mask(self, lengths):
        key = tuple(lengths)
        if key not in self._mask_cache:
            if len(self._mask_cache) > 64:
                self._mask_cache.clear()
            self._mask_cache[key] = Tensor(block_diagonal_mask(lengths))
        return self._mask_cache[key]

    def forward(self, features, lengths=None):
        """Log-probabilities ``(sum(frames), V)`` for a packed batch."""
        feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.cfg.feature_dim:
            raise ValueError(f"features must be (frames, {self.cfg.feature_dim}), got {feats.shape}")
        if lengths is None:
            lengths = [feats.shape[0]]
        lengths = [int(n) for n in lengths]
        if not lengths or sum(lengths) != feats.shape[0] or min(lengths) < 1:
            raise ValueError("lengths must be positive and sum to the number of frames")
        pe = np.vstack([positional_encoding(n, self.cfg.d_model) for n in lengths])
        h = ad.add(ad.linear(Tensor(feats), self.w_in, self.b_in), Tensor(pe))
        mask = self._attn_mask(lengths)
        for block in self.blocks:
            h = block(h, mask)
        h = ad.layer_norm(h, *self.ln_f)
        return ad.log_softmax_rows(ad.linear(h, self.w_out, self.b_out))

    __call__ = forward


def count_pruning_params(model):
    """Learnable parameters added for pruning: one threshold per gated layer,
    seven architecture parameters per supernet layer."""
    return int(sum(t.data.size for _, t in model.pruning_parameters()))


def retained_masks(model):
    """Binary keep-mask per prunable layer; supernet layers report the
    architecture that finalization would select."""
    layers = model.prunable_layers()
    if any(layer.kind == "candidates" for layer in layers):
        return architecture_masks(model)
    return [layer.retained_mask() for layer in layers]


def overall_sparsity(model):
    """Zeroed fraction over all prunable-layer weights (norms, biases and
    projections excluded)."""
    masks = retained_masks(model)
    kept = sum(int(np.count_nonzero(m)) for m in masks)
    return 1.0 - kept / sum(m.size for m in masks)


def layer_sparsities(model):
    return [layer_sparsity(m) for m in retained_masks(model)]


def attach_gates(model, t=None, tau=0.5, mask_weight_grad=True):
    from .gates import T_INIT

    for layer in model.prunable_layers():
        layer.attachment = SelfPinchGate(T_INIT if t is None else t, tau)
        layer.mask_weight_grad = mask_weight_grad
    return model


# checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = "PINCHGATE-CHECKPOINT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _checkpoint_arrays(model):
    arrays = list(model.named_parameters())
    for layer in model.prunable_layers():
        kind = layer.kind
        if kind == "gate":
            arrays.append((f"{layer.name}.threshold", layer.attachment.t))
        elif kind == "fixed":
            arrays.append((f"{layer.name}.mask", Tensor(layer.attachment.mask)))
        elif kind == "candidates":
            arrays.append((f"{layer.name}.log_alpha", layer.attachment.log_alpha))
            arrays.append((f"{layer.name}.candidates", Tensor(layer.attachment.masks)))
    return arrays


def save_checkpoint(model, path):
    """Text manifest line followed by little-endian float64 arrays in manifest order."""
    arrays = _checkpoint_arrays(model)
    roster = []
    for layer in model.prunable_layers():
        entry = {"name": layer.name, "role": layer.role, "block": layer.block, "shape": list(layer.W.shape),
                 "attachment": layer.kind, "mask_weight_grad": layer.mask_weight_grad}
        if layer.kind == "gate":
            entry["tau"] = layer.attachment.tau
        elif layer.kind == "candidates":
            entry["temperature"] = layer.attachment.temperature
            entry["steps"] = layer.attachment.steps
        roster.append(entry)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "layers": roster,
        "arrays": [{"name": n, "shape": list(t.shape)} for n, t in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        for _, t in arrays:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode(errors="replace").split()
        if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if header[1] != str(CHECKPOINT_VERSION):
            raise CheckpointError(f"{path}: checkpoint version {header[1]}, expected {CHECKPOINT_VERSION}")
        try:
            manifest = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
        blob = fh.read()

    model = Encoder(EncoderConfig(**manifest["config"]))
    for entry in manifest["layers"]:
        layer = model.layer(entry["block"], entry["role"])
        if list(layer.W.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: layer {entry['name']} shape {entry['shape']} disagrees with config")
        layer.mask_weight_grad = entry.get("mask_weight_grad", True)
        kind = entry["attachment"]
        if kind == "gate":
            layer.attachment = SelfPinchGate(0.0, entry["tau"])
        elif kind == "fixed":
            layer.attachment = FixedMask(np.ones(layer.W.shape))
        elif kind == "candidates":
            cset = CandidateMaskSet(np.ones((7,) + layer.W.shape), entry["temperature"])
            cset.steps = entry["steps"]
            layer.attachment = cset
        elif kind != "none":
            raise CheckpointError(f"{path}: unknown attachment kind {kind!r}")

    expected = _checkpoint_arrays(model)
    listed = [(a["name"], tuple(a["shape"])) for a in manifest["arrays"]]
    if listed != [(n, t.shape) for n, t in expected]:
        raise CheckpointError(f"{path}: array roster does not match the layer manifest")
    need = sum(int(np.prod(s)) for _, s in listed) * 8
    if len(blob) != need:
        raise CheckpointError(f"{path}: truncated or oversized payload ({len(blob)} bytes, expected {need})")

    values = np.frombuffer(blob, dtype="<f8")
    pos = 0
    by_name = {}
    for name, shape in listed:
        n = int(np.prod(shape))
        by_name[name] = values[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
    for name, t in model.named_parameters():
        t.data = by_name[name]
    for layer in model.prunable_layers():
        if layer.kind == "gate":
            layer.attachment.t.data = by_name[f"{layer.name}.threshold"]
        elif layer.kind == "fixed":
            layer.attachment = FixedMask(by_name[f"{layer.name}.mask"])
        elif layer.kind == "candidates":
            layer.attachment.log_alpha.data = by_name[f"{layer.name}.log_alpha"]
            layer.attachment.masks = by_name[f"{layer.name}.candidates"]
    return model
