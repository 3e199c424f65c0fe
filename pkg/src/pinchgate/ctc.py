"""CTC loss, best-path decoding and token error rate.

Blank is vocabulary index 0. Utterances are packed row-wise: a batch is one
``(sum(frames), V)`` log-probability matrix plus the per-utterance frame
counts, matching how the encoder processes batches.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, make_node

BLANK = 0
NEG_INF = -np.inf


class InfeasibleAlignment(ValueError):
    """The label cannot be aligned to the available frames."""


def min_frames(label):
    """Frames needed to emit ``label``: one per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _extend(label):
    ext = np.zeros(2 * len(label) + 1, dtype=np.int64)
    ext[1::2] = label
    return ext


def _skip_allowed(ext):
    """skip[s] is True when state s may be entered from s - 2."""
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(logprobs, lengths, labels):
    """Per-utterance negative log-likelihoods and their gradients.

    ``logprobs`` is the packed ``(sum(lengths), V)`` array. Returns
    ``(nll, grad)`` where ``grad`` has the shape of ``logprobs`` and holds
    d nll_b / d logprobs for the rows belonging to utterance b.
    """
    lengths = [int(n) for n in lengths]
    if len(lengths) != len(labels):
        raise ValueError("one label per utterance required")
    if sum(lengths) != logprobs.shape[0]:
        raise ValueError(f"frame counts sum to {sum(lengths)}, logprobs has {logprobs.shape[0]} rows")
    for i, (n, lab) in enumerate(zip(lengths, labels)):
        if n < 1 or n < min_frames(list(lab)):
            raise InfeasibleAlignment(f"utterance {i}: label of length {len(lab)} does not fit {n} frames")
        if len(lab) and (min(lab) < 1 or max(lab) >= logprobs.shape[1]):
            raise ValueError(f"utterance {i}: label tokens must lie in [1, {logprobs.shape[1] - 1}]")

    B = len(lengths)
    Tmax = max(lengths)
    Smax = 2 * max(len(lab) for lab in labels) + 1
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)

    ext = np.zeros((B, Smax), dtype=np.int64)
    valid = np.zeros((B, Smax), dtype=bool)
    skip = np.zeros((B, Smax), dtype=bool)
    for b, lab in enumerate(labels):
        e = _extend(np.asarray(lab, dtype=np.int64))
        ext[b, : e.size] = e
        valid[b, : e.size] = True
        skip[b, : e.size] = _skip_allowed(e)
    S = 2 * np.array([len(lab) for lab in labels]) + 1
    T = np.array(lengths)

    # emit[t, b, s] = log y_t(ext[b, s]); padded states and frames are -inf.
    emit = np.full((Tmax, B, Smax), NEG_INF)
    for b in range(B):
        rows = logprobs[starts[b] : starts[b] + T[b]]
        emit[: T[b], b, :] = np.where(valid[b], rows[:, ext[b]], NEG_INF)

    alpha = np.full((Tmax, B, Smax), NEG_INF)
    alpha[0, :, :2] = emit[0, :, :2]
    pad1 = np.full((B, 1), NEG_INF)
    pad2 = np.full((B, 2), NEG_INF)
    for t in range(1, Tmax):
        prev = alpha[t - 1]
        from1 = np.concatenate([pad1, prev], axis=1)[:, :Smax]
        from2 = np.where(skip, np.concatenate([pad2, prev], axis=1)[:, :Smax], NEG_INF)
        alpha[t] = _lse3(prev, from1, from2) + emit[t]

    bidx = np.arange(B)
    last = alpha[T - 1, bidx]
    loglik = np.logaddexp(last[bidx, S - 1], np.where(S > 1, last[bidx, np.maximum(S - 2, 0)], NEG_INF))

    beta = np.full((Tmax, B, Smax), NEG_INF)
    init = np.full((B, Smax), NEG_INF)
    init[bidx, S - 1] = emit[T - 1, bidx, S - 1]
    multi = S > 1
    init[bidx[multi], S[multi] - 2] = emit[T[multi] - 1, bidx[multi], S[multi] - 2]
    skip_next = np.concatenate([skip, np.zeros((B, 2), dtype=bool)], axis=1)[:, 2:]
    for t in range(Tmax - 1, -1, -1):
        if t == Tmax - 1:
            rec = np.full((B, Smax), NEG_INF)
        else:
            nxt = beta[t + 1]
            to1 = np.concatenate([nxt, pad1], axis=1)[:, 1:]
            to2 = np.where(skip_next, np.concatenate([nxt, pad2], axis=1)[:, 2:], NEG_INF)
            rec = _lse3(nxt, to1, to2) + emit[t]
        at_end = (T - 1 == t)[:, None]
        inside = (t < T - 1)[:, None]
        beta[t] = np.where(at_end, init, np.where(inside, rec, NEG_INF))

    if not np.all(np.isfinite(loglik)):
        bad = int(np.flatnonzero(~np.isfinite(loglik))[0])
        raise InfeasibleAlignment(f"utterance {bad}: no alignment has nonzero probability")

    # occupancy[t, b, s] = P(path passes through state s at frame t | label)
    with np.errstate(invalid="ignore"):
        log_occ = alpha + beta - np.where(np.isfinite(emit), emit, 0.0) - loglik[None, :, None]
    occ = np.where(np.isfinite(log_occ), np.exp(log_occ), 0.0)

    grad = np.zeros_like(logprobs)
    for b in range(B):
        g = np.zeros((T[b], logprobs.shape[1]))
        np.add.at(g.T, ext[b, : S[b]], occ[: T[b], b, : S[b]].T)
        grad[starts[b] : starts[b] + T[b]] = -g
    return -loglik, grad


def ctc_loss(logprobs, lengths, labels):
    """Mean CTC negative log-likelihood over a packed batch, as a tape node."""
    data = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs, dtype=np.float64)
    nll, grad = ctc_forward_backward(data, lengths, labels)
    n = len(lengths)
    if not isinstance(logprobs, Tensor):
        logprobs = Tensor(data)
    return make_node(np.array(nll.mean()), (logprobs,), lambda g: (grad * (float(g) / n),))


def utterance_loss(logprobs, label):
    """CTC loss of a single ``(frames, V)`` utterance."""
    frames = (logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)).shape[0]
    return ctc_loss(logprobs, [frames], [list(label)])


def greedy_decode(logprobs):
    """Per-frame argmax, collapse repeats, drop blanks."""
    data = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    best = np.argmax(data, axis=1)
    out = []
    prev = None
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def edit_distance(hyp, ref):
    """Unit-cost Levenshtein distance between two token sequences."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def token_error_rate(hyp, ref):
    """Edit distance over reference length; None when the reference is empty and the
    hypothesis is not (the rate is undefined there)."""
    errors = edit_distance(hyp, ref)
    if not ref:
        if hyp:
            return None
        return 0.0
    return errors / len(ref)


def corpus_error_rate(hyps, refs):
    """Total errors over total reference tokens, plus per-utterance error counts."""
    counts = [edit_distance(h, r) for h, r in zip(hyps, refs)]
    total = sum(len(r) for r in refs)
    return (sum(counts) / total if total else 0.0), counts
