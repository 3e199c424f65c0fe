"""Deterministic synthetic frame-to-token corpus.

Each token has a fixed unit-norm prototype vector. An utterance renders its
label as consecutive runs of noisy copies of the token prototypes, so the
task is learnable at desk scale with a controllable noise floor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "dev", "test")
CORPUS_VERSION = 1


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 12
    label_len: tuple = (3, 8)
    frames_per_token: tuple = (2, 4)
    feature_dim: int = 8
    noise_std: float = 0.3
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label_len", tuple(int(v) for v in self.label_len))
        object.__setattr__(self, "frames_per_token", tuple(int(v) for v in self.frames_per_token))
        if self.vocab_size < 3:
            # two distinct tokens are needed to build labels without adjacent repeats
            raise ValueError("vocab_size must be at least 3 (blank plus two tokens)")
        for name in ("label_len", "frames_per_token"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ValueError(f"{name} must be a nonempty range of positive values, got {(lo, hi)}")
        if self.frames_per_token[0] < 2:
            raise ValueError("frames_per_token must start at 2 or more")
        if self.feature_dim < 1 or self.noise_std < 0:
            raise ValueError("feature_dim must be positive and noise_std nonnegative")
        if min(self.train_size, self.dev_size, self.test_size) < 1:
            raise ValueError("every split needs at least one utterance")

    def size(self, split):
        return getattr(self, f"{split}_size")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    label: list = field(default_factory=list)

    @property
    def frames(self):
        return self.features.shape[0]


@dataclass
class Corpus:
    spec: CorpusSpec
    prototypes: np.ndarray
    splits: dict

    def __getitem__(self, split):
        return self.splits[split]


def make_prototypes(spec):
    """Unit-norm Gaussian prototype per non-blank token; row 0 (blank) is unused and zero."""
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    protos = rng.normal(size=(spec.vocab_size - 1, spec.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return np.vstack([np.zeros((1, spec.feature_dim)), protos])


def render_utterance(spec, prototypes, split_index, index):
    rng = np.random.default_rng([spec.seed, split_index + 1, index])
    n_tokens = int(rng.integers(spec.label_len[0], spec.label_len[1] + 1))
    label = []
    for _ in range(n_tokens):
        choices = [k for k in range(1, spec.vocab_size) if not label or k != label[-1]]
        label.append(int(choices[rng.integers(len(choices))]))
    runs = rng.integers(spec.frames_per_token[0], spec.frames_per_token[1] + 1, size=n_tokens)
    rows = np.repeat(np.array(label), runs)
    feats = prototypes[rows] + spec.noise_std * rng.normal(size=(rows.size, spec.feature_dim))
    return Utterance(f"{SPLITS[split_index]}-{index:05d}", feats, label)


def generate(spec):
    protos = make_prototypes(spec)
    splits = {
        name: [render_utterance(spec, protos, si, i) for i in range(spec.size(name))]
        for si, name in enumerate(SPLITS)
    }
    return Corpus(spec, protos, splits)


def pack(utterances):
    """Stack features row-wise; returns ``(features, lengths, labels)``."""
    feats = np.vstack([u.features for u in utterances])
    return feats, [u.frames for u in utterances], [list(u.label) for u in utterances]


def batches(utterances, batch_size, rng=None):
    """Yield lists of utterances; shuffled by ``rng`` when given."""
    order = np.arange(len(utterances)) if rng is None else rng.permutation(len(utterances))
    for start in range(0, len(order), batch_size):
        yield [utterances[i] for i in order[start : start + batch_size]]


def nearest_prototype_decode(utterance, prototypes):
    """Label read off by nearest prototype per frame; the ceiling any model can reach."""
    d = ((utterance.features[:, None, :] - prototypes[None, 1:, :]) ** 2).sum(axis=2)
    best = 1 + np.argmin(d, axis=1)
    out = []
    for k in best:
        if not out or out[-1] != k:
            out.append(int(k))
    return out


def save_corpus(corpus, directory):
    """Write ``manifest.json`` plus ``features.f64`` (little-endian float64, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CORPUS_VERSION,
        "spec": asdict(corpus.spec),
        "prototypes": list(corpus.prototypes.shape),
        "splits": {
            name: [{"id": u.id, "frames": u.frames, "label": u.label} for u in corpus.splits[name]]
            for name in SPLITS
        },
    }
    arrays = [corpus.prototypes] + [u.features for name in SPLITS for u in corpus.splits[name]]
    with open(directory / "features.f64", "wb") as fh:
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_corpus(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CORPUS_VERSION:
        raise ValueError(f"unsupported corpus version {manifest.get('version')}")
    spec = CorpusSpec(**manifest["spec"])
    blob = np.frombuffer((directory / "features.f64").read_bytes(), dtype="<f8")
    pshape = tuple(manifest["prototypes"])
    expected = int(np.prod(pshape)) + sum(
        e["frames"] * spec.feature_dim for name in SPLITS for e in manifest["splits"][name]
    )
    if blob.size != expected:
        raise ValueError(f"features.f64 holds {blob.size} values, manifest expects {expected}")
    pos = int(np.prod(pshape))
    protos = blob[:pos].reshape(pshape).astype(np.float64)
    splits = {}
    for name in SPLITS:
        utts = []
        for e in manifest["splits"][name]:
            n = e["frames"] * spec.feature_dim
            feats = blob[pos : pos + n].reshape(e["frames"], spec.feature_dim).astype(np.float64)
            utts.append(Utterance(e["id"], feats, list(e["label"])))
            pos += n
        splits[name] = utts
    return Corpus(spec, protos, splits)
