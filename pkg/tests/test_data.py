import numpy as np
import pytest

from pinchgate.ctc import min_frames
from pinchgate.data import (
    CorpusSpec,
    generate,
    load_corpus,
    nearest_prototype_decode,
    pack,
    save_corpus,
)

SMALL = CorpusSpec(train_size=40, dev_size=10, test_size=10, seed=3)


@pytest.fixture(scope="module")
def corpus():
    return generate(SMALL)


def test_noise_free_runs_are_constant():
    c = generate(CorpusSpec(noise_std=0.0, train_size=5, dev_size=1, test_size=1))
    for u in c["train"]:
        changes = np.any(np.diff(u.features, axis=0) != 0, axis=1).sum()
        assert changes == len(u.label) - 1


def test_same_seed_is_bit_identical(corpus):
    again = generate(SMALL)
    np.testing.assert_array_equal(again.prototypes, corpus.prototypes)
    for name in ("train", "dev", "test"):
        for a, b in zip(corpus[name], again[name]):
            assert a.id == b.id and a.label == b.label
            np.testing.assert_array_equal(a.features, b.features)


def test_distinct_seeds_change_prototypes():
    a = generate(CorpusSpec(train_size=1, dev_size=1, test_size=1, seed=0)).prototypes
    b = generate(CorpusSpec(train_size=1, dev_size=1, test_size=1, seed=1)).prototypes
    assert np.any(a != b)


def test_feasible_and_well_formed(corpus):
    ids = set()
    for name in ("train", "dev", "test"):
        for u in corpus[name]:
            assert u.frames >= 2 * len(u.label) >= min_frames(u.label)
            assert SMALL.label_len[0] <= len(u.label) <= SMALL.label_len[1]
            assert all(1 <= k < SMALL.vocab_size for k in u.label)
            assert all(a != b for a, b in zip(u.label, u.label[1:]))
            assert np.all(np.isfinite(u.features))
            ids.add(u.id)
    assert len(ids) == 60


def test_split_sizes(corpus):
    assert [len(corpus[s]) for s in ("train", "dev", "test")] == [40, 10, 10]


def test_noise_free_nearest_prototype_is_perfect():
    c = generate(CorpusSpec(noise_std=0.0, train_size=50, dev_size=1, test_size=1))
    for u in c["train"]:
        assert nearest_prototype_decode(u, c.prototypes) == u.label


def test_prototypes_unit_norm(corpus):
    np.testing.assert_allclose(np.linalg.norm(corpus.prototypes[1:], axis=1), 1.0, atol=1e-12)


def test_pack(corpus):
    feats, lengths, labels = pack(corpus["dev"][:3])
    assert feats.shape == (sum(lengths), SMALL.feature_dim)
    assert labels[1] == corpus["dev"][1].label


def test_export_round_trip(corpus, tmp_path):
    save_corpus(corpus, tmp_path)
    back = load_corpus(tmp_path)
    assert back.spec == corpus.spec
    np.testing.assert_array_equal(back.prototypes, corpus.prototypes)
    for name in ("train", "dev", "test"):
        for a, b in zip(corpus[name], back[name]):
            assert a.id == b.id and a.label == b.label
            assert a.features.tobytes() == b.features.tobytes()


def test_truncated_export_rejected(corpus, tmp_path):
    save_corpus(corpus, tmp_path)
    blob = (tmp_path / "features.f64").read_bytes()
    (tmp_path / "features.f64").write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        load_corpus(tmp_path)


@pytest.mark.parametrize(
    "kwargs",
    [dict(vocab_size=2), dict(label_len=(4, 3)), dict(frames_per_token=(1, 3)), dict(dev_size=0), dict(noise_std=-1)],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        CorpusSpec(**kwargs)
