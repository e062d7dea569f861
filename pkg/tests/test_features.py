import struct
from dataclasses import replace

import numpy as np
import pytest

from ssvc.features import (
    BadMagicError,
    Dataset,
    DomainPair,
    FeatureMap,
    ShapeOverflowError,
    SynthConfig,
    TruncatedFileError,
    dumps_features,
    load_corpus,
    load_features,
    loads_features,
    sample_batch,
    save_corpus,
    save_features,
    synth_dataset,
)
from ssvc.metrics import mcd


@pytest.fixture(scope="module")
def corpus():
    return synth_dataset(SynthConfig())


class TestSynth:
    def test_default_counts(self, corpus):
        assert corpus.train.X.shape == (320, 16, 64)
        assert corpus.eval.X.shape == (120, 16, 64)
        assert np.bincount(corpus.train.domains).tolist() == [0, 80, 80, 80, 80]
        assert np.bincount(corpus.eval.domains).tolist() == [0, 30, 30, 30, 30]

    def test_bit_identical_reruns(self, corpus):
        again = synth_dataset(SynthConfig(seed=7))
        assert corpus.train.X.tobytes() == again.train.X.tobytes()
        assert corpus.eval.X.tobytes() == again.eval.X.tobytes()
        assert corpus.prototypes.tobytes() == again.prototypes.tobytes()

    def test_seed_changes_data(self, corpus):
        other = synth_dataset(SynthConfig(seed=8))
        assert not np.array_equal(corpus.train.X, other.train.X)

    def test_degenerate_noise_reproduces_prototypes(self):
        c = synth_dataset(SynthConfig(noise_scale=0.0, gain_spread=0.0, train_per_domain=3, eval_per_domain=2))
        for ds in (c.train, c.eval):
            for fm in ds:
                assert np.array_equal(fm.data, c.prototypes[fm.domain - 1])
                assert mcd(fm.data, c.prototypes[fm.domain - 1]) == 0.0

    def test_prototypes_constant_over_frames_and_smooth(self, corpus):
        p = corpus.prototypes.astype(np.float64)
        assert np.all(p == p[:, :, :1])
        rms = np.sqrt(np.mean(p[:, :, 0] ** 2, axis=1))
        np.testing.assert_allclose(rms, 1.0, atol=1e-6)

    def test_between_domain_exceeds_within_domain(self, corpus):
        # oracle: pairwise MCD from the metrics module over the generated set
        n = corpus.config.n_domains
        between = [mcd(corpus.prototypes[a], corpus.prototypes[b]) for a in range(n) for b in range(n) if a != b]
        within = [mcd(fm.data, corpus.prototypes[fm.domain - 1]) for fm in corpus.eval]
        margin = np.mean(between) - np.mean(within)
        assert margin > 0
        # utterances are also nearer their own prototype than any other one
        for fm in list(corpus.eval)[::7]:
            dists = [mcd(fm.data, corpus.prototypes[d]) for d in range(n)]
            assert int(np.argmin(dists)) == fm.domain - 1

    def test_ar1_temporal_structure(self):
        c = synth_dataset(SynthConfig(gain_spread=0.0, train_per_domain=40, eval_per_domain=1))
        resid = c.train.X.astype(np.float64) - c.prototypes[c.train.domains - 1]
        lag1 = np.mean(resid[:, :, 1:] * resid[:, :, :-1]) / np.mean(resid**2)
        assert lag1 == pytest.approx(0.9, abs=0.05)

    def test_train_and_eval_disjoint(self, corpus):
        train = {fm.digest() for fm in corpus.train}
        held = {fm.digest() for fm in corpus.eval}
        assert len(train) == len(corpus.train) and len(held) == len(corpus.eval)
        assert not train & held

    @pytest.mark.parametrize("field,value", [("n_domains", 0), ("train_per_domain", 0), ("seed", -1), ("noise_scale", -0.1), ("prototype_smoothness", 0.0)])
    def test_invalid_config(self, field, value):
        with pytest.raises(ValueError):
            synth_dataset(replace(SynthConfig(), **{field: value}))


class TestSampleBatch:
    def test_single_utterance(self):
        ds = Dataset.from_maps([FeatureMap(np.ones((2, 3)), 3)], n_domains=4)
        b = sample_batch(ds, 1, np.random.default_rng(0))
        (x, c, _t), = list(b)
        assert np.array_equal(x.data, np.ones((2, 3))) and c == 3

    def test_fixed_seed_identical(self, corpus):
        a = sample_batch(corpus.train, 8, np.random.default_rng(3))
        b = sample_batch(corpus.train, 8, np.random.default_rng(3))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.source, b.source) and np.array_equal(a.target, b.target)

    def test_source_is_true_domain(self, corpus):
        b = sample_batch(corpus.train, 64, np.random.default_rng(1))
        for x, c, _ in b:
            hits = np.flatnonzero((corpus.train.X == x.data).all(axis=(1, 2)))
            assert corpus.train.domains[hits[0]] == c

    def test_target_frequencies(self, corpus):
        rng = np.random.default_rng(2024)
        targets = np.concatenate([sample_batch(corpus.train, 1, rng).target for _ in range(10_000)])
        freq = np.bincount(targets, minlength=5)[1:] / len(targets)
        # one binomial sd here is 0.43 pp, so the band is 4 pp; chi-square does the real work
        assert np.all(np.abs(freq - 0.25) <= 0.04), freq
        # chi-square with 3 dof, 0.999 quantile 16.27
        chi2 = np.sum((freq * 10_000 - 2500) ** 2 / 2500)
        assert chi2 < 16.27

    def test_empty_dataset(self):
        ds = Dataset(np.zeros((0, 2, 3)), np.zeros(0, dtype=int), 4)
        with pytest.raises(ValueError):
            sample_batch(ds, 1, np.random.default_rng(0))


class TestFileFormat:
    def test_round_trip(self, tmp_path, corpus):
        fm = corpus.train[17]
        save_features(tmp_path / "a.ssvc", fm)
        back = load_features(tmp_path / "a.ssvc")
        assert back.domain == fm.domain
        assert back.data.tobytes() == fm.data.tobytes()

    def test_layout(self):
        fm = FeatureMap(np.arange(6, dtype=np.float32).reshape(2, 3), 2)
        buf = dumps_features(fm)
        assert buf[:4] == b"SSVC"
        assert struct.unpack("<BHII", buf[4:15]) == (1, 2, 2, 3)
        assert np.frombuffer(buf[15:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    def test_bad_magic(self):
        buf = bytearray(dumps_features(FeatureMap(np.ones((2, 2)), 1)))
        buf[:4] = b"XXXX"
        with pytest.raises(BadMagicError):
            loads_features(bytes(buf))

    def test_truncated_payload(self):
        buf = dumps_features(FeatureMap(np.ones((2, 4)), 1))
        with pytest.raises(TruncatedFileError):
            loads_features(buf[:-4])
        with pytest.raises(TruncatedFileError):
            loads_features(buf[:9])

    def test_shape_overflow(self):
        buf = struct.pack("<4sBHII", b"SSVC", 1, 1, 2**31, 2**31)
        with pytest.raises(ShapeOverflowError):
            loads_features(buf)

    def test_errors_are_distinct(self):
        assert len({BadMagicError, TruncatedFileError, ShapeOverflowError}) == 3
        assert not issubclass(BadMagicError, TruncatedFileError)

    def test_corpus_round_trip(self, tmp_path):
        c = synth_dataset(SynthConfig(train_per_domain=3, eval_per_domain=2))
        save_corpus(c, tmp_path)
        back = load_corpus(tmp_path)
        assert np.array_equal(back.train.X, c.train.X)
        assert np.array_equal(back.eval.domains, c.eval.domains)
        assert np.array_equal(back.prototypes, c.prototypes)
        assert len((tmp_path / "train.txt").read_text().splitlines()) == 12


def test_domain_pair_validation():
    assert DomainPair(2, 2).validate(4) == DomainPair(2, 2)
    with pytest.raises(ValueError):
        DomainPair(0, 1).validate(4)
    with pytest.raises(ValueError):
        DomainPair(1, 5).validate(4)


def test_feature_map_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureMap(np.array([[np.nan]]), 1)
