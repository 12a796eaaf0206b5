import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegdiff import eval as ev
from eegdiff.config import RunConfig
from eegdiff.signal import generate_synthetic_corpus

from test_cli import TINY


class LookupProbe:
    """Predicts the class stored in pixel [0, 0, 0] of each image."""

    def predict(self, images):
        return np.asarray(images)[:, 0, 0, 0].astype(np.int64)


def coded(labels):
    imgs = np.zeros((len(labels), 3, 4, 4), np.float32)
    imgs[:, 0, 0, 0] = labels
    return imgs


def test_nway_accuracy_examples():
    labels = np.array([0, 1, 2, 3])
    probe = LookupProbe()
    assert ev.nway_accuracy(coded(labels), labels, probe) == 1.0
    assert ev.nway_accuracy(coded((labels + 1) % 4), labels, probe) == 0.0
    assert ev.nway_accuracy(coded(np.array([0, 1, 0, 0])), labels, probe) == 0.5
    with pytest.raises(ValueError):
        ev.nway_accuracy(coded(np.array([], np.int64)), [], probe)
    with pytest.raises(ValueError):
        ev.nway_accuracy(coded(labels), labels[:3], probe)


@given(st.lists(st.integers(0, 7), min_size=1, max_size=30), st.randoms())
@settings(max_examples=50, deadline=None)
def test_nway_accuracy_permutation_invariant(pred, rnd):
    pred = np.array(pred)
    labels = np.array([(p + rnd.randint(0, 1)) % 8 for p in pred])
    perm = np.array(rnd.sample(range(len(pred)), len(pred)))
    a = ev.nway_accuracy(coded(pred), labels, LookupProbe())
    assert a == ev.nway_accuracy(coded(pred[perm]), labels[perm], LookupProbe())
    assert a == pytest.approx(np.mean(pred == labels))


def test_binomial_interval_and_se():
    lo, hi = ev.binomial_interval(256, 1 / 8)
    assert lo < 1 / 8 < hi
    # normal approximation is close at this size
    se = ev.binomial_se(1 / 8, 256)
    assert se == pytest.approx(math.sqrt(1 / 8 * 7 / 8 / 256))
    assert abs(lo - (1 / 8 - 1.96 * se)) < 0.01 and abs(hi - (1 / 8 + 1.96 * se)) < 0.01
    assert ev.binomial_interval(10, 0.0) == (0.0, 0.0)
    assert ev.binomial_interval(10, 1.0) == (1.0, 1.0)


@given(st.integers(1, 60), st.floats(0.01, 0.99))
@settings(max_examples=60, deadline=None)
def test_binomial_interval_covers_at_least_level(n, p):
    lo, hi = ev.binomial_interval(n, p)
    mass = sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(n + 1) if lo <= k / n <= hi)
    assert mass >= 0.95 - 1e-9


# ------------------------------------------------------------ tiny pipeline
@pytest.fixture(scope="module")
def tiny_corpus():
    cfg = RunConfig.from_flat(TINY)
    return cfg, generate_synthetic_corpus(cfg.data, cfg.seed)


def test_probe_is_deterministic_and_in_range(tiny_corpus):
    cfg, (_, train, test) = tiny_corpus
    a, b = ev.train_probe(train, test, cfg), ev.train_probe(train, test, cfg)
    pa, pb = a.model.predict(test.images), b.model.predict(test.images)
    assert np.array_equal(pa, pb)
    assert pa.min() >= 0 and pa.max() < train.n_classes
    assert 0.0 <= a.heldout_accuracy <= 1.0
    assert all(not p.trainable for p in a.model.parameters())


def test_grid_lookup():
    assert [r.row_id for r in ev.grid_from(ev.DEFAULT_GRID)] == list(ev.DEFAULT_GRID)
    assert len(ev.TABLE1) == 15
    with pytest.raises(ValueError):
        ev.grid_from(["99"])
    with pytest.raises(ValueError):
        ev.grid_from(["1", "1"])


def test_failing_row_is_reported_and_grid_continues(tiny_corpus, tmp_path):
    cfg, corpus = tiny_corpus
    bad = ev.GridRow("bad", True, True, 1.5, "E+A")
    run = ev.run_ablation(["1", bad, "13"], corpus, cfg, tmp_path / "a")
    assert [r.row.row_id for r in run.rows] == ["1", "bad", "13"]
    assert run.rows[1].error is not None and math.isnan(run.rows[1].accuracy)
    assert all(r.error is None and 0.0 <= r.accuracy <= 1.0 for r in (run.rows[0], run.rows[2]))
    assert (tmp_path / "a" / "row_bad" / "error.txt").exists()
    table = ev.read_ablation_csv(tmp_path / "a" / "ablation.csv")
    assert [r["row_id"] for r in table] == ["1", "bad", "13"]
    assert table[1]["accuracy"] == "nan" and table[0]["mask_ratio"] == "-"
    assert int(table[2]["params"]) > 0

    again = ev.run_ablation(["1", bad, "13"], corpus, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    assert [r.accuracy for r in again.rows if r.error is None] == [r.accuracy for r in run.rows if r.error is None]
