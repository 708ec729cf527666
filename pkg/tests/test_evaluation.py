from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from mmdyn.data import DataError, SyntheticImage, SyntheticSpec, SyntheticTabular, patient_split, synthesize_dataset
from mmdyn.evaluation import (
    Metrics,
    MetricSummary,
    compute_metrics,
    evaluate_masked,
    evaluate_model,
    mean_informativeness_map,
    render_table,
    tcp_error_curve,
    write_report,
)
from mmdyn.fusion import LossWeights
from mmdyn.trainer import TrainConfig, train


def brute_force_metrics(pred, true, c):
    """Plain-loop reference built straight from per-class counts, exact until the final rounding."""
    n = len(true)
    rec, prec, f1, support = [], [], [], []
    for k in range(c):
        tp = sum(1 for p, t in zip(pred, true) if p == k and t == k)
        fn = sum(1 for p, t in zip(pred, true) if p != k and t == k)
        fp = sum(1 for p, t in zip(pred, true) if p == k and t != k)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        p_ = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec.append(r)
        prec.append(p_)
        f1.append(2 * p_ * r / (p_ + r) if p_ + r else Fraction(0))
        support.append(tp + fn)
    w = [Fraction(s, n) for s in support]
    return {
        "f1_weighted": float(sum(a * b for a, b in zip(w, f1))),
        "f1_macro": float(sum(f1) / c),
        "recall_weighted": float(sum(a * b for a, b in zip(w, rec))),
        "precision_weighted": float(sum(a * b for a, b in zip(w, prec))),
        "accuracy": float(Fraction(sum(p == t for p, t in zip(pred, true)), n)),
        "balanced_accuracy": float(sum(rec) / c),
    }


def brute_force_curve(tcps, tcp_hats, thresholds):
    out = []
    for x in thresholds:
        hits = total = 0
        for t, th in zip(tcps, tcp_hats):
            if t == 0:
                continue
            total += 1
            hits += x * t + t <= th
        out.append(hits / total)
    return out


class TestMetrics:
    def test_perfect(self):
        m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert all(v == 1.0 for v in m.as_dict().values())

    def test_majority(self):
        m = compute_metrics([0, 0, 0, 0], [0, 0, 0, 1], 2)
        assert m.accuracy == 0.75 and m.balanced_accuracy == 0.5

    def test_brute_force_200(self, rng):
        pred = rng.integers(0, 5, 200)
        true = rng.integers(0, 5, 200)
        ref = brute_force_metrics(pred.tolist(), true.tolist(), 5)
        got = compute_metrics(pred, true, 5).as_dict()
        assert got == ref

    def test_sklearn_cross_check(self, rng):
        pred = rng.integers(0, 4, 300)
        true = rng.integers(0, 4, 300)
        m = compute_metrics(pred, true, 4)
        assert m.f1_weighted == pytest.approx(skm.f1_score(true, pred, average="weighted"))
        assert m.f1_macro == pytest.approx(skm.f1_score(true, pred, average="macro"))
        assert m.recall_weighted == pytest.approx(skm.recall_score(true, pred, average="weighted"))
        assert m.precision_weighted == pytest.approx(skm.precision_score(true, pred, average="weighted"))
        assert m.balanced_accuracy == pytest.approx(skm.balanced_accuracy_score(true, pred))

    def test_absent_class_counts_as_zero(self):
        m = compute_metrics([0, 0], [0, 0], 2)
        assert m.balanced_accuracy == 0.5 and m.f1_macro == 0.5

    @pytest.mark.parametrize("pred,true", [([], []), ([0, 1], [0]), ([0, 3], [0, 1])])
    def test_invalid(self, pred, true):
        with pytest.raises(ValueError):
            compute_metrics(pred, true, 3)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda c: st.tuples(
        st.just(c),
        st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=40),
        st.permutations(range(c)))))
    def test_invariants(self, case):
        c, pairs, perm = case
        pred, true = [p for p, _ in pairs], [t for _, t in pairs]
        m = compute_metrics(pred, true, c)
        assert m.accuracy == m.recall_weighted
        mp = compute_metrics([perm[p] for p in pred], [perm[t] for t in true], c)
        for k in ("accuracy", "balanced_accuracy", "f1_macro"):
            assert getattr(mp, k) == getattr(m, k)


class TestSummary:
    def test_population_std(self):
        a = Metrics(0.1, 0.1, 0.1, 0.1, 0.1, 0.1)
        b = Metrics(0.3, 0.3, 0.3, 0.3, 0.3, 0.3)
        s = MetricSummary.of([a, b])
        assert s.mean["accuracy"] == pytest.approx(0.2) and s.std["accuracy"] == pytest.approx(0.1)
        assert s.cells()[0] == "20.00 ± 10.00"

    def test_table_and_report(self, tmp_path):
        s = MetricSummary.of([Metrics(1, 1, 1, 1, 0.5, 0.25)])
        table = render_table({"FI": s})
        assert table.splitlines()[0].split("\t") == ["Method", "F1 Score", "F1 macro", "Recall", "Precision",
                                                     "Accuracy", "Balanced accuracy"]
        assert table.splitlines()[1].split("\t")[-2:] == ["50.00 ± 0.00", "25.00 ± 0.00"]
        write_report({"FI": s}, tmp_path, "r")
        assert (tmp_path / "r.tsv").read_text() == table


class TestTcpCurve:
    def test_boundary(self):
        c = tcp_error_curve([0.5], [0.8], [0.0, 0.3, 0.6, 0.61, 1.0])
        assert c.fractions == [1.0, 1.0, 1.0, 0.0, 0.0]

    def test_equal(self):
        c = tcp_error_curve([0.2, 0.7], [0.2, 0.7], [0.0, 1e-9, 0.5])
        assert c.fractions == [1.0, 0.0, 0.0]

    def test_zero_tcp_excluded(self):
        c = tcp_error_curve([0.0, 0.5], [0.9, 0.9], [0.0])
        assert c.fractions == [1.0] and c.excluded_zero_tcp == 1

    def test_thresholds_ascending(self):
        with pytest.raises(ValueError):
            tcp_error_curve([0.5], [0.5], [0.5, 0.1])

    def test_write(self, tmp_path):
        tcp_error_curve([0.5], [0.8], [0.0, 1.0]).write(tmp_path / "c.tsv")
        assert (tmp_path / "c.tsv").read_text().splitlines() == ["threshold\tfraction", "0.0\t1.0", "1.0\t0.0"]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_recount_and_monotone(self, seed):
        r = np.random.default_rng(seed)
        tcps, hats = r.random(50), r.random(50)
        tcps[:3] = 0.0
        xs = np.sort(r.random(20) * 3)
        c = tcp_error_curve(tcps, hats, xs)
        assert c.fractions == brute_force_curve(tcps.tolist(), hats.tolist(), xs.tolist())
        assert all(a >= b for a, b in zip(c.fractions, c.fractions[1:]))


class TestMaps:
    def test_single(self, rng):
        m = rng.random((4, 4))
        np.testing.assert_array_equal(mean_informativeness_map([m]), m)

    def test_two_constants(self):
        out = mean_informativeness_map([np.full((4, 8), 0.2), np.full((4, 8), 0.6)])
        np.testing.assert_allclose(out, 0.4, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mean_informativeness_map([np.zeros((4, 4)), np.zeros((4, 8))])


@pytest.fixture(scope="module")
def three_modality_run():
    spec = SyntheticSpec(1200, 4, [SyntheticTabular("protein", 20, 2), SyntheticTabular("rna", 40, 4),
                                   SyntheticImage("image", 16, 16, 1, (4, 4, 8, 8))], image_noise=0.15)
    ds, _ = synthesize_dataset(spec, 0)
    split = patient_split(ds, {"P2"}, 0.2, 0)
    cfg = TrainConfig(epochs=30, seed=0, image_hidden_dim=64, latent_dims={"protein": 16, "rna": 16, "image": 32},
                      loss_weights=LossWeights(0.01, 1, 1))
    return ds, split, train(cfg, ds, split)


class TestMasking:
    def test_drop(self, three_modality_run):
        ds, split, model = three_modality_run
        plain = evaluate_model(model, ds, split.test_indices)
        masked = evaluate_masked(model, ds, split, "image", 0.5)
        assert masked.balanced_accuracy < plain.balanced_accuracy

    def test_tabular_rejected(self, three_modality_run):
        ds, split, model = three_modality_run
        with pytest.raises(DataError):
            evaluate_masked(model, ds, split, "rna")

    def test_constant_modality_mask_is_noop(self, three_modality_run):
        # replacing a constant-0.5 image with 0.5 gray must not change predictions
        ds, split, model = three_modality_run
        gray = ds.modality("image").subset(np.arange(ds.sample_count))
        gray.data[:] = 0.5
        const = ds.replace_modality(gray)
        assert evaluate_masked(model, const, split, "image", 0.5) == evaluate_model(model, const, split.test_indices)
