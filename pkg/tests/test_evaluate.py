import csv
import io
import json

import numpy as np
import pytest

from mumodig.archive import AdversarialArchive
from mumodig.attack import AttackConfig
from mumodig.evaluate import (
    EmptyDenominatorError,
    archive_report,
    attack_success_rate,
    attribution_map,
    bit_depth_reduce,
    cosine_matrix,
    gradient_cosine_profile,
    transfer_matrix,
    transformed_gradient_similarity,
)
from mumodig.models import ClassifierModel
from mumodig.paths import IntegrationPath


class StubModel:
    """Predicts a fixed label per image, keyed on the first pixel."""

    def __init__(self, table):
        self.table = table

    def predict(self, x):
        return np.array([self.table[round(float(img.flat[0]), 6)] for img in x])


def test_asr_all_fooled_and_filtering():
    clean = np.array([[[[0.1]]], [[[0.2]]], [[[0.3]]]])
    adv = clean + 0.5
    labels = np.array([0, 1, 2])
    stub = StubModel({0.1: 0, 0.2: 1, 0.3: 0, 0.6: 2, 0.7: 2, 0.8: 2})
    asr = attack_success_rate(stub, clean, adv, labels)
    # third example is misclassified while clean: excluded from the filtered rate
    assert asr.n_eligible == 2 and asr.n_total == 3
    assert asr.filtered == 1.0
    assert asr.unfiltered == pytest.approx(2 / 3)


def test_asr_zero_perturbation_is_zero():
    model = ClassifierModel.init("small_cnn", (3, 8, 8), 3, seed=0)
    x = np.random.default_rng(0).uniform(size=(20, 3, 8, 8))
    y = model.predict(x)
    asr = attack_success_rate(model, x, x, y)
    assert asr.filtered == 0.0 and asr.n_eligible == 20


def test_asr_empty_denominators():
    stub = StubModel({0.1: 1})
    x = np.array([[[[0.1]]]])
    with pytest.raises(EmptyDenominatorError):
        attack_success_rate(stub, x, x, np.array([0]))
    with pytest.raises(EmptyDenominatorError):
        attack_success_rate(stub, x[:0], x[:0], np.array([], dtype=int))


def test_bit_depth_examples():
    assert bit_depth_reduce(np.array(0.5), 3) == pytest.approx(4 / 7)
    levels = np.arange(256) / 255
    np.testing.assert_array_equal(bit_depth_reduce(levels, 8), levels)
    assert set(np.unique(bit_depth_reduce(np.random.default_rng(0).uniform(size=100), 1))) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        bit_depth_reduce(levels, 0)
    with pytest.raises(ValueError):
        bit_depth_reduce(levels, 9)


def test_bit_depth_idempotent():
    x = np.random.default_rng(1).uniform(size=500)
    for bits in range(1, 9):
        once = bit_depth_reduce(x, bits)
        np.testing.assert_array_equal(bit_depth_reduce(once, bits), once)


def test_cosine_matrix_properties():
    rng = np.random.default_rng(2)
    g = rng.normal(size=(6, 3, 4, 4))
    m = cosine_matrix(g)
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-9)
    assert np.all(np.abs(m) <= 1.0)
    g[2] = 0.0
    m = cosine_matrix(g)
    assert np.isnan(m[2]).all() and np.isnan(m[:, 2]).all()


def test_identical_gradients_give_all_ones():
    # a linear loss has the same gradient at every path point
    g = np.broadcast_to(np.random.default_rng(3).normal(size=(3, 4, 4)), (10, 3, 4, 4))
    m = cosine_matrix(g)
    assert m.shape == (10, 10)
    np.testing.assert_allclose(m, 1.0, atol=1e-12)


def test_profile_shape_and_diagonal_on_a_model():
    model = ClassifierModel.init("small_cnn", (3, 8, 8), 3, seed=4)
    x = np.random.default_rng(5).uniform(size=(3, 8, 8))
    prof = gradient_cosine_profile(model, 0, IntegrationPath(np.zeros_like(x), x, 10, 0.5))
    assert prof.matrix.shape == (10, 10)
    np.testing.assert_allclose(np.diag(prof.matrix), 1.0, atol=1e-9)
    assert -1.0 <= prof.mean_adjacent() <= 1.0
    assert len(prof.to_csv().strip().splitlines()) == 10


def test_cosine_profile_needs_two_points():
    model = ClassifierModel.init("mlp", (1, 4, 4), 2, seed=0)
    x = np.ones((1, 4, 4))
    with pytest.raises(ValueError):
        gradient_cosine_profile(model, 0, IntegrationPath(np.zeros_like(x), x, 1))


def test_transformed_similarity_in_range():
    model = ClassifierModel.init("small_cnn", (3, 8, 8), 3, seed=1)
    x = np.random.default_rng(6).uniform(size=(3, 8, 8))
    s = transformed_gradient_similarity(model, x, 1, 5, np.random.default_rng(0), ("affine", "resize_pad"))
    assert -1.0 <= s <= 1.0


def test_attribution_linear_closed_form():
    w = np.random.default_rng(7).normal(size=(3, 5, 6))
    x = np.random.default_rng(8).uniform(size=(3, 5, 6))
    amap = attribution_map(None, x, 0, 16, 0.5, grad_fn=lambda pts: np.broadcast_to(w, pts.shape))
    assert amap.shape == (5, 6)
    np.testing.assert_allclose(amap, (w * x).sum(axis=0), atol=1e-12)


def test_attribution_constant_model_is_zero():
    model = ClassifierModel.init("small_cnn", (3, 8, 8), 4, seed=0, zero_head=True)
    amap = attribution_map(model, np.random.default_rng(9).uniform(size=(3, 8, 8)), 2, 8)
    assert amap.shape == (8, 8) and not amap.any()


# -- transfer reports ---------------------------------------------------------------


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(10)
    sur = ClassifierModel.init("small_cnn", (3, 8, 8), 3, seed=1)
    tgt = ClassifierModel.init("mlp", (3, 8, 8), 3, seed=2)
    x = rng.uniform(size=(12, 3, 8, 8))
    y = sur.predict(x)
    return sur, tgt, x, y


def test_zero_budget_report_is_all_zero(pair):
    sur, tgt, x, y = pair
    cfgs = {"plain": AttackConfig(estimator="plain", epsilon=0.0), "mumodig": AttackConfig(epsilon=0.0, n_transforms=1)}
    report, _ = transfer_matrix(sur, {"surrogate": sur, "tgt": tgt}, x, y, cfgs)
    for row in report.rows:
        if row["n_eligible"]:
            assert row["asr_filtered"] == 0.0


def test_report_row_order_and_serialisation(pair):
    sur, tgt, x, y = pair
    cfgs = {
        name: AttackConfig(estimator=name, iterations=2, n_transforms=1, n_baselines=1)
        for name in ("muig", "ig_single", "mumoig", "mumodig_all", "mumodig", "plain")
    }
    report, adv = transfer_matrix(sur, {"surrogate": sur}, x, y, cfgs, defense_bits=3)
    assert [r["estimator"] for r in report.rows] == list(cfgs)
    assert set(adv) == set(cfgs)
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert list(rows[0])[:6] == ["estimator", "target", "asr_filtered", "asr_unfiltered", "n_eligible", "n_total"]
    assert "asr_bdr3" in rows[0]
    blob = json.loads(report.to_json())
    assert blob["config_digest"] == report.config_digest and blob["n_examples"] == 12
    for r in report.rows:
        assert 0.0 <= r["asr_filtered"] <= 1.0


def test_archive_report_matches_transfer_matrix(pair):
    sur, tgt, x, y = pair
    cfgs = {"plain": AttackConfig(estimator="plain", iterations=3)}
    report, adv = transfer_matrix(sur, {"surrogate": sur, "tgt": tgt}, x, y, cfgs)
    arc = AdversarialArchive(np.arange(len(x)), y, x, adv["plain"], {"attack": cfgs["plain"].to_dict()})
    again = archive_report({"plain": arc}, {"surrogate": sur, "tgt": tgt})
    assert again.rows == report.rows
    assert again.config_digest == report.config_digest


def test_budget_monotonicity_in_asr(pair):
    sur, tgt, x, y = pair
    lo, _ = transfer_matrix(sur, {"s": sur}, x, y, {"p": AttackConfig(estimator="plain", epsilon=2 / 255, step_size=0.2 / 255)})
    hi, _ = transfer_matrix(sur, {"s": sur}, x, y, {"p": AttackConfig(estimator="plain", epsilon=16 / 255)})
    assert hi.rows[0]["asr_filtered"] >= lo.rows[0]["asr_filtered"]
