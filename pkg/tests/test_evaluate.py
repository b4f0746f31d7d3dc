import math

import numpy as np
import pytest

from depth_dissect import evaluate as E
from depth_dissect import net as N
from depth_dissect.bins import discretize, make_sid_bins
from depth_dissect.dissect import ResponseTable, SelectivityReport, UnitStats
from depth_dissect.scenes import SceneConfig, generate_samples
from depth_dissect.tensor import nearest_resize


def test_metrics_perfect_prediction():
    gt = np.random.default_rng(0).uniform(1, 10, (2, 1, 4, 4))
    m = E.depth_metrics(gt, gt)
    assert (m.delta1, m.delta2, m.delta3) == (1.0, 1.0, 1.0)
    assert m.rms == m.rel == m.log10 == 0.0


def test_metrics_hand_values():
    gt = np.ones((1, 1, 2, 2))
    m = E.depth_metrics(gt * 1.3, gt)
    assert m.delta1 == 0.0 and m.delta2 == 1.0
    assert m.log10 == pytest.approx(0.11394, abs=1e-5)
    assert m.rel == pytest.approx(0.3)
    m = E.depth_metrics(gt * 2, gt)
    assert m.rel == pytest.approx(1.0) and m.delta3 == 0.0
    assert m.rms == pytest.approx(1.0)


def test_metrics_respect_valid_mask():
    gt = np.full((1, 1, 2, 2), 2.0)
    pred = gt.copy()
    pred[0, 0, 0, 0] = 100
    valid = np.ones_like(gt)
    valid[0, 0, 0, 0] = 0
    assert E.depth_metrics(pred, gt, valid).delta1 == 1.0
    with pytest.raises(ValueError):
        E.depth_metrics(pred, gt, np.zeros_like(gt))


@pytest.fixture(scope="module")
def setup():
    net = N.build(seed=0)
    samples = generate_samples(3, 6)
    return net, samples, make_sid_bins(1, 10, 64)


def _report(ds):
    units = [UnitStats(k, float(v), 0, None, 1.0, 0.5) for k, v in enumerate(ds)]
    return SelectivityReport("d", "train", 64, units)


def test_ablation_order_and_ties():
    rep = _report([0.2, 0.9, 0.2, 0.5])
    assert E.ablation_order(rep, "descending") == [1, 3, 0, 2]
    assert E.ablation_order(rep, "ascending") == [0, 2, 3, 1]
    with pytest.raises(ValueError):
        E.ablation_order(rep, "sideways")


def test_ablation_curve_anchors(setup):
    net, samples, scheme = setup
    rep = E.selectivity_report(net, samples, "d", scheme)
    curve = E.ablation_curve(net, samples, "d", rep, "descending")
    assert len(curve.accuracy) == 65
    assert curve.accuracy[0] == pytest.approx(E.evaluate(net, samples).delta1)
    # with every unit zeroed the prediction no longer depends on the input through this layer
    zero = net.forward_with_override(np.concatenate([s.image for s in samples]), "d", np.zeros((6, 64, 16, 16), np.float32))
    gt = np.concatenate([s.depth for s in samples])
    assert curve.accuracy[-1] == pytest.approx(E.depth_metrics(zero.data, gt).delta1)
    asc = E.ablation_curve(net, samples, "d", rep, "ascending")
    assert asc.accuracy[0] == curve.accuracy[0] and asc.accuracy[-1] == curve.accuracy[-1]
    assert 0 <= curve.auc <= 1


def test_ablation_rejects_mismatched_report(setup):
    net, samples, _ = setup
    with pytest.raises(ValueError):
        E.ablation_curve(net, samples, "rconv0", _report([0.1] * 64))


def test_correct_activation_hand_example():
    table = ResponseTable("x", 1, 2, np.array([[4.8, 1.0]]), np.array([2, 1], np.uint64))
    act = np.array([[[[2.0, 3.0], [5.0, 7.0]]]], np.float32)
    bins = np.array([[[0, 1], [-1, 0]]])
    out = E.correct_activation(act, bins, table)
    np.testing.assert_allclose(out, [[[[2.4, 1.0], [5.0, 2.4]]]], rtol=1e-6)


def test_correct_activation_keeps_undefined_bins():
    table = ResponseTable("x", 1, 3, np.array([[3.0, 0.0, 0.0]]), np.array([1, 0, 0], np.uint64))
    act = np.full((1, 1, 1, 2), 9.0, np.float32)
    out = E.correct_activation(act, np.array([[[0, 2]]]), table)
    assert out.tolist() == [[[[3.0, 9.0]]]]


def test_correction_fixed_point(setup):
    """If activations already equal the per-bin averages, correction changes nothing."""
    net, samples, scheme = setup
    img = np.concatenate([s.image for s in samples])
    depth = np.concatenate([s.depth for s in samples])
    valid = np.concatenate([s.valid for s in samples])
    small = nearest_resize(discretize(depth, valid, scheme)[:, 0], 16, 16)
    rng = np.random.default_rng(0)
    per_bin = rng.normal(size=(64, 64))
    act = per_bin[:, small].transpose(1, 0, 2, 3).astype(np.float32)
    table = ResponseTable("d", 64, 64, per_bin.copy(), np.ones(64, np.uint64))
    np.testing.assert_array_equal(E.correct_activation(act, small, table), act)
    res = E.correct_responses(net, samples, "d", E.dissect_layer(net, samples, "d", scheme), scheme)
    assert 0 <= res.after.delta1 <= 1 and res.before.delta1 == pytest.approx(E.evaluate(net, samples).delta1)


def test_fgsm_zero_epsilon_and_norm_bound(setup):
    net, samples, _ = setup
    img = np.concatenate([s.image for s in samples[:2]])
    depth = np.concatenate([s.depth for s in samples[:2]])
    valid = np.concatenate([s.valid for s in samples[:2]])
    np.testing.assert_array_equal(E.fgsm_attack(net, img, depth, valid, 0.0), img)
    for eps in (0.01, 0.05, 0.2):
        adv = E.fgsm_attack(net, img, depth, valid, eps)
        assert np.abs(adv.astype(np.float64) - img).max() <= eps
        assert adv.min() >= 0 and adv.max() <= 1
    with pytest.raises(ValueError):
        E.fgsm_attack(net, img, depth, valid, -0.1)


def test_fgsm_norm_bound_when_clipping_to_zero(setup):
    """Pixels equal to float32(eps) that step down clip to 0, a distance just over eps."""
    net, samples, _ = setup
    s = samples[0]
    for eps in (0.05, 0.2):
        img = np.full_like(s.image, np.float32(eps))
        adv = E.fgsm_attack(net, img, s.depth, s.valid, eps)
        assert np.abs(adv.astype(np.float64) - img).max() <= eps
        assert adv.min() >= 0


def test_attack_samples_keeps_labels(setup):
    net, samples, _ = setup
    adv = E.attack_samples(net, samples[:3], 0.05)
    assert len(adv) == 3
    assert all(np.array_equal(a.depth, s.depth) for a, s in zip(adv, samples))


def test_attribution_empty_when_prediction_is_exact(setup):
    net, samples, scheme = setup
    s = samples[0]
    pred = net.forward(s.image)[0].data
    rep = E.error_unit_attribution(net, s.image, pred, s.valid, "d", list(range(64)), scheme)
    assert rep.empty and rep.top == [] and rep.mean_iou() is None


def test_attribution_shares_and_units(setup):
    net, samples, scheme = setup
    s = samples[1]
    rep = E.error_unit_attribution(net, s.image, s.depth, s.valid, "d", list(range(64)), scheme,
                                   rng=np.random.default_rng(1))
    assert not rep.empty
    assert math.isclose(sum(rep.shares.values()), 1.0, rel_tol=1e-9)
    assert 1 <= len(rep.top) <= 3
    shares = [b.error_share for b in rep.top]
    assert shares == sorted(shares, reverse=True)
    for b in rep.top:
        assert b.units == [b.bin]
        assert all(0 <= v <= 1 for v in b.iou)
        assert b.control_unit != b.bin
    assert set(rep.to_dict()) == {"layer", "n_error_pixels", "shares", "top"}


def test_dissect_layer_uses_effective_bins(setup):
    net, samples, scheme = setup
    table = E.dissect_layer(net, samples[:2], "rconv0", scheme)
    assert (table.n_units, table.n_bins) == (32, 32)
