import numpy as np
import pytest

from plab import tensor as T
from plab.data import Dataset, SynthSpec, synth_clusters
from plab.metrics import check_binary_shortcut
from plab.models import Network, NetworkSpec, build, build_f2_binary
from plab.pgd import error_minimizing_noise, pgd_attack, project
from plab.tensor import DTYPE, Tensor, f32_floor
from plab.triggers import (BudgetError, MinMinSchedule, TriggerSet, adversarial_pair_set,
                           baseline_trigger, build_mask, compose_trigger, empty_mask,
                           full_mask, mean_loss_increase, ours_trigger,
                           train_minmin_shortcut)


def linear_net(w: np.ndarray) -> Network:
    """Two-class linear model whose logit difference (1 - 0) is w . x."""
    n = w.size
    spec = NetworkSpec("linear", input_dims=(1, 1, n), classes=2)
    net = build(spec, 0)
    weights = np.stack([np.zeros(n), w.ravel()], axis=1)
    net.load_state([weights, np.zeros(2)])
    return net


def test_one_step_masked_pgd_is_sign_of_weights():
    rng = np.random.default_rng(0)
    w = rng.normal(size=12)
    mask = (rng.random(12) < 0.5).astype(DTYPE).reshape(1, 1, 12)
    x = np.full((3, 1, 1, 12), 0.5, DTYPE)
    eta = 0.0625
    d = pgd_attack(linear_net(w), x, np.zeros(3, np.int64), eta, steps=1, step_size=eta,
                   mask=mask)
    want = (eta * np.sign(w)).astype(DTYPE).reshape(1, 1, 12) * mask
    np.testing.assert_array_equal(d, np.broadcast_to(want, d.shape))


def test_pgd_budget_uses_float32_floor():
    eta = 8 / 255
    x = np.full((2, 1, 1, 5), 0.5, DTYPE)
    d = pgd_attack(linear_net(np.arange(1.0, 6.0)), x, np.zeros(2, np.int64), eta, 10)
    assert np.abs(d).max() <= eta
    assert np.abs(d).max() == f32_floor(eta)


def test_pgd_respects_image_range_and_errors():
    x = np.zeros((1, 1, 1, 4), DTYPE)
    d = pgd_attack(linear_net(-np.ones(4)), x, np.zeros(1, np.int64), 0.1, 2)
    assert (x + d).min() >= 0
    with pytest.raises(ValueError):
        pgd_attack(linear_net(np.ones(4)), x, np.zeros(1, np.int64), 0.0, 1)
    with pytest.raises(ValueError):
        pgd_attack(linear_net(np.ones(4)), x, np.zeros(1, np.int64), 0.1, 0)


def test_error_minimizing_noise_lowers_loss():
    net = linear_net(np.array([1.0, -2.0, 0.5]))
    x = np.full((2, 1, 1, 3), 0.5, DTYPE)
    y = np.zeros(2, np.int64)
    d = error_minimizing_noise(net, x, y, 0.2, 5)
    assert (mean_loss_increase(net, x, y, d) < 0).all()


def test_project_clips_and_masks():
    delta = np.array([0.5, -0.5, 0.05, 0.3], DTYPE)
    x = np.array([0.9, 0.05, 0.5, 0.5], DTYPE)
    mask = np.array([1, 1, 1, 0], DTYPE)
    out = project(delta, x, 0.1, mask)
    np.testing.assert_allclose(out, [f32_floor(0.1), -0.05, 0.05, 0.0], rtol=1e-6)


def test_mask_geometry():
    m = build_mask((2, 6, 5), (2, 3))
    assert m.values[:, :2, :3].sum() == 0
    assert m.values.sum() == 2 * (30 - 6)
    np.testing.assert_array_equal(m.values + m.complement, np.ones((2, 6, 5)))
    assert full_mask((1, 4, 4)).values.all()
    assert not empty_mask((1, 4, 4)).values.any()
    with pytest.raises(ValueError):
        build_mask((1, 4, 4), (5, 1))


@pytest.fixture(scope="module")
def setup():
    ds = synth_clusters(SynthSpec(classes=3, per_class=40, shape=(1, 8, 8), sigma=0.1), 0)
    idx = np.random.default_rng(0).choice(len(ds), 100, replace=False)
    sample = ds.subset(np.sort(idx))
    f1 = build(NetworkSpec("mlp", 16, 1, (1, 8, 8), 3), 1)
    f2 = build_f2_binary((1, 8, 8), 2, channels=4)
    return sample, f1, f2


@pytest.mark.parametrize("kind", ["ours", "rn_linf", "rn_l0", "ua", "adv", "scut"])
def test_budget_and_support_invariants(setup, kind):
    sample, f1, f2 = setup
    eta = 16 / 255
    if kind == "ours":
        mask = build_mask(sample.shape, (3, 3))
        ts = ours_trigger(sample, f1, f2, mask, eta, pgd_steps=3, scut_steps=3)
    else:
        ts = baseline_trigger(kind, {"eta": eta, "pixels": 10, "steps": 3, "iterations": 2},
                              sample, 0, f1, f2)
    ts.check_budget()
    p = ts.perturbations
    assert p.shape == (100,) + sample.shape
    if kind == "rn_l0":
        changed = (p != 0).any(axis=1).reshape(100, -1).any(axis=0)
        assert changed.sum() <= 10
        return
    assert float(np.abs(p).max()) <= eta
    if ts.mask is not None:
        u = ts.mask.values
        a, b = u * p, (1 - u) * p
        assert not np.any((a != 0) & (b != 0))
        np.testing.assert_array_equal(a + b, p)


def test_composed_parts(setup):
    sample, f1, f2 = setup
    mask = build_mask(sample.shape, (3, 3))
    p, parts = compose_trigger(sample.images, sample.labels, f1, f2, mask, 0.1, 4, None, 4)
    np.testing.assert_array_equal(p, mask.values * parts["adv"] + mask.complement * parts["scut"])
    assert (mean_loss_increase(f1, sample.images, sample.labels, parts["adv"]) >= 0).all()
    assert not np.any(parts["adv"] * mask.complement)


def test_adversarial_pair_set_layout(setup):
    sample, f1, _ = setup
    mask = build_mask(sample.shape, (2, 2))
    t1, delta = adversarial_pair_set(f1, sample, 0.1, mask, 2)
    n = len(sample)
    assert len(t1) == 2 * n
    np.testing.assert_array_equal(t1.labels[:n], 0)
    np.testing.assert_array_equal(t1.labels[n:], 1)
    np.testing.assert_array_equal(t1.images[n:], sample.images)
    assert not delta[:, :, :2, :2].any()


def test_trigger_set_round_trip_and_budget(tmp_path, setup):
    sample, f1, f2 = setup
    ts = baseline_trigger("rn_l0", {"pixels": 5}, sample, 3)
    ts.save(tmp_path)
    back = TriggerSet.load(tmp_path)
    np.testing.assert_array_equal(back.perturbations, ts.perturbations)
    assert back.kind == "rn_l0" and back.meta["positions"] == ts.meta["positions"]
    bad = TriggerSet(np.full((2, 1, 2, 2), 0.5, DTYPE), 0.1, "ours")
    with pytest.raises(BudgetError):
        bad.check_budget()
    with pytest.raises(ValueError):
        TriggerSet(np.zeros((1, 1, 2, 2)), 0.1, "nope")


def test_baseline_errors(setup):
    sample, _, _ = setup
    with pytest.raises(ValueError):
        baseline_trigger("adv", {"eta": 0.1}, sample, 0)
    with pytest.raises(ValueError):
        baseline_trigger("rn_linf", {"eta": 0.0}, sample, 0)
    with pytest.raises(ValueError):
        baseline_trigger("rn_l0", {"pixels": 0}, sample, 0)


def test_rn_linf_is_one_shared_sign_vector(setup):
    sample, _, _ = setup
    ts = baseline_trigger("rn_linf", {"eta": 0.05}, sample, 1)
    assert (ts.perturbations == ts.perturbations[0]).all()
    np.testing.assert_array_equal(np.abs(ts.perturbations), f32_floor(0.05))


def collinear_set(seed=0, n=15, sigma=0.02):
    rng = np.random.default_rng(seed)
    centers = [(0.2, 0.5, 1), (0.5, 0.5, 0), (0.8, 0.5, 1)]
    pts, labels = [], []
    for cx, cy, lab in centers:
        pts.append(np.column_stack([cx + sigma * rng.normal(size=n), cy + sigma * rng.normal(size=n)]))
        labels += [lab] * n
    x = np.clip(np.concatenate(pts), 0, 1).reshape(-1, 1, 1, 2)
    return Dataset(x, np.array(labels), "collinear", 2)


def test_minmin_makes_middle_cluster_separable():
    ds = collinear_set()
    assert not check_binary_shortcut(ds, None, 0.4).separable
    f2 = build(NetworkSpec("linear", input_dims=(1, 1, 2), classes=2), 0)
    sched = MinMinSchedule(rounds=10, model_epochs=3, eps_steps=10, lr=0.1, batch_size=16)
    f2, eps = train_minmin_shortcut(f2, ds, 0.4, np.ones((1, 1, 2), DTYPE), sched, seed=0)
    assert not eps[ds.labels == 1].any()
    assert np.abs(eps).max() <= 0.4
    res = check_binary_shortcut(ds, eps, 0.4)
    assert res.separable and res.witness is not None


def test_minmin_rejects_bad_labels():
    ds = Dataset(np.zeros((2, 1, 1, 2)), [1, 2], classes=3)
    with pytest.raises(ValueError):
        train_minmin_shortcut(build(NetworkSpec("linear", input_dims=(1, 1, 2)), 0), ds, 0.1,
                              np.ones((1, 1, 2)), MinMinSchedule(), 0)
