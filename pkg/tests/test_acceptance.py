"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in the terminal summary.  The desk attack (9) and the poison-rate sweep (10)
share run directories through stage caching and take a few minutes.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from plab import tensor as T
from plab.bounds import (BoundInputs, clean_bound_rhs, clean_coefficient, empirical_rademacher,
                         gap_probability_exact, poison_bound_rhs)
from plab.data import Dataset, SynthSpec, synth_clusters
from plab.experiment import RunConfig, run_pipeline
from plab.metrics import (check_binary_shortcut, measure_c1_epsilon, measure_c3_tau,
                          measure_similarity_k, v_sc, verify_simple_feature_bound)
from plab.models import NetworkSpec, build, build_f2_binary
from plab.pgd import pgd_attack
from plab.tensor import DTYPE, Tensor
from plab.training import TrainConfig
from plab.triggers import (TRIGGER_KINDS, MinMinSchedule, TriggerSet, baseline_trigger,
                           build_mask, ours_trigger, train_minmin_shortcut)

from oracles import Ref, close, finite_diff, random_graph
from verdicts import verdict

SEEDS = (0, 1, 2)
ALPHAS = (0.02, 0.05, 0.1)


def linear_net(w):
    net = build(NetworkSpec("linear", input_dims=(1, 1, w.size), classes=2), 0)
    net.load_state([np.stack([np.zeros(w.size), w], axis=1), np.zeros(2)])
    return net


# -- 1 -------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_criterion_01_autodiff():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    checked = 0
    bad = []
    while checked < 50:
        fam, fn, leaves, labels = random_graph(rng)
        arrs = [np.asarray(a, DTYPE).astype(np.float64) for a in leaves]
        ref = Ref()
        fn(ref, arrs, labels)
        if ref.margin < 1e-2:       # too close to a kink for a central difference
            continue
        want = finite_diff(lambda xs: fn(Ref(), xs, labels), arrs)
        ts = [Tensor(a, requires_grad=True) for a in leaves]
        got = T.grad(fn(T, ts, labels), ts)
        for g, r in zip(got, want):
            if not close(g, r, rel=1e-3, floor=1e-6).all():
                bad.append(fam)
        checked += 1
    dt = time.perf_counter() - t0
    verdict(1, not bad and dt < 10,
            f"{checked} graphs, mismatches {bad}, runtime {dt:.2f}s (< 10s)")


# -- 2 -------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_criterion_02_pgd_oracle():
    t0 = time.perf_counter()
    ok = True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=20)
        mask = (rng.random(20) < 0.6).astype(DTYPE).reshape(1, 1, 20)
        x = np.full((4, 1, 1, 20), 0.5, DTYPE)
        eta = float(rng.choice([1 / 255, 4 / 255, 0.0625]))
        d = pgd_attack(linear_net(w), x, np.zeros(4, np.int64), eta, steps=1, step_size=eta,
                       mask=mask)
        want = T.f32_floor(eta) * np.sign(w).astype(DTYPE).reshape(1, 1, 20) * mask
        ok &= bool(np.array_equal(d, np.broadcast_to(want, d.shape)))
    dt = time.perf_counter() - t0
    verdict(2, ok and dt < 1, f"exact sign-step equality on 5 models, runtime {dt:.3f}s")


# -- 3 -------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_criterion_03_budget_and_mask():
    ds = synth_clusters(SynthSpec(classes=3, per_class=60, shape=(1, 8, 8)), 0)
    sample = ds.subset(np.sort(np.random.default_rng(1).choice(len(ds), 100, replace=False)))
    f1 = build(NetworkSpec("mlp", 16, 1, (1, 8, 8), 3), 1)
    f2 = build_f2_binary((1, 8, 8), 2, channels=4)
    eta = 16 / 255
    failures = []
    for kind in TRIGGER_KINDS:
        if kind == "ours":
            ts = ours_trigger(sample, f1, f2, build_mask(sample.shape, (3, 3)), eta,
                              pgd_steps=4, scut_steps=4)
        else:
            ts = baseline_trigger(kind, {"eta": eta, "pixels": 10, "steps": 4,
                                         "iterations": 2}, sample, 0, f1, f2)
        p = ts.perturbations
        if kind == "rn_l0":
            pixels = (p != 0).any(axis=1).reshape(len(p), -1).any(axis=0).sum()
            if pixels > 10:
                failures.append(kind)
            continue
        if not float(np.abs(p).max()) <= eta:
            failures.append(kind)
        if ts.mask is not None:
            a, b = ts.mask.values * p, ts.mask.complement * p
            if np.any((a != 0) & (b != 0)) or not np.array_equal(a + b, p):
                failures.append(kind + "/mask")
    verdict(3, not failures, f"kinds {list(TRIGGER_KINDS)} on 100 samples, failures {failures}")


# -- 4 -------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_criterion_04_shortcut_oracle():
    # class 0 sits on both sides of class 1: no single threshold separates them
    rng = np.random.default_rng(0)
    n = 20
    x = np.concatenate([0.1 + 0.02 * rng.normal(size=n), 0.5 + 0.02 * rng.normal(size=n),
                        0.9 + 0.02 * rng.normal(size=n)])
    ds = Dataset(np.clip(x, 0, 1).reshape(-1, 1, 1, 1), np.repeat([0, 1, 0], n), "line", 2)
    eta, eta1 = 2.0, 0.25
    before = check_binary_shortcut(ds, None, eta1)
    f2 = build(NetworkSpec("linear", input_dims=(1, 1, 1), classes=2), 0)
    sched = MinMinSchedule(rounds=10, model_epochs=3, eps_steps=10, lr=0.1, batch_size=16,
                           clip=None)
    _, eps = train_minmin_shortcut(f2, ds, eta, np.ones((1, 1, 1), DTYPE), sched, seed=0)
    after = check_binary_shortcut(ds, eps, eta1)
    out = verify_simple_feature_bound(after.witness, ds, eps, eta1) if after.separable else {}
    ok = (not before.separable and after.separable and after.witness is not None
          and out.get("holds", False)
          and min(out["slack_shift"], out["slack_bare"]) >= -1e-9)
    verdict(4, ok, f"before separable={before.separable}, after separable={after.separable}, "
                   f"slacks shift={out.get('slack_shift')} bare={out.get('slack_bare')}")


# -- 5 -------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_criterion_05_rademacher():
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(20):
        k = int(rng.integers(2, 11))
        vals = rng.random((int(rng.integers(2, 8)), k))
        exact = empirical_rademacher(vals, method="exact").value
        mc = empirical_rademacher(vals, num_sigma=4000, seed=i, method="mc")
        worst = max(worst, abs(mc.value - exact) / mc.stderr)
    single = empirical_rademacher(rng.random((1, 7))).value
    pair = empirical_rademacher(np.array([[0.0, 0.0], [1.0, 1.0]])).value
    verdict(5, worst <= 3 and single == 0.0 and pair == 0.25,
            f"max |MC - exact| = {worst:.2f} SE over 20 classes, singleton {single}, "
            f"two constants {pair}")


# -- 6 -------------------------------------------------------------------------


def clean_by_hand(N, a, d, e, rn, re):
    return ((4 - 2 * a) * e + 4 * re) / (1 - a) + 4 * rn + 2 * math.sqrt(
        math.log(2 / d) / (N * (1 - a)))


@pytest.mark.criterion(6)
def test_criterion_06_bound_evaluators():
    grids = [(1000, 0.0, 0.05, 0.0, 0.0, 0.0), (1000, 0.1, 0.05, 0.02, 0.01, 0.03),
             (50, 0.5, 0.1, 0.2, 0.05, 0.05), (12000, 0.01, 0.01, 0.003, 0.002, 0.004),
             (7, 0.9, 0.5, 0.5, 0.3, 0.2), (100, 0.25, 1.0, 0.1, 0.0, 0.1),
             (3, 0.99, 0.05, 1.0, 1.0, 1.0), (1, 0.3, 1.9, 0.0, 0.2, 0.0),
             (500, 0.05, 0.2, 0.07, 0.11, 0.013), (60000, 0.02, 0.05, 0.015, 0.001, 0.002)]
    rel = max(abs(clean_bound_rhs(BoundInputs(N=N, alpha=a, delta=d, emp_error=e, rad_neq=rn,
                                              rad_eq=re)).total / clean_by_hand(N, a, d, e, rn, re)
                  - 1) if clean_by_hand(N, a, d, e, rn, re) else 0.0
              for N, a, d, e, rn, re in grids)
    coef = np.array([clean_coefficient(a) for a in np.linspace(0, 0.99, 1000)])
    increasing = bool((np.diff(coef) > 0).all())
    lv = np.linspace(0, 0.4, 5)
    monotone = True
    for form in ("plain", "doubled"):
        t = np.empty((5, 5, 5, 5))
        for i, j, k, l in np.ndindex(t.shape):
            inp = BoundInputs(N=2000, alpha=0.1, eta_frac=0.25, lam=1 + lv[i], epsilon=lv[j],
                              tau=lv[k], emp_error=lv[l], emp_risk=lv[l])
            t[i, j, k, l] = poison_bound_rhs(inp, 0.05, form).total
        monotone &= all((np.diff(t, axis=ax) >= 0).all() for ax in range(4))
    verdict(6, rel <= 1e-12 and increasing and monotone,
            f"max rel. error {rel:.1e} on 10 grids, coefficient increasing={increasing}, "
            f"poison bound monotone on 5^4 grid={monotone}")


# -- 7 -------------------------------------------------------------------------


@pytest.mark.criterion(7)
def test_criterion_07_gap_probability():
    t0 = time.perf_counter()
    p4, p2 = gap_probability_exact(4, 1, 1), gap_probability_exact(2, 1, 1)
    scaled = {N: gap_probability_exact(N, 1, 1) * math.sqrt(N)
              for N in (10**3, 10**4, 10**5, 10**6)}
    dt = time.perf_counter() - t0
    ok = p4 == 0.375 and p2 == 0.5 and all(0.5 <= v <= 1.1 for v in scaled.values()) and dt < 5
    verdict(7, ok, f"P(4)={p4}, P(2)={p2}, P*sqrt(N) = "
                   f"{[round(v, 4) for v in scaled.values()]}, runtime {dt:.2f}s")


# -- 8 -------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_criterion_08_metric_degeneracies():
    ds = synth_clusters(SynthSpec(classes=4, per_class=25, shape=(1, 6, 6)), 3)
    rng = np.random.default_rng(0)
    trig = rng.uniform(-0.05, 0.05, (len(ds),) + ds.shape).astype(DTYPE)
    f = build(NetworkSpec("mlp", 8, 1, ds.shape, 4), 1)
    tau = measure_c3_tau(f, f.clone(), ds, trig, 0)
    uniform = build(NetworkSpec("mlp", 8, 1, ds.shape, 4), 2)
    uniform.load_state([np.zeros_like(a) for a in uniform.state()])
    eps = measure_c1_epsilon(uniform, ds, trig, 0)
    zero = np.zeros_like(trig)
    vsc = v_sc(ds, zero, TrainConfig(epochs=10, lr=0.05, lr_milestones=()), channels=4)
    shared = TriggerSet(np.broadcast_to(trig[:1], trig.shape).copy(), 0.05, "rn_linf")
    k = measure_similarity_k(shared)["k"]
    ok = tau == 0.0 and abs(eps - 0.25) <= 1e-6 and vsc >= 2 * math.log(2) - 0.05 and k == 0.0
    verdict(8, ok, f"tau(F,F)={tau}, eps(uniform, m=4)={eps:.7f}, "
                   f"v_sc(no trigger)={vsc:.4f} >= {2 * math.log(2) - 0.05:.4f}, k(shared)={k}")


# -- 9 and 10: desk runs ------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Composed trigger and rn_linf at equal eta, three seeds, default desk config."""
    root = tmp_path_factory.mktemp("desk")
    out = {}
    for s in SEEDS:
        cfg = RunConfig().with_seed_overrides({"all": s})
        ours = run_pipeline(cfg, root / f"ours_s{s}")
        rn = run_pipeline(cfg.replace(**{"trigger.kind": "rn_linf"}), root / f"rn_s{s}",
                          cache_dirs=[root / f"ours_s{s}"])
        out[s] = (cfg, ours, rn, root / f"ours_s{s}")
    return root, out


@pytest.mark.criterion(9)
def test_criterion_09_desk_attack(desk_runs):
    _, runs = desk_runs
    rows, ok = [], True
    for s, (_, ours, rn, _) in runs.items():
        a, b = ours.condition["asr"], rn.condition["asr"]
        drop = ours.data["control"]["clean_acc"] - ours.condition["clean_acc"]
        eq_eta = ours.data["trigger"]["eta"] == rn.data["trigger"]["eta"]
        ok &= a > b and drop <= 0.05 and eq_eta
        rows.append(f"s{s}: ours {a:.3f} > rn {b:.3f}, drop {100 * drop:.2f}pt")
    verdict(9, ok, "; ".join(rows))


@pytest.mark.criterion(10)
def test_criterion_10_poison_rate_sweep(desk_runs):
    root, runs = desk_runs
    acc = {a: [] for a in ALPHAS}
    bound_ok = True
    for s, (cfg, ours, _, cache) in runs.items():
        reps = {}
        for a in ALPHAS:
            reps[a] = ours if a == cfg.alpha else run_pipeline(
                cfg.replace(alpha=a), root / f"alpha{a}_s{s}", cache_dirs=[cache])
            acc[a].append(reps[a].condition["clean_acc"])
        # fixed measured inputs, alpha varied alone
        base = reps[ALPHAS[0]].data["bounds"]["inputs"]
        totals = [clean_bound_rhs(BoundInputs(**{**base, "alpha": a})).total for a in ALPHAS]
        bound_ok &= all(x < y for x, y in zip(totals, totals[1:]))
    mean = [float(np.mean(acc[a])) for a in ALPHAS]
    acc_ok = all(y <= x + 0.02 for x, y in zip(mean, mean[1:]))
    verdict(10, acc_ok and bound_ok,
            f"mean clean acc over alpha {list(ALPHAS)}: {[round(m, 4) for m in mean]} "
            f"(non-increasing within 2pt={acc_ok}); clean bound increasing={bound_ok}")


# -- 11 -------------------------------------------------------------------------------


@pytest.mark.criterion(11)
def test_criterion_11_determinism(tmp_path):
    cfg = RunConfig.load(Path(__file__).resolve().parent.parent / "configs" / "tiny.json")
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("manifest.json", "report.json", "metrics.csv")}
    verdict(11, all(same.values()) and a.data == b.data,
            f"byte-identical across two fresh directories: {same}")
