"""Acceptance suite: one PASS/FAIL line per criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` (the lines are printed
with capture disabled, so plain ``pytest -v`` shows them too).
"""
import itertools
import json
import os
import shutil
import time

import numpy as np
import pytest

from slate_ope import (
    CascadeRewardModel,
    Context,
    Policy,
    SimWorld,
    UniformRandomPolicy,
    generate_world,
    iips_normalized,
    importance_weights,
    log_impressions,
    nis,
    policy_from_config,
    rips,
    rips_closed_form,
    true_value,
)
from slate_ope.cli import main
from slate_ope.estimators import recursive_weights
from slate_ope.harness import ExperimentGrid, derive_seed, run_grid, sweep_slate_size, sweep_threshold
from slate_ope.pseudoinverse import pi_uniform

from .conftest import make_dataset
from .test_estimators import monotone_instance

JOBS = min(4, os.cpu_count() or 1)
SEED = 0


@pytest.fixture
def verdict(capsys):
    def record(number, title, ok, detail, started):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail} [{time.time() - started:.1f}s]"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def world10():
    return generate_world(n_contexts=50, n_candidates=10, cascade=CascadeRewardModel.hard(), seed=SEED)


def test_criterion_01_unit_mean_weights(verdict):
    t0 = time.time()
    world = world10()
    data = log_impressions(world, UniformRandomPolicy(), 10, 100_000, seed=derive_seed(SEED, "c1"))
    w = importance_weights(data, policy_from_config("optimal", world.scores))
    gamma_prev = np.ones(data.n)
    z = []
    for k in range(10):
        x = gamma_prev * w[:, k]
        mean, se = x.mean(), x.std(ddof=1) / np.sqrt(data.n)
        z.append(abs(mean - 1.0) / se if se > 0 else np.inf)
        gamma_prev = x / mean if mean > 0 else x
    bad = [k + 1 for k, v in enumerate(z) if not v < 3.0]
    detail = "max |mean-1|/SE per position = " + ", ".join(f"{v:.2f}" for v in z)
    if bad:
        detail += f"; positions outside 3 SE: {bad}"
    verdict(1, "unit-mean weights", not bad and time.time() - t0 < 60, detail, t0)


def test_criterion_02_variance_dominance(verdict):
    t0 = time.time()
    world = world10()
    target = policy_from_config("softmax:1.0", world.scores)
    closed, normalised, max_diff = [], [], 0.0
    for r in range(200):
        data = log_impressions(world, UniformRandomPolicy(), 10, 2000, seed=derive_seed(SEED, "c2", r))
        w = importance_weights(data, target)
        a, b = rips_closed_form(data, weights=w), nis(data, weights=w)
        max_diff = max(max_diff, float(np.max(np.abs(a.weights[:, -1] - b.weights[:, -1]))))
        closed.append(a.value)
        normalised.append(b.value)
    var_r, var_n = np.var(closed, ddof=1), np.var(normalised, ddof=1)
    ok = var_r <= 1.05 * var_n and max_diff <= 1e-12 and time.time() - t0 < 120
    verdict(2, "variance dominance", ok,
            f"var(rips_closed)={var_r:.5g} vs 1.05*var(nis)={1.05 * var_n:.5g}; position-K max diff={max_diff:.3g}", t0)


def test_criterion_03_grid(verdict):
    t0 = time.time()
    grid = ExperimentGrid.standard_grid(n=10_000, repeats=20, seed=SEED, slate_size=10,
                                     estimators=["online", "ips", "nis", "iips", "rips"])
    res = run_grid(world10(), grid, jobs=JOBS)
    names = list(grid.logging_policies)
    failures = []
    for log, tgt in itertools.product(names, names):
        if log == tgt:
            for est in ("online", "ips", "nis", "iips", "rips"):
                c = res.cell(log, tgt, est)
                if not abs(c["mean"] - c["truth"]) <= c["ci_halfwidth"]:
                    failures.append(f"(c) {log}->{tgt} {est}: |{c['mean']:.4f}-{c['truth']:.4f}| > {c['ci_halfwidth']:.4f}")
            continue
        r, i, p = res.cell(log, tgt, "rips"), res.cell(log, tgt, "iips"), res.cell(log, tgt, "ips")
        if not abs(r["mean"] - r["truth"]) < abs(i["mean"] - i["truth"]):
            failures.append(f"(a) {log}->{tgt}: rips err {abs(r['mean'] - r['truth']):.4f} "
                            f"vs iips err {abs(i['mean'] - i['truth']):.4f}")
        if not p["ci_halfwidth"] > r["ci_halfwidth"]:
            failures.append(f"(b) {log}->{tgt}: ips CI {p['ci_halfwidth']:.4f} vs rips CI {r['ci_halfwidth']:.4f}")
    ok = not failures and time.time() - t0 < 600
    detail = "all 9 cells meet (a)-(c)" if not failures else f"{len(failures)} violations: " + "; ".join(failures)
    verdict(3, "3x3 grid", ok, detail, t0)


def test_criterion_04_threshold(verdict):
    t0 = time.time()
    ts = [1.0, 0.1, 0.01, 0.001]
    res = sweep_threshold(world10(), "uniform", "anti-optimal", ts, n=10_000, repeats=20, seed=SEED,
                          slate_size=10, jobs=JOBS)
    at_one = res.rows[res.rows["threshold"] == 1.0]
    eq_gap = float(np.max(np.abs(at_one["estimate"] - at_one["iips_sn"])))
    # "Any dataset": also random weight matrices with real-valued rewards.
    rng = np.random.default_rng(SEED)
    for _ in range(20):
        n, k = int(rng.integers(2, 300)), int(rng.integers(1, 10))
        ds = make_dataset(rng.random((n, k)) * 3)
        w = rng.lognormal(0, 2, (n, k))
        eq_gap = max(eq_gap, abs(rips(ds, weights=w, config=1.0).value - iips_normalized(ds, weights=w).value))
    summary = res.summary.set_index("threshold").loc[ts]
    lookbacks, widths = summary["mean_lookback"].to_numpy(), summary["ci_halfwidth"].to_numpy()
    ok = (eq_gap <= 1e-9 and np.all(np.diff(lookbacks) >= 0) and np.all(np.diff(widths) >= 0)
          and time.time() - t0 < 300)
    verdict(4, "threshold behaviour", ok,
            f"t=1 vs iips_sn max gap={eq_gap:.2g}; mean lookback {np.round(lookbacks, 3).tolist()}; "
            f"CI half-width {np.round(widths, 5).tolist()}", t0)


def test_criterion_05_slate_size(verdict):
    t0 = time.time()
    ks = [1, 3, 5, 10]
    res = sweep_slate_size(world10(), "uniform", "optimal", ks, n=10_000, repeats=20, seed=SEED,
                           estimators=["ips", "nis", "iips", "iips_sn", "rips"], jobs=JOBS)
    s = res.summary.set_index(["slate_size", "estimator"])
    problems = []
    k1 = ["ips", "nis", "iips_sn", "rips"]
    for a, b in itertools.combinations(k1, 2):
        gap = abs(s.loc[(1, a), "mean"] - s.loc[(1, b), "mean"])
        if not gap < s.loc[(1, a), "ci_halfwidth"] + s.loc[(1, b), "ci_halfwidth"]:
            problems.append(f"K=1 {a} vs {b} gap {gap:.4f}")
    rows = res.rows[res.rows["slate_size"] == 1].pivot(index="repeat", columns="estimator", values="estimate")
    rips_nis = float(np.max(np.abs(rows["rips"] - rows["nis"])))
    if not rips_nis <= 1e-9:
        problems.append(f"K=1 rips-nis {rips_nis:.3g}")
    iips_err = [s.loc[(k, "iips"), "abs_error"] for k in ks]
    ips_ci = [s.loc[(k, "ips"), "ci_halfwidth"] for k in ks]
    if not np.all(np.diff(iips_err) >= 0):
        problems.append("IIPS error not nondecreasing")
    if not np.all(np.diff(ips_ci) >= 0):
        problems.append("IPS CI width not nondecreasing")
    ok = not problems and time.time() - t0 < 600
    detail = (f"K=1 max |rips-nis|={rips_nis:.2g}; IIPS |error| {np.round(iips_err, 4).tolist()}; "
              f"IPS CI half-width {np.round(ips_ci, 4).tolist()}")
    if problems:
        detail += "; violations: " + "; ".join(problems)
    verdict(5, "slate-size behaviour", ok, detail, t0)


def test_criterion_06_consistency(verdict):
    t0 = time.time()
    small, large = [], []
    for s in range(10):
        world = generate_world(50, 10, CascadeRewardModel.hard(), seed=derive_seed(SEED, "c6", s))
        target = policy_from_config("optimal", world.scores)
        truth = true_value(world, target, 10).value
        for n, errs in ((100, small), (100_000, large)):
            data = log_impressions(world, UniformRandomPolicy(), 10, n, seed=derive_seed(SEED, "c6", s, n))
            errs.append(abs(rips(data, target).value - truth))
    m_small, m_large = float(np.median(small)), float(np.median(large))
    ok = m_large < 0.5 * m_small and time.time() - t0 < 300
    verdict(6, "consistency", ok,
            f"median |rips-truth| N=1e5: {m_large:.4f} vs 0.5 x N=1e2: {0.5 * m_small:.4f}", t0)


def test_criterion_07_closed_form_equivalence(verdict):
    t0 = time.time()
    w = monotone_instance(n=200, k=8, seed=SEED)
    ds = make_dataset(np.random.default_rng(SEED).integers(0, 2, w.shape))
    capped = rips(ds, weights=w, config=0.0)
    full_lookback = capped.chosen_lookbacks == list(range(8))
    gap_alg = abs(capped.value - rips_closed_form(ds, weights=w).value)
    rng = np.random.default_rng(SEED + 1)
    gap_rec = 0.0
    for _ in range(50):
        n, k = int(rng.integers(1, 500)), int(rng.integers(1, 12))
        w = rng.lognormal(0, 1.5, (n, k))
        ds = make_dataset(rng.random((n, k)))
        closed = rips_closed_form(ds, weights=w)
        rec = recursive_weights(w)
        gap_rec = max(gap_rec, float(np.max(np.abs(closed.weights - rec) / rec)),
                      abs(closed.value - float((rec * ds.rewards).sum(axis=1).mean())))
    ok = full_lookback and gap_alg <= 1e-9 and gap_rec <= 1e-12
    verdict(7, "closed form vs algorithm", ok,
            f"full lookback={full_lookback}; |rips(t=0)-closed|={gap_alg:.2g}; "
            f"closed vs recursion max rel gap={gap_rec:.2g}", t0)


def _indicator(slate, m):
    x = np.zeros(len(slate) * m)
    x[np.arange(len(slate)) * m + np.asarray(slate)] = 1.0
    return x


def _brute_force_pi(data, target):
    total = 0.0
    for i in range(data.n):
        ctx = data.contexts[data.context_index[i]]
        m = ctx.n_candidates
        slates = list(itertools.permutations(range(m)))
        gamma = sum(np.outer(_indicator(s, m), _indicator(s, m)) for s in slates) / len(slates)
        q = np.zeros(m * m)
        for s in slates:
            names = [ctx.candidates[a] for a in s]
            p = np.prod([target.propensity(ctx, names[:k], k, names[k]) for k in range(m)])
            q += p * _indicator(s, m)
        total += q @ np.linalg.pinv(gamma) @ _indicator(data.actions[i], m) * data.rewards[i].sum()
    return total / data.n


def test_criterion_08_pi_oracle(verdict):
    t0 = time.time()
    gap = 0.0
    for m in (2, 3):
        world = generate_world(5, m, seed=derive_seed(SEED, "c8", m))
        for spec in ("sorted:desc", "softmax:0.5"):
            target = policy_from_config(spec, world.scores)
            data = log_impressions(world, UniformRandomPolicy(), m, 200, seed=derive_seed(SEED, "c8", m, spec))
            gap = max(gap, abs(pi_uniform(data, target).value - _brute_force_pi(data, target)))
    world = generate_world(20, 3, CascadeRewardModel.probabilistic(0.0), seed=derive_seed(SEED, "c8", "additive"))
    target = policy_from_config("optimal", world.scores)
    data = log_impressions(world, UniformRandomPolicy(), 3, 100_000, seed=derive_seed(SEED, "c8", "logs"))
    report = pi_uniform(data, target)
    truth = true_value(world, target, 3).value
    z = abs(report.value - truth) / report.std_error
    ok = gap <= 1e-8 and z < 3 and time.time() - t0 < 120
    verdict(8, "PI oracle", ok, f"max |pi - enumeration|={gap:.2g}; additive world |pi-truth|/SE={z:.2f}", t0)


class FixedSlate(Policy):
    """Always shows the same ordering of one context's candidates."""

    deterministic = True

    def __init__(self, order):
        self.order = list(order)

    def distribution(self, context, previous_actions):
        nxt = next(c for c in self.order if c not in previous_actions)
        return {nxt: 1.0}


def test_criterion_09_simulator_oracle(verdict):
    t0 = time.time()
    rng = np.random.default_rng(derive_seed(SEED, "c9"))
    n = 1_000_000
    worst, misses = 0.0, []
    for cascade in (CascadeRewardModel.hard(), CascadeRewardModel.probabilistic()):
        for j in range(20):
            p = rng.random(10)
            ctx = Context("fixed", tuple(f"item{i}" for i in range(10)))
            world = SimWorld((ctx,), p[None, :], cascade)
            order = [ctx.candidates[i] for i in rng.permutation(10)]
            truth = true_value(world, FixedSlate(order), 10).value
            probs = p[[ctx.index(c) for c in order]]
            totals = cascade.sample(np.broadcast_to(probs, (n, 10)), rng).sum(axis=1)
            z = abs(totals.mean() - truth) / (totals.std(ddof=1) / np.sqrt(n))
            worst = max(worst, z)
            if not z < 3:
                misses.append(f"{cascade.mode} slate {j}: z={z:.2f}")
    ok = not misses and time.time() - t0 < 120
    detail = f"40 slates, max |mean-truth|/SE={worst:.2f}" + (f"; outside 3 SE: {misses}" if misses else "")
    verdict(9, "simulator oracle", ok, detail, t0)


def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(verdict, tmp_path):
    t0 = time.time()
    sim = ["simulate", "--contexts", "6", "--candidates", "5", "--slate-size", "5", "--n", "300"]
    runs = {
        "simulate": sim,
        "grid": ["grid", "--contexts", "6", "--candidates", "5", "--slate-size", "4", "--n", "300", "--repeats", "3",
                 "--estimators", "online,ips,nis,iips,iips_sn,pi_mc,rips_closed,rips", "--plot-data"],
        "sweep-threshold": ["sweep-threshold", "--contexts", "6", "--candidates", "5", "--slate-size", "5", "--n",
                            "300", "--repeats", "3", "--plot-data"],
        "sweep-slate": ["sweep-slate", "--contexts", "6", "--candidates", "5", "--slate-sizes", "1,3,5", "--n", "300",
                        "--repeats", "3", "--estimators", "ips,nis,iips,iips_sn,pi,rips", "--plot-data"],
        "sweep-data": ["sweep-data", "--contexts", "6", "--candidates", "5", "--slate-size", "5", "--n", "600",
                       "--repeats", "2", "--fractions", "0.1,0.5,1", "--plot-data"],
    }
    mismatched = []
    for name, argv in runs.items():
        out = tmp_path / name
        assert main(argv + ["--seed", "5", "--out", str(out)]) == 0
        first = _snapshot(out)
        saved = tmp_path / f"{name}.resolved.json"
        shutil.copy(out / "resolved_config.json", saved)
        shutil.rmtree(out)
        assert main([argv[0], "--config", str(saved)]) == 0
        if _snapshot(out) != first:
            mismatched.append(name)
    logs, world = tmp_path / "simulate" / "logs.jsonl", tmp_path / "simulate" / "world.json"
    singles = {
        "estimate": ["estimate", "--estimator", "rips", "--threshold", "0.01", "--target", "sorted:desc",
                     "--world", str(world), "--logs", str(logs)],
        "estimate-pi": ["estimate", "--estimator", "pi", "--target", "softmax:0.5", "--world", str(world),
                        "--logs", str(logs)],
        "truth": ["truth", "--world", str(world), "--target", "softmax:0.5", "--slate-size", "5"],
    }
    for name, argv in singles.items():
        out = tmp_path / f"{name}.json"
        assert main(argv + ["--seed", "5", "--out", str(out)]) == 0
        first = out.read_bytes() + (tmp_path / f"{name}.config.json").read_bytes()
        resolved = json.loads((tmp_path / f"{name}.config.json").read_text())
        saved = tmp_path / f"{name}.resolved.json"
        saved.write_text(json.dumps(resolved))
        out.unlink()
        assert main([argv[0], "--config", str(saved)]) == 0
        if out.read_bytes() + (tmp_path / f"{name}.config.json").read_bytes() != first:
            mismatched.append(name)
    total = len(runs) + len(singles)
    verdict(10, "determinism", not mismatched,
            f"{total - len(mismatched)}/{total} commands byte-identical on replay"
            + (f"; differing: {mismatched}" if mismatched else ""), t0)
