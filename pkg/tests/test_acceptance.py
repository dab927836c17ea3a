"""Acceptance suite: one PASS/FAIL line per primary criterion.

Run with ``pytest -v tests/test_acceptance.py``; the lines are echoed live
and repeated in the terminal summary.
"""
import dataclasses
import math
import time

import numpy as np
import pytest
from scipy import stats

from httn.config import EvalConfig, GradcheckConfig
from httn.episodes import ci95, evaluate
from httn.errors import ConfigError
from httn.gtmt import GtmtParams, aggregate, elstc_dims, grouped_covariances, lstc, solve_aggregator, split_groups, tcov_oracle
from httn.gradcheck import run_gradcheck
from httn.model import HTTN, ModelConfig
from httn.taa import AdapterParams, TemporalAdapter, make_gamma
from httn.tensor import Tensor
from httn.trainer import TrainConfig, cosine_lr, count_trainable, train

from conftest import make_split

RESULTS = []

TOY = ModelConfig(T=8, M=8, C=24, depth=4, L=2, G=4, tau=6, C_M=4)
TOY_TRAIN = TrainConfig(epochs=5, episodes_per_epoch=20, seed=0)
EPISODES = 2000


def record(pytestconfig, number, name, ok, detail):
    line = f"ACCEPTANCE [{number:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def toy_runs():
    """Train each moment mode once on the base split, evaluate on the novel split."""
    base, bf = make_split(0, split="base")
    novel, nf = make_split(10, split="novel")
    cells = {
        "GAP": dataclasses.replace(TOY, moment_mode="GAP", adapter_mode="none"),
        "ELSTC": dataclasses.replace(TOY, moment_mode="ELSTC"),
        "GTMT": dataclasses.replace(TOY, moment_mode="GTMT"),
    }
    t0 = time.perf_counter()
    out = {}
    for name, cfg in cells.items():
        model = HTTN(cfg, seed=0)
        res = train(TOY_TRAIN, base, model, features=bf)
        out[name] = (res, evaluate(model, novel, EPISODES, 5, 5, 5, seed=0, features=nf))
    out["seconds"] = time.perf_counter() - t0
    return out


def test_01_gradient_integrity(pytestconfig):
    report, seconds = run_gradcheck(GradcheckConfig(), seed=0)
    worst_plain = max((r[2] for r in report.rows if r[3] == 1e-4), default=0.0)
    worst_bn = max((r[2] for r in report.rows if r[3] == 1e-3), default=0.0)
    ok = report.passed and seconds < 60 and worst_plain <= 1e-4 and worst_bn <= 1e-3
    record(pytestconfig, 1, "gradient integrity", ok,
           f"{len(report.rows)} tensors, max rel err {worst_plain:.2e} (tol 1e-4), "
           f"BN-path {worst_bn:.2e} (tol 1e-3), {seconds:.1f}s < 60s")


def _triple_loop(Xt):
    Tp, M, d = Xt.shape
    Y = np.zeros((Tp * d, Tp * d))
    for t in range(Tp):
        for t2 in range(Tp):
            for i in range(d):
                for j in range(d):
                    Y[t * d + i, t2 * d + j] = sum(Xt[t, m, i] * Xt[t2, m, j] for m in range(M)) / M
    return Y


def test_02_covariance_oracle(pytestconfig):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        Tp, M, d = (int(v) for v in rng.integers(1, [5, 9, 9]))
        Xt = rng.normal(size=(Tp, M, d))
        worst = max(worst, float(np.abs(lstc(Tensor(Xt, dtype=np.float64)).Y.data - _triple_loop(Xt)).max()))
    X, K, b = rng.normal(size=(8, 7, 24)), rng.normal(size=(24, 4)), rng.normal(size=4)
    Y1 = grouped_covariances(Tensor(X, dtype=np.float64), 1, Tensor(K, dtype=np.float64), Tensor(b, dtype=np.float64)).data[..., 0]
    g1_err = float(np.abs(Y1 - tcov_oracle(X, K, b)).max())
    Ys = grouped_covariances(Tensor(X, dtype=np.float64), 4, Tensor(K, dtype=np.float64)).data
    asym = max(float(np.abs(Ys[..., e] - Ys[..., e].T).max()) for e in range(4))
    min_quad = np.inf
    for g in split_groups(Tensor(X, dtype=np.float64), 2):
        cov = lstc(g, Tensor(K, dtype=np.float64))
        for t in range(cov.frames):
            xs = rng.normal(size=(100, 4))
            min_quad = min(min_quad, float(np.einsum("ni,ij,nj->n", xs, cov.block(t, t), xs).min()))
    ok = worst <= 1e-6 and g1_err <= 1e-12 and asym == 0.0 and min_quad >= -1e-8
    record(pytestconfig, 2, "covariance oracle", ok,
           f"triple-loop max err {worst:.1e} over 50 (tol 1e-6), G=1 vs TCov {g1_err:.1e} (tol 1e-12), "
           f"asymmetry {asym:.1e}, min x'Rx {min_quad:.3g} (>= -1e-8)")


def test_03_dimension_arithmetic(pytestconfig):
    dims = {G: elstc_dims(8, 384, 6, G)[1] for G in (1, 2, 4, 8)}
    ok = dims == {1: 262144, 2: 65536, 4: 16384, 8: 4096}
    record(pytestconfig, 3, "dimension arithmetic", ok,
           f"G=1 {dims[1]} (262K), G=2 {dims[2]} (65K), G=4 {dims[4]}, G=8 {dims[8]}; "
           "printed 4K/1K for G=4/8 differ from the formula, see notes")


def test_04_aggregator_shape_contract(pytestconfig):
    p = GtmtParams.init(8, 384, 6, 4, 3, 64, rng=np.random.default_rng(0))
    Ys = Tensor(np.random.default_rng(1).normal(size=(2, 128, 128, 4)).astype(np.float32))
    out = aggregate(Ys, p, train=True)
    try:
        solve_aggregator(4, 64, 3)
        loud = False
    except ConfigError as exc:
        loud = "tried" in str(exc)
    ok = tuple(out.shape[1:]) == (64, 64) and p.agg_w2.shape[0] == 1 and loud
    g = p.geometry
    record(pytestconfig, 4, "aggregator shape contract", ok,
           f"128x128x4 -> {out.shape[1]}x{out.shape[2]}x{p.agg_w2.shape[0]} (strides {g.stride1},{g.stride2}, "
           f"pads {g.pad1},{g.pad2}); unsolvable 4->64 raises: {loud}")


def test_05_parameter_efficiency(pytestconfig):
    cfg = ModelConfig(T=8, M=49, C=384, depth=12, L=2, G=4, tau=6, C_M=64)
    model = HTTN(cfg)
    n = count_trainable(model)
    ratio = n / (n + model.num_frozen())
    C, rho, k_t, L = cfg.C, cfg.rho, cfg.k_t, cfg.L
    delta = dataclasses.replace(cfg, share_down=False).closed_form_trainable() - cfg.closed_form_trainable()
    unshared = count_trainable(HTTN(dataclasses.replace(cfg, share_down=False, depth=2)))
    shared = count_trainable(HTTN(dataclasses.replace(cfg, depth=2)))
    expect = L * (k_t * C * C // rho + C // rho)
    ok = n == cfg.closed_form_trainable() and ratio < 0.15 and delta == expect and unshared - shared == expect
    record(pytestconfig, 5, "parameter efficiency audit", ok,
           f"trainable {n:,} = closed form, frozen {model.num_frozen():,}, ratio {ratio:.3f} < 0.15 "
           f"(reference 2.8M/29.9M = {2.8 / 29.9:.3f}); shared/unshared delta {unshared - shared:,} = {expect:,}")


def test_06_order_sensitivity_separation(pytestconfig, toy_runs):
    gap = toy_runs["GAP"][1]
    gtmt = toy_runs["GTMT"][1]
    secs = toy_runs["seconds"]
    ok = abs(gap.mean_accuracy - 20.0) <= 3.0 and gtmt.mean_accuracy >= 80.0 and TOY_TRAIN.epochs <= 40 and secs < 1800
    record(pytestconfig, 6, "order-sensitivity separation", ok,
           f"GAP-only {gap.mean_accuracy:.2f}+-{gap.ci95:.2f} (chance 20 +-3), GTMT {gtmt.mean_accuracy:.2f}"
           f"+-{gtmt.ci95:.2f} (>= 80) after {TOY_TRAIN.epochs} epochs, {EPISODES} episodes, {secs:.0f}s total")


def test_07_ablation_monotonicity(pytestconfig, toy_runs):
    g, e, a = (toy_runs[k][1] for k in ("GTMT", "ELSTC", "GAP"))
    ge = g.mean_accuracy >= e.mean_accuracy - (g.ci95 + e.ci95)
    ea = e.mean_accuracy >= a.mean_accuracy - (e.ci95 + a.ci95)
    gap = g.mean_accuracy - a.mean_accuracy
    ok = ge and ea and gap >= 10.0
    record(pytestconfig, 7, "ablation monotonicity", ok,
           f"GTMT {g.mean_accuracy:.2f} >= ELSTC {e.mean_accuracy:.2f} >= GAP {a.mean_accuracy:.2f} "
           f"within CI overlap; GTMT-GAP = {gap:.1f} >= 10")


class _Constant:
    def embed(self, x, train=False):
        return np.zeros((len(x), 3), dtype=np.float32)


def test_08_episodic_statistics(pytestconfig):
    novel, nf = make_split(10, split="novel")
    const = evaluate(_Constant(), novel, EPISODES, 5, 5, 5, seed=1, features=nf)
    n_queries = EPISODES * 25
    correct = round(const.mean_accuracy / 100 * n_queries)
    pval = stats.binomtest(correct, n_queries, 0.2).pvalue
    lo, hi = stats.binom.interval(0.99, n_queries, 0.2)
    model = HTTN(TOY, seed=3)
    r1 = evaluate(model, novel, 200, seed=7, features=nf)
    r2 = evaluate(model, novel, 200, seed=7, features=nf)
    same = r1.accuracies == r2.accuracies and r1.mean_accuracy == r2.mean_accuracy and r1.ci95 == r2.ci95
    acc = [float(v) for v in np.random.default_rng(0).uniform(0, 100, 500)]
    m = sum(acc) / len(acc)
    scalar = 1.96 * math.sqrt(sum((v - m) ** 2 for v in acc) / len(acc)) / math.sqrt(len(acc))
    ci_err = abs(ci95(acc) - scalar)
    ok = lo <= correct <= hi and pval > 0.01 and same and ci_err <= 1e-12
    record(pytestconfig, 8, "episodic statistics", ok,
           f"constant model {const.mean_accuracy:.2f}% (binomial p={pval:.2f}), bit-deterministic: {same}, "
           f"ci95 vs scalar {ci_err:.1e}")


def test_09_taa_deterministic_start(pytestconfig):
    rng = np.random.default_rng(9)
    p = AdapterParams.init(24, rng=rng)
    F = rng.normal(size=(4, 8, 8, 24)).astype(np.float32)
    bitwise = TemporalAdapter(p)(Tensor(F)).data.tobytes() == (0.5 * F).tobytes()
    q = AdapterParams.init(16, rng=rng, dtype=np.float64)
    for t in (q.W_up_gamma, q.b_up_gamma):
        t.data[...] = rng.uniform(-1, 1, t.shape)
    g = make_gamma(Tensor(rng.normal(size=(7813, 8, 16)) * 2.0, dtype=np.float64), q).data
    inside = bool((g > 0).all() and (g < 1).all())
    ok = bitwise and inside and g.size >= 10 ** 6
    record(pytestconfig, 9, "TAA deterministic start", ok,
           f"F' == 0.5F bitwise: {bitwise}; gamma in (0,1) for {g.size:,} probes: {inside} "
           f"(range {g.min():.3g}..{g.max():.3g})")


def test_10_cosine_endpoints(pytestconfig):
    base, total = 0.01, 4000
    vals = (cosine_lr(0, total, base), cosine_lr(total, total, base), cosine_lr(total // 2, total, base))
    ok = vals == (base, 0.0, base / 2)
    record(pytestconfig, 10, "cosine schedule endpoints", ok, f"lr(0)={vals[0]!r}, lr(total)={vals[1]!r}, lr(mid)={vals[2]!r}")


def test_toy_training_accuracy(toy_runs):
    # trainer example: the GTMT config reaches >= 90% train-episode accuracy
    metrics = toy_runs["GTMT"][0].metrics
    last = [m["acc"] for m in metrics if m["epoch"] == TOY_TRAIN.epochs]
    assert np.mean(last) >= 90.0
