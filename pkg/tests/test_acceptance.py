"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the pytest terminal
summary under "acceptance criteria".
"""

import math

import numpy as np
import pytest
from scipy import integrate

from threshfeed import cli, fading, optimizer, scheduler, threshold
from threshfeed.fading import ChannelModel
from threshfeed.policy import (
    GeneralThreshold,
    MaxSinrThreshold,
    PolicySpec,
    random_box_union_policy,
    random_max_sinr_box_union_policy,
)

TRIALS = 10**5
MODEL_10 = ChannelModel("rayleigh", 1.0, 2, 10)
MODEL_5 = ChannelModel("rayleigh", 1.0, 2, 5)


def _switch_suite(make_policy, kind):
    """20 single-switch checks on n=10 plus 5 chains on n=5; returns (ok, chain_ok, detail)."""
    singles = []
    for s in range(20):
        pol = make_policy(10, s)
        pair = threshold.match_policy(pol, MODEL_10, kind, seed=s)
        rep = threshold.verify_theorem1(pol, MODEL_10, TRIALS, s, kind=kind, pair=pair)
        d = rep.difference
        singles.append((rep.rate_ok, rep.load_ok and pair.tolerance <= 1e-3 * 10,
                        0.0 if d.exact_zero else d.mean / d.std_error))
    chains = []
    for s in range(5):
        pol = make_policy(5, 100 + s)
        rep = threshold.verify_monotone_chain(pol, MODEL_5, TRIALS, s, kind=kind)
        chains.append(rep.passed)
    rate_pass = sum(r for r, _, _ in singles)
    load_pass = sum(ld for _, ld, _ in singles)
    worst = min(z for _, _, z in singles)
    detail = (f"rate {rate_pass}/20, load {load_pass}/20, worst z={worst:+.2f}; "
              f"chains {sum(chains)}/5")
    return rate_pass == 20 and load_pass == 20, all(chains), detail


@pytest.fixture(scope="module")
def gtfp_suite():
    return _switch_suite(lambda n, s: random_box_union_policy(n, 2, s), "gtfp")


@pytest.fixture(scope="module")
def mtfp_suite():
    return _switch_suite(lambda n, s: random_max_sinr_box_union_policy(n, s), "mtfp")


def test_criterion_1_single_switch_gtfp(gtfp_suite, record_criterion):
    ok, _, detail = gtfp_suite
    assert record_criterion(1, "single-user switch to matched GTFP, 20 BoxUnion policies", ok, detail)


def test_criterion_2_monotone_chain_gtfp(gtfp_suite, record_criterion):
    _, ok, detail = gtfp_suite
    assert record_criterion(2, "monotone switching chain, 5 policies n=5", ok, detail)


def test_criterion_3_max_sinr_analogues(mtfp_suite, record_criterion):
    single_ok, chain_ok, detail = mtfp_suite
    assert record_criterion(3, "MTFP single switch 20/20 and chains 5/5", single_ok and chain_ok, detail)


def test_criterion_4_event_classifiers_and_mass_balance(record_criterion):
    agree_total, trials_total, balance_ok, balance_total = 0, 0, 0, 0
    for s in range(10):
        pol = random_box_union_policy(10, 2, 200 + s)
        pair = threshold.match_gtfp(pol, MODEL_10, seed=s)
        stats = threshold.event_statistics(pair, MODEL_10, 10**4, seed=s)
        agree_total += round(stats["agreement"] * stats["trials"])
        trials_total += stats["trials"]
        balance = threshold.mass_balance(pair, MODEL_10, 10**5, seed=1000 + s)
        balance_ok += sum(b["ok"] for b in balance)
        balance_total += len(balance)
    ok = agree_total == trials_total and balance_ok == balance_total
    detail = f"agreement {agree_total}/{trials_total}, mass balance {balance_ok}/{balance_total} users"
    assert record_criterion(4, "loss/gain classifiers agree; masses balance", ok, detail)


def test_criterion_5_threshold_families_coincide_above_one(record_criterion):
    mismatches = 0
    for M in (2, 3):
        V = fading.sample_user_vectors(ChannelModel("rayleigh", 1.0, M, 1), 0, 10**6, seed=M)
        mismatches += int(np.sum(GeneralThreshold(1.5).request_mask(V) != MaxSinrThreshold(1.5).request_mask(V)))
    assert record_criterion(5, "GTFP == MTFP at tau=1.5 on 1e6 vectors, M in {2,3}", mismatches == 0,
                            f"{mismatches} mismatches")


def test_criterion_6_single_user_rate_oracle(record_criterion):
    oracle, _ = integrate.quad(lambda x: math.log1p(x) * math.exp(-x), 0, math.inf, epsabs=1e-13)
    est = scheduler.ergodic_rate(PolicySpec((GeneralThreshold(0.0),)), ChannelModel(), 10**6, seed=6)
    z = (est.mean - oracle) / est.std_error
    ok = abs(z) <= 3 and abs(oracle - 0.59635) < 5e-6
    assert record_criterion(6, "ergodic rate vs quadrature oracle", ok,
                            f"mean {est.mean:.5f}, oracle {oracle:.5f}, z={z:+.2f}")


def test_criterion_7_cdf_and_quantile(record_criterion):
    model = ChannelModel("rayleigh", 1.0, 2, 1)
    V = np.sort(fading.sample_user_vectors(model, 0, 10**6, seed=7)[:, 0])
    xs = np.linspace(0.05, 6.0, 20)
    empirical = np.searchsorted(V, xs, side="right") / V.size
    cdf_err = float(np.max(np.abs(fading.marginal_cdf(model, xs) - empirical)))
    trip = max(abs(fading.upper_quantile(model, 1 - fading.marginal_cdf(model, x)) - x)
               for x in list(xs) + [0.1, 1.0, 5.0])
    ok = cdf_err <= 3e-3 and trip < 1e-4
    assert record_criterion(7, "closed-form CDF vs sampler; quantile round trip", ok,
                            f"max CDF error {cdf_err:.1e}, round trip {trip:.1e}")


def test_criterion_8_optimizer(record_criterion):
    hetero = ChannelModel("rayleigh", 1.0, 2, 2, snr_multipliers=(1.0, 4.0))
    orc = optimizer.RateOracle(hetero, "gtfp", TRIALS, 0)
    grid = optimizer.simplex_grid(hetero, 0.5, resolution=0.02, oracle=orc)
    ca = optimizer.coordinate_ascent(hetero, 0.5, oracle=orc)
    step = optimizer.grid_step_modulus(grid)
    slack = 3 * grid.rate.std_error + step
    ca_ok = ca.rate.mean >= grid.rate.mean - slack

    sym = ChannelModel("rayleigh", 1.0, 2, 2)
    orc_s = optimizer.RateOracle(sym, "gtfp", TRIALS, 1)
    hom = optimizer.homogeneous_search(sym, 0.5, oracle=orc_s)
    sgrid = optimizer.simplex_grid(sym, 0.5, resolution=0.02, symmetric=True, oracle=orc_s)
    hom_ok = hom.rate.mean >= sgrid.rate.mean - 3 * sgrid.rate.std_error
    detail = (f"coordinate {ca.rate.mean:.4f} vs grid {grid.rate.mean:.4f} (slack {slack:.4f}); "
              f"homogeneous {hom.rate.mean:.4f} vs symmetric grid {sgrid.rate.mean:.4f}")
    assert record_criterion(8, "optimizer agrees with grid oracle", ca_ok and hom_ok, detail)


def _config(task, **kw):
    cfg = {"task": task, "seed": 9, "trials": 20000,
           "model": {"kind": "rayleigh", "snr": 1.0, "m_beams": 2, "n_users": 4}}
    cfg.update(kw)
    return cfg


def test_criterion_9_determinism_across_workers(tmp_path, record_criterion):
    configs = {
        "verify-theorem1": _config("verify-theorem1",
                                   policies=[{"kind": "random_box_union", "count": 2, "seed": 0}]),
        "verify-chain": _config("verify-chain",
                                policies=[{"kind": "random_max_sinr_box_union", "count": 1, "seed": 3}]),
        "classify-events": _config("classify-events",
                                   policies=[{"kind": "random_box_union", "count": 1, "seed": 5}]),
        "simulate": _config("simulate", policies=[{"label": "g", "rule": {"kind": "gtfp", "probability": 0.2}}]),
        "optimize": _config("optimize", budget=0.5,
                            model={"kind": "rayleigh", "snr": 1.0, "m_beams": 2, "n_users": 2,
                                   "snr_multipliers": [1.0, 4.0]},
                            optimize={"method": "coordinate"}),
    }
    same = 0
    for name, cfg in configs.items():
        files = []
        for jobs, run in ((1, "a"), (8, "b"), (1, "c")):
            out = tmp_path / f"{name}-{run}"
            bundle = cli.run(dict(cfg, jobs=jobs))
            cli.write_bundle(bundle, str(out))
            files.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        same += files[0] == files[1] == files[2]
    ok = same == len(configs)
    assert record_criterion(9, "byte-identical bundles at 1 and 8 workers and on rerun", ok,
                            f"{same}/{len(configs)} tasks identical")
