import json
import math
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from puppetry.calibration import effective_hashrate, load_calibration
from puppetry.defense import PolicyConfig
from puppetry.simnet import (
    Baseline,
    BaselineModel,
    ConfigError,
    Dist,
    SimConfig,
    crossover_time,
    empirical_crossover,
    gnuplot_script,
    load_sim_config,
    run_pair,
    run_simulation,
    sample_population,
    sweep,
    write_report,
)

from .oracles import active_intervals, binomial_band, crossover_closed_form

INFINITE = Dist("infinite")


def per_core_rate(cfg):
    t = load_calibration()
    return effective_hashrate(t.device(cfg.device), t.browser(cfg.browser), 1.0, 1)


def small(**kw):
    base = dict(population=40, duration_s=6 * 3600.0, sample_interval_s=60.0)
    base.update(kw)
    return SimConfig(**base)


def test_single_persistent_servant_closed_form():
    cfg = SimConfig(population=1, browser_uptime=INFINITE, effective_cores=1.0, intensity=1.0)
    r = run_simulation(cfg)
    rate = per_core_rate(cfg)
    assert r.cum_hashes[-1] == pytest.approx(rate * 43200.0, abs=rate * cfg.sample_interval_s)
    assert r.times[-1] == 43200.0 and r.active[-1] == 1


def test_same_seed_is_bit_identical():
    cfg = small(seed=5, iframe_activation_rate=0.5)
    a, b = run_simulation(cfg), run_simulation(cfg)
    assert a == b
    assert a.to_csv() == b.to_csv() and a.events_jsonl() == b.events_jsonl()


def test_different_seeds_differ():
    assert run_simulation(small(seed=1)).events != run_simulation(small(seed=2)).events


def test_zero_push_probability_means_no_push_reactivation():
    r = run_simulation(small(push_grant_prob=0.0))
    assert r.reactivations_by_push == 0


def test_zero_iframe_rate_means_no_iframe_reactivation():
    r = run_simulation(small(iframe_activation_rate=0.0, push_grant_prob=1.0))
    assert r.reactivations_by_iframe == 0
    assert r.reactivations_by_push > 0


def test_iframe_rate_produces_iframe_reactivations():
    assert run_simulation(small(iframe_activation_rate=2.0)).reactivations_by_iframe > 0


def test_push_grants_binomial_band():
    cfg = SimConfig(population=1000, seed=0)
    users = sample_population(cfg, random.Random(cfg.seed))
    grants = sum(u.push_granted for u in users)
    lo, hi = binomial_band(1000, 0.12)
    assert lo <= grants <= hi
    assert 85 <= grants <= 155


def test_mean_visit_duration():
    cfg = SimConfig(population=10_000, duration_s=60.0)
    users = sample_population(cfg, random.Random(0))
    mean = sum(u.visit_s for u in users) / len(users)
    assert abs(mean - 60.0) <= 6.0


def test_schedules_are_ordered_and_cover_horizon():
    cfg = SimConfig(population=200, iframe_activation_rate=1.0)
    for u in sample_population(cfg, random.Random(3)):
        flat = [t for s in u.sessions for t in s]
        assert flat == sorted(flat) and flat[0] == 0.0
        assert all(o <= cfg.duration_s for o, _ in u.sessions)
        for on, off in u.iframes:
            assert off > on and any(a <= on < b for a, b in u.sessions)


@pytest.mark.parametrize("cores, visit, eff, expected", [(8, 60, 1.0, 480.0), (8, 60, 8 / 18, 1080.0),
                                                         (8, 60, 0.4444, 1080.108)])
def test_crossover_closed_form(cores, visit, eff, expected):
    got = crossover_time(eff, BaselineModel(cores), visit)
    assert got == pytest.approx(crossover_closed_form(cores, visit, eff))
    assert got == pytest.approx(expected, abs=1e-3)


@given(st.integers(1, 64), st.floats(1.0, 1e5))
def test_crossover_parity(cores, t):
    assert crossover_time(cores, BaselineModel(cores), t) == pytest.approx(t)


def test_crossover_rejects_nonpositive():
    with pytest.raises(ConfigError):
        crossover_time(0.0, BaselineModel(), 60)
    with pytest.raises(ConfigError):
        BaselineModel(cores_used=0)


@pytest.mark.parametrize("bad", [
    dict(kind="exponential", mean=0), dict(kind="exponential"), dict(kind="lognormal", median=-1, sigma=1),
    dict(kind="lognormal", median=1, sigma=-0.5), dict(kind="uniform", low=5, high=1),
    dict(kind="constant", value=-1), dict(kind="gamma", mean=1),
])
def test_invalid_distributions(bad):
    with pytest.raises(ConfigError):
        Dist(**bad)


@pytest.mark.parametrize("bad", [dict(population=0), dict(push_grant_prob=1.5), dict(duration_s=-1),
                                 dict(iframe_activation_rate=-1), dict(effective_cores=0)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_config_round_trip_and_file(tmp_path):
    cfg = SimConfig(seed=3, policy=PolicyConfig(sw_time_cap_ms=60_000), visit_duration=Dist("uniform", low=1, high=2))
    assert SimConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_sim_config(path, population=7, seed=None) == replace(cfg, population=7)
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"nonsense": 1})


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.sampled_from(list(Baseline)), st.floats(0, 3))
def test_accrual_matches_interval_oracle(seed, baseline, iframe_rate):
    cfg = SimConfig(seed=seed, population=15, duration_s=4 * 3600.0, baseline=baseline,
                    iframe_activation_rate=iframe_rate, sample_interval_s=300.0)
    r = run_simulation(cfg)
    oracle = active_intervals(r.events, cfg.duration_s)
    per_servant = [oracle.get(i, 0.0) for i in range(cfg.population)]
    assert per_servant == pytest.approx(r.active_seconds, abs=1e-6)
    assert r.cum_hashes[-1] == pytest.approx(r.hash_rate * sum(per_servant), rel=1e-9)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.sampled_from(list(Baseline)))
def test_series_monotone_and_clock_forward(seed, baseline):
    r = run_simulation(small(seed=seed, baseline=baseline, iframe_activation_rate=1.0, flood_fraction=0.5))
    for series in (r.times, r.cum_hashes, r.cum_requests):
        assert all(b >= a for a, b in zip(series, series[1:]))
    ts = [e["t_s"] for e in r.events]
    assert ts == sorted(ts)
    assert all(e["from"] != e["to"] for e in r.events)
    assert all(0 <= a <= r.config["population"] for a in r.active)


def test_baseline_saturates_per_infection():
    cfg = SimConfig(population=50, seed=2, baseline=Baseline.WEB_WORKER, browser_uptime=INFINITE)
    r = run_simulation(cfg)
    users = sample_population(cfg, random.Random(cfg.seed))
    per_core = per_core_rate(cfg)
    expected = sum(cfg.baseline_cores * u.visit_s * per_core for u in users)
    assert r.cum_hashes[-1] == pytest.approx(expected, rel=1e-9)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_marionet_eventually_exceeds_baseline(seed):
    cfg = SimConfig(seed=seed, population=30, browser_uptime=INFINITE, sample_interval_s=60.0)
    m, b = run_pair(cfg)
    assert m.cum_hashes[-1] > b.cum_hashes[-1]
    assert empirical_crossover(m, b) is not None


@pytest.mark.parametrize("cap_s", [60.0, 600.0, 3600.0])
def test_time_cap_bounds_uptime(cap_s):
    cfg = small(policy=PolicyConfig(sw_time_cap_ms=cap_s * 1000), push_grant_prob=1.0, iframe_activation_rate=2.0)
    r = run_simulation(cfg)
    assert r.terminations_by_cap > 0
    # the cap counts uptime per servant, which is the sum of its Active intervals
    assert max(r.active_seconds) <= cap_s + 1e-6


def test_whitelist_denies_registration():
    cfg = small(policy=PolicyConfig(whitelist=frozenset({"good.test"})))
    r = run_simulation(cfg)
    assert r.registrations_denied == cfg.population and r.cum_hashes[-1] == 0.0


def test_click_to_activate_uses_consent():
    cfg = small(population=400, policy=PolicyConfig(click_to_activate=True, consent_grant_prob=0.12))
    r = run_simulation(cfg)
    users = sample_population(cfg, random.Random(cfg.seed))
    assert r.registrations_denied == sum(not u.consent for u in users)


def test_policy_does_not_govern_the_baseline():
    cfg = small(baseline=Baseline.WEB_WORKER)
    capped = replace(cfg, policy=PolicyConfig(sw_time_cap_ms=1000, whitelist=frozenset({"x.test"})))
    assert run_simulation(cfg).cum_hashes == run_simulation(capped).cum_hashes


def test_flood_requests_accrue():
    r = run_simulation(small(flood_fraction=1.0))
    assert r.request_rate > 0 and r.cum_requests[-1] > 0


def test_sweep_matches_serial():
    cfgs = [small(seed=s) for s in range(4)]
    assert sweep(cfgs, workers=4) == [run_simulation(c) for c in cfgs]


def test_write_report_and_plot(tmp_path):
    r = run_simulation(small())
    paths = write_report(r, tmp_path, "marionet")
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "t_s,active,cum_hashes,cum_requests"
    assert len(lines) == len(r.times) + 1
    assert json.loads(paths["summary"].read_text())["infections"] == r.infections
    assert len(paths["events"].read_text().splitlines()) == len(r.events)
    script = gnuplot_script("m.csv", "b.csv", crossover_s=1080.0)
    assert "m.csv" in script and "b.csv" in script and "1080" in script


def test_empirical_crossover_rejects_mismatched_grids():
    a = run_simulation(small(sample_interval_s=60.0))
    b = run_simulation(small(sample_interval_s=120.0, baseline=Baseline.WEB_WORKER))
    with pytest.raises(ValueError):
        empirical_crossover(a, b)


def test_infinite_distribution():
    assert math.isinf(INFINITE.sample(random.Random(0))) and math.isinf(INFINITE.expected)
