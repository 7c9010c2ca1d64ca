import dataclasses

import pytest

from turbochannel.fec import rs_correctable
from turbochannel.harness import (ConfigError, Scenario,
                                  count_frequency_changes, emit_csv,
                                  load_scenario, noise_change_histogram,
                                  parse_csv, parse_scenario_config,
                                  plan_marking_cores, plan_threshold,
                                  probe_core_count, record_packet_outcomes,
                                  run_one, run_scenario, sweep)
from turbochannel.turbo import (FrequencyTrace, NoiseProfile, builtin_policy,
                                turbo_frequency)

XEON = builtin_policy("xeon-silver-4108")
GHZ = 1_000_000_000


def scenario(**kw):
    kw.setdefault("name", "test")
    kw.setdefault("policy", XEON)
    kw.setdefault("bit_times_us", (7_000,))
    kw.setdefault("payload_bytes", 16)
    kw.setdefault("seeds", (1, 2))
    return Scenario(**kw)


class TestPlanning:
    def test_idle_marks_with_two_cores(self):
        k, viable = plan_marking_cores(XEON, 1, 6)
        assert (k, viable) == (2, True)

    def test_single_busy_core_needs_three(self):
        # one guard level: a lone transient wakeup must not reach the
        # marking frequency
        k, viable = plan_marking_cores(XEON, 2, 5)
        assert (k, viable) == (3, True)

    def test_two_busy_cores(self):
        k, viable = plan_marking_cores(XEON, 3, 4)
        assert (k, viable) == (2, True)

    def test_saturated_band_not_viable(self):
        k, viable = plan_marking_cores(XEON, 5, 2)
        assert viable is False

    def test_threshold_midpoints(self):
        assert plan_threshold(XEON, 1_000, 1, 2) == 2_850_000.0
        assert plan_threshold(XEON, 1_000, 3, 3) == 2_400_000.0

    def test_budget_enforced(self):
        with pytest.raises(ConfigError):
            scenario(constant_cores=5, tx_cores=3)


class TestCountFrequencyChanges:
    def test_constant_trace_empty(self):
        tr = FrequencyTrace([(0, 3 * GHZ)], 1_000_000)
        assert count_frequency_changes(tr) == {}

    def test_single_dip(self):
        tr = FrequencyTrace([(0, 3 * GHZ), (50_000, 2_700_000_000),
                             (60_000, 3 * GHZ)], 1_000_000)
        assert count_frequency_changes(tr) == {10: 1}

    def test_dip_through_two_levels_is_one_interval(self):
        tr = FrequencyTrace([(0, 3 * GHZ), (10_000, 2_700_000_000),
                             (12_000, 2_100_000_000), (14_000, 3 * GHZ)],
                            1_000_000)
        assert count_frequency_changes(tr) == {4: 1}

    def test_trailing_dip_counted(self):
        tr = FrequencyTrace([(0, 3 * GHZ), (997_000, 2_700_000_000)], 1_000_000)
        assert count_frequency_changes(tr) == {3: 1}


class TestNoiseHistogram:
    def test_mean_rates_match_the_event_table(self):
        totals = []
        ones = []
        for seed in range(1, 21):
            profile = NoiseProfile("idle-background", seed=seed)
            hist = noise_change_histogram(XEON, profile, 1_000_000)
            totals.append(sum(hist.values()))
            ones.append(hist.get(1, 0))
        mean_total = sum(totals) / len(totals)
        mean_ones = sum(ones) / len(ones)
        assert 118 * 0.9 <= mean_total <= 118 * 1.1
        assert 109 * 0.9 <= mean_ones <= 109 * 1.1

    def test_durations_preserved(self):
        profile = NoiseProfile("idle-background", seed=3,
                               event_rates={4: 30.0})
        hist = noise_change_histogram(XEON, profile, 1_000_000)
        assert set(hist) == {4}

    def test_probe_sits_at_the_top_level_bound(self):
        assert probe_core_count(XEON) == 2


class TestRunScenario:
    def test_single_element_sweep_equals_run(self):
        s = scenario(seeds=(3,), idle_noise=False, jitter_sigma=0.0,
                     preempt_tx_rate=0.0, preempt_rx_rate=0.0)
        a = run_scenario(s)
        b = sweep(s, [7_000])
        assert [dataclasses.asdict(r) for r in a.rows] == \
               [dataclasses.asdict(r) for r in b.rows]

    def test_turbo_off_breaks_the_channel(self):
        s = scenario(countermeasure="turbo-off", seeds=(1,), max_retries=2)
        r = run_one(s, 7_000, 1)
        assert not r.success

    def test_cstate_restriction_breaks_the_channel(self):
        s = scenario(countermeasure="cstate-restricted", seeds=(1,), max_retries=2)
        r = run_one(s, 7_000, 1)
        assert not r.success

    def test_artificial_noise_degrades_or_kills(self):
        s = scenario(countermeasure="artificial-noise", countermeasure_cores=2,
                     seeds=(1,), max_retries=6, payload_bytes=16)
        r = run_one(s, 7_000, 1)
        assert (not r.success) or r.goodput_bps < 5.0

    def test_report_aggregates(self):
        s = scenario(seeds=(1, 2, 3), idle_noise=False, jitter_sigma=0.0,
                     preempt_tx_rate=0.0, preempt_rx_rate=0.0)
        rep = run_scenario(s)
        assert len(rep.rows) == 3
        g = rep.mean_goodput(7_000)
        assert min(r.goodput_bps for r in rep.rows) <= g <= \
            max(r.goodput_bps for r in rep.rows)
        assert rep.success_rate(7_000) == 1.0


class TestCsv:
    def test_empty_report_header_only(self, tmp_path):
        from turbochannel.harness import ScenarioReport
        out = emit_csv(ScenarioReport("empty"), tmp_path / "r.csv")
        lines = out.read_text().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("scenario,bit_time_ms,seed")

    def test_rows_plus_one_aggregate_per_bit_time(self, tmp_path):
        s = scenario(seeds=tuple(range(1, 11)), idle_noise=False,
                     jitter_sigma=0.0, preempt_tx_rate=0.0, preempt_rx_rate=0.0)
        rep = run_scenario(s)
        out = emit_csv(rep, tmp_path / "r.csv")
        rows = parse_csv(out)
        data = [r for r in rows if r["aggregate"] == ""]
        aggs = [r for r in rows if r["aggregate"] == "mean"]
        assert len(data) == 10
        assert len(aggs) == 1

    def test_round_trip_values(self, tmp_path):
        s = scenario(seeds=(1, 2), idle_noise=False, jitter_sigma=0.0,
                     preempt_tx_rate=0.0, preempt_rx_rate=0.0)
        rep = run_scenario(s)
        out = emit_csv(rep, tmp_path / "r.csv")
        rows = [r for r in parse_csv(out) if r["aggregate"] == ""]
        for parsed, orig in zip(rows, rep.rows):
            assert float(parsed["goodput_bps"]) == orig.goodput_bps
            assert int(parsed["seed"]) == orig.seed

    def test_deterministic_repeat(self, tmp_path):
        s = scenario(seeds=(1, 2))
        a = emit_csv(run_scenario(s), tmp_path / "a.csv").read_bytes()
        b = emit_csv(run_scenario(s), tmp_path / "b.csv").read_bytes()
        assert a == b


class TestRecorder:
    def test_quiet_channel_records_clean_packets(self):
        s = scenario(idle_noise=False, jitter_sigma=0.0,
                     preempt_tx_rate=0.0, preempt_rx_rate=0.0)
        outcomes = record_packet_outcomes(s, 5_000, seed=1, packet_count=12)
        assert len(outcomes) == 12
        assert all(o.corrupted_byte_count == 0 for o in outcomes)

    def test_noisy_channel_shows_correctable_and_broken(self):
        s = scenario(seeds=(1,))
        outcomes = []
        for seed in range(1, 4):
            outcomes += record_packet_outcomes(s, 5_000, seed=seed,
                                               packet_count=40)
        broken = [o for o in outcomes if not o.clean]
        assert broken, "expected at least some corrupted packets at 5 ms/bit"
        from turbochannel.fec import FecModel
        fixable = [o for o in broken if rs_correctable(o, FecModel())]
        assert len(fixable) >= 1


class TestConfigFiles:
    CONFIG = """
# demo scenario
name = demo
policy = xeon-silver-4108
bit_times_ms = 6, 8
payload_bytes = 24
seeds = 1..3
constant_cores = 1
tx_cores = auto
countermeasure = none
max_retries = 5
"""

    def test_parse_basics(self):
        s = parse_scenario_config(self.CONFIG)
        assert s.name == "demo"
        assert s.bit_times_us == (6_000, 8_000)
        assert s.seeds == (1, 2, 3)
        assert s.constant_cores == 1
        assert s.max_retries == 5
        assert s.planned_tx_cores() == 3

    def test_inline_policy(self):
        text = """
name = inline
policy.levels = 2:3.0, 4:2.7, 8:2.1
policy.core_count = 8
policy.base_ghz = 1.8
bit_time_ms = 7
"""
        s = parse_scenario_config(text)
        assert s.policy.levels == ((2, 3 * GHZ), (4, 2_700_000_000),
                                   (8, 2_100_000_000))
        assert turbo_frequency(s.policy, 5) == 2_100_000_000

    def test_unknown_policy_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario_config("policy = pentium-99\nbit_time_ms = 7")

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "demo.cfg"
        p.write_text(self.CONFIG)
        s = load_scenario(p)
        assert s.name == "demo"

    def test_garbage_line_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario_config("this is not a key value line")
