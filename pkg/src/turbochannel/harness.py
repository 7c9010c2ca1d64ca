"""Experiment harness: named scenarios, sweeps, countermeasures, CSV output.

A scenario composes a policy, background load, the modem and the link into
seeded end-to-end transfers. Everything is deterministic for a fixed config:
rerunning a scenario produces byte-identical CSV.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from . import fec as fec_mod
from .link import (FRAME_BITS, PAYLOAD_BYTES, LinkConfig, TransferFailed,
                   bytes_of_bits, encode_frame, pad_payload, run_transfer)
from .modem import (ModemConfig, StreamAssembler, classify_array,
                    default_threshold, modulate)
from .phy import SimulatedChannel
from .turbo import (ActivityTrace, DomainError, FrequencyTrace, NoiseProfile,
                    TurboPolicy, apply_policy, builtin_policy,
                    builtin_policy_names, generate_noise, turbo_frequency)

COUNTERMEASURES = ("none", "turbo-off", "cstate-restricted", "artificial-noise")


class ConfigError(DomainError):
    pass


# -- planning ------------------------------------------------------------------

def plan_marking_cores(policy: TurboPolicy, steady_active: int,
                       available: int) -> tuple[int, bool]:
    """Cores to wake per mark so the drop is distinguishable from noise.

    ``steady_active`` is the listener's core plus any constant load. The
    preferred choice leaves one guard level between the marking frequency and
    whatever a single transient wakeup can cause, so stray background events
    stay on the far side of the threshold. Returns (cores, viable); when no
    core count moves the frequency at all the channel is saturated and the
    count is only a placeholder.
    """
    base = turbo_frequency(policy, steady_active)
    headroom = policy.core_count - steady_active
    one_more = turbo_frequency(policy, min(steady_active + 1, policy.core_count))
    limit = min(available, headroom)
    for k in range(1, limit + 1):
        if turbo_frequency(policy, steady_active + k) < one_more:
            return k, True
    for k in range(1, limit + 1):
        if turbo_frequency(policy, steady_active + k) < base:
            return k, True
    return max(1, min(2, limit if limit > 0 else 1)), False


def plan_threshold(policy: TurboPolicy, window_us: int, steady_active: int,
                   marking_cores: int, ops_per_cycle: float = 1.0) -> float:
    """Classification threshold between the steady and marking levels."""
    idle_idx = policy.level_index_for_count(steady_active)
    sig_idx = policy.level_index_for_count(
        min(steady_active + marking_cores, policy.core_count))
    if sig_idx == idle_idx:
        # saturated channel: split against the next level up so everything
        # the receiver sees classifies one way and the transfer fails cleanly
        sig_idx = idle_idx
        idle_idx = max(0, idle_idx - 1)
        if sig_idx == idle_idx:
            freq = policy.frequency_of_level(idle_idx)
            return (freq + policy.base_frequency_hz) / 2 * window_us * ops_per_cycle / 1e6
    return default_threshold(policy, window_us, idle_idx, sig_idx, ops_per_cycle)


# -- scenario ------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str
    policy: TurboPolicy
    bit_times_us: tuple[int, ...]
    payload_bytes: int = 80
    seeds: tuple[int, ...] = tuple(range(1, 11))
    constant_cores: int = 0
    tx_cores: int | None = None            # None: planned from the load
    ack_cores: int | None = None
    countermeasure: str = "none"
    countermeasure_cores: int = 2
    record_packets: int = 0                # also record a one-way outcome trace
    idle_noise: bool = True
    idle_event_rates: Mapping[int, float] | None = None
    oversampling: int = 8
    glitch_max: int | None = None   # None: modem default
    max_retries: int = 10
    ops_per_cycle: float = 1.0
    jitter_sigma: float = 0.005
    # rescheduling pressure on the covert processes: a small floor plus a
    # per-busy-core term (a loaded box preempts its tenants more), or
    # explicit rates (VM-to-VM style runs)
    preempt_tx_rate: float | None = None
    preempt_rx_rate: float | None = None
    preempt_base_tx: float = 0.03
    preempt_base_rx: float = 0.10
    preempt_per_load_core: float = 0.20
    preempt_min_us: int = 1_000
    preempt_max_us: int | None = None       # None: 10 ms + 15 ms per busy core
    preempt_max_per_load_us: int = 15_000

    def __post_init__(self):
        if not self.bit_times_us:
            raise ConfigError("at least one bit time is required")
        if self.countermeasure not in COUNTERMEASURES:
            raise ConfigError(f"unknown countermeasure {self.countermeasure!r}")
        if self.payload_bytes < 1:
            raise ConfigError("payload_bytes must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        tx = self.planned_tx_cores()
        noise_cores = self.constant_cores
        if self.countermeasure == "artificial-noise":
            noise_cores += self.countermeasure_cores
        if tx + 1 + noise_cores > self.policy.core_count:
            raise ConfigError(
                f"core budget exceeded: tx={tx} + receiver + {noise_cores} "
                f"background cores > {self.policy.core_count}")

    def planned_tx_cores(self) -> int:
        if self.tx_cores is not None:
            return self.tx_cores
        extra = self.countermeasure_cores if self.countermeasure == "artificial-noise" else 0
        available = self.policy.core_count - 1 - self.constant_cores - extra - 1
        k, _ = plan_marking_cores(self.policy, 1 + self.constant_cores,
                                  max(1, available))
        return k

    def planned_ack_cores(self, tx: int) -> int:
        if self.ack_cores is not None:
            return self.ack_cores
        cap = 1 + max(0, tx - 1)  # listener's own core plus idle helpers
        k, _ = plan_marking_cores(self.policy, 1 + self.constant_cores, cap)
        return min(k, cap)

    def preempt_rates(self) -> tuple[float, float]:
        scale = self.preempt_per_load_core * self.constant_cores
        tx = self.preempt_tx_rate if self.preempt_tx_rate is not None \
            else self.preempt_base_tx + scale
        rx = self.preempt_rx_rate if self.preempt_rx_rate is not None \
            else self.preempt_base_rx + scale
        return tx, rx

    def preempt_duration_bounds(self) -> tuple[int, int]:
        # suspensions stretch on a busier box: the preempted process waits
        # behind more runnable work before it is scheduled again
        hi = self.preempt_max_us if self.preempt_max_us is not None \
            else 10_000 + self.preempt_max_per_load_us * self.constant_cores
        return self.preempt_min_us, hi


@dataclass
class RunResult:
    bit_time_us: int
    seed: int
    goodput_bps: float
    retransmissions_per_packet: float
    success: bool
    wall_time_us: int
    packets_sent: int
    freq_changes: dict[int, int] = field(default_factory=dict)


@dataclass
class ScenarioReport:
    scenario: str
    rows: list[RunResult] = field(default_factory=list)

    def rows_for(self, bit_time_us: int) -> list[RunResult]:
        return [r for r in self.rows if r.bit_time_us == bit_time_us]

    def bit_times(self) -> list[int]:
        seen = []
        for r in self.rows:
            if r.bit_time_us not in seen:
                seen.append(r.bit_time_us)
        return seen

    def mean_goodput(self, bit_time_us: int) -> float:
        rows = self.rows_for(bit_time_us)
        return sum(r.goodput_bps for r in rows) / len(rows)

    def mean_retransmissions(self, bit_time_us: int) -> float:
        rows = self.rows_for(bit_time_us)
        return sum(r.retransmissions_per_packet for r in rows) / len(rows)

    def success_rate(self, bit_time_us: int) -> float:
        rows = self.rows_for(bit_time_us)
        return sum(1 for r in rows if r.success) / len(rows)

    def best_mean_goodput(self) -> float:
        return max(self.mean_goodput(bt) for bt in self.bit_times())


def _scenario_payload(size: int, seed: int) -> bytes:
    rng = random.Random(f"payload:{seed}:{size}")
    return pad_payload(rng.randbytes(size))


def _estimate_horizon(payload_len: int, cfg: LinkConfig) -> int:
    frames = payload_len // PAYLOAD_BYTES
    attempts = (cfg.max_retries if cfg.max_retries is not None else 50) + 1
    return frames * attempts * cfg.timeout_us + 3 * cfg.timeout_us + 1_000_000


def build_simulation(s: Scenario, bit_time_us: int, seed: int,
                     horizon_us: int | None = None
                     ) -> tuple[SimulatedChannel, LinkConfig, ModemConfig, ModemConfig]:
    if bit_time_us % s.oversampling:
        raise ConfigError("bit_time_us must be divisible by the oversampling")
    link_cfg = LinkConfig(bit_time_us=bit_time_us, max_retries=s.max_retries)
    if horizon_us is None:
        horizon_us = _estimate_horizon(pad_len(s.payload_bytes), link_cfg)

    tx = s.planned_tx_cores()
    ack = s.planned_ack_cores(tx)
    window = bit_time_us // s.oversampling
    steady = 1 + s.constant_cores
    data_thr = plan_threshold(s.policy, window, steady, tx, s.ops_per_cycle)
    ack_thr = plan_threshold(s.policy, window, steady, ack, s.ops_per_cycle)
    data_cfg = ModemConfig(bit_time_us, data_thr, s.oversampling, s.glitch_max)
    ack_cfg = ModemConfig(bit_time_us, ack_thr, s.oversampling, s.glitch_max)

    noise: list[NoiseProfile] = []
    if s.constant_cores:
        noise.append(NoiseProfile("constant-load", seed=seed,
                                  constant_cores=s.constant_cores))
    if s.idle_noise:
        noise.append(NoiseProfile("idle-background", seed=seed,
                                  event_rates=s.idle_event_rates))
    if s.countermeasure == "artificial-noise":
        noise.append(NoiseProfile("custom", seed=seed + 7919,
                                  toggle_cores=s.countermeasure_cores))

    pinned = None
    if s.countermeasure == "turbo-off":
        pinned = s.policy.base_frequency_hz
    elif s.countermeasure == "cstate-restricted":
        pinned = s.policy.levels[-1][1]

    tx_rate, rx_rate = s.preempt_rates()
    pre_lo, pre_hi = s.preempt_duration_bounds()
    sim = SimulatedChannel(
        s.policy, horizon_us,
        tx_core_count=tx, ack_core_count=ack, noise=noise, seed=seed,
        ops_per_cycle=s.ops_per_cycle, jitter_sigma=s.jitter_sigma,
        sender_preempt_rate=tx_rate, receiver_preempt_rate=rx_rate,
        preempt_min_us=pre_lo, preempt_max_us=pre_hi,
        pinned_frequency_hz=pinned)
    return sim, link_cfg, data_cfg, ack_cfg


def pad_len(n: int) -> int:
    return len(pad_payload(bytes(n)))


def run_one(s: Scenario, bit_time_us: int, seed: int) -> RunResult:
    sim, link_cfg, data_cfg, ack_cfg = build_simulation(s, bit_time_us, seed)
    payload = _scenario_payload(s.payload_bytes, seed)
    try:
        stats, data = run_transfer(sim, payload, link_cfg, data_cfg, ack_cfg)
        success = data == payload
    except TransferFailed as tf:
        stats = tf.stats
        success = False
    hist = scenario_noise_histogram(s, seed)
    return RunResult(
        bit_time_us=bit_time_us,
        seed=seed,
        goodput_bps=round(stats.effective_goodput_bps, 6),
        retransmissions_per_packet=round(stats.retransmissions_per_packet, 6),
        success=success,
        wall_time_us=stats.wall_time_us,
        packets_sent=stats.packets_sent,
        freq_changes=hist,
    )


def run_scenario(s: Scenario) -> ScenarioReport:
    report = ScenarioReport(scenario=s.name)
    for bt in s.bit_times_us:
        for seed in s.seeds:
            report.rows.append(run_one(s, bt, seed))
    return report


def sweep(s: Scenario, bit_times_us: Sequence[int]) -> ScenarioReport:
    if not bit_times_us:
        raise ConfigError("sweep needs at least one bit time")
    return run_scenario(replace(s, bit_times_us=tuple(bit_times_us)))


# -- frequency-change accounting ------------------------------------------------

def count_frequency_changes(trace: FrequencyTrace) -> dict[int, int]:
    """Histogram of dips below the trace's top frequency, bucketed in ms."""
    top = trace.max_frequency()
    hist: dict[int, int] = {}
    dip_start = None
    segs = trace.segments
    for i, (start, freq) in enumerate(segs):
        end = segs[i + 1][0] if i + 1 < len(segs) else trace.horizon_us
        if freq < top and dip_start is None:
            dip_start = start
        elif freq == top and dip_start is not None:
            _bucket(hist, start - dip_start)
            dip_start = None
    if dip_start is not None:
        _bucket(hist, trace.horizon_us - dip_start)
    return hist


def _bucket(hist: dict[int, int], duration_us: int):
    ms = (2 * duration_us + 1000) // 2000  # round half up to ms resolution
    hist[ms] = hist.get(ms, 0) + 1


def probe_core_count(policy: TurboPolicy) -> int:
    """Steady probe load that parks the package exactly at the top level's
    bound, so one extra active core always drops the frequency."""
    return policy.levels[0][0]


def noise_change_histogram(policy: TurboPolicy, profile: NoiseProfile,
                           horizon_us: int) -> dict[int, int]:
    """Frequency-dip histogram a measurement probe would record for one
    expansion of the noise profile.

    Each noise-carrying core is evaluated against the steady probe
    separately: background wakeups are independent events, and counting them
    per source core keeps two cores' simultaneous wakeups from blurring into
    one long dip.
    """
    probe = probe_core_count(policy)
    pool = [c for c in range(probe, policy.core_count)]
    if not pool:
        raise ConfigError("policy has no spare cores for a noise histogram")
    noise = generate_noise(profile, horizon_us, policy.core_count, pool)
    hist: dict[int, int] = {}
    probe_ivs = {c: [(0, horizon_us)] for c in range(probe)}
    for core in pool:
        ivs = noise.intervals(core)
        if not ivs:
            continue
        merged = dict(probe_ivs)
        merged[core] = ivs
        trace = apply_policy(policy, ActivityTrace(policy.core_count, horizon_us, merged))
        for ms, n in count_frequency_changes(trace).items():
            hist[ms] = hist.get(ms, 0) + n
    return hist


def scenario_noise_histogram(s: Scenario, seed: int,
                             horizon_us: int = 1_000_000) -> dict[int, int]:
    if not s.idle_noise or s.countermeasure in ("turbo-off", "cstate-restricted"):
        return {}
    profile = NoiseProfile("idle-background", seed=seed,
                           event_rates=s.idle_event_rates)
    return noise_change_histogram(s.policy, profile, horizon_us)


# -- one-way packet recording (feeds the fec analysis) ---------------------------

def record_packet_outcomes(s: Scenario, bit_time_us: int, seed: int,
                           packet_count: int) -> list[fec_mod.PacketOutcome]:
    """Transmit packets one way with no acks and record what arrived.

    The receiver decodes best-effort at every sync it can find; received
    packet bytes are taken raw (checksum not enforced) so the analysis can
    count corrupted bytes per packet. Packets whose slot produced no sync
    are lost.
    """
    gap_bits = 4
    slot_bits = FRAME_BITS + gap_bits
    horizon = (packet_count + 2) * slot_bits * bit_time_us + 2_000_000
    sim, link_cfg, data_cfg, _ = build_simulation(s, bit_time_us, seed,
                                                  horizon_us=horizon)
    frames = []
    rng = random.Random(f"oneway:{seed}")
    t0 = bit_time_us
    for i in range(packet_count):
        payload = rng.randbytes(PAYLOAD_BYTES)
        bits = encode_frame(i % 256, payload)
        frames.append(bits)
        start = t0 + i * slot_bits * bit_time_us
        sched = modulate(bits, data_cfg, tx_cores=len(sim.sender.cores),
                         start_us=start)
        sim.transmit(sim.sender, sched, anchor_us=start)

    span_end = t0 + (packet_count * slot_bits + 8) * bit_time_us
    series = sim.sample_frequency(sim.receiver, data_cfg.window_us, (0, span_end))
    asm = StreamAssembler(data_cfg)
    asm.feed(classify_array(series, data_cfg.threshold), series.end_times())
    asm.end_segment(span_end)
    bits = "".join(asm.bits)
    times = asm.bit_times

    received: dict[int, bytes] = {}
    pos = 0
    sync = data_cfg.sync_word
    while True:
        idx = bits.find(sync, pos)
        if idx < 0 or idx + FRAME_BITS > len(bits):
            break
        slot = round((times[idx] - t0) / (slot_bits * bit_time_us))
        body = bits[idx + len(sync): idx + FRAME_BITS]
        if 0 <= slot < packet_count and slot not in received:
            received[slot] = bytes_of_bits(body)
            pos = idx + FRAME_BITS
        else:
            pos = idx + 1

    outcomes = []
    for i, frame_bits in enumerate(frames):
        sent = bytes_of_bits(frame_bits[len(sync):])
        outcomes.append(fec_mod.PacketOutcome(sent, received.get(i)))
    return outcomes


# -- CSV --------------------------------------------------------------------------

CSV_HEADER = "scenario,bit_time_ms,seed,goodput_bps,retransmissions_per_packet,success,aggregate"


def emit_csv(report: ScenarioReport, path: str | Path) -> Path:
    """Write per-run rows plus one mean row per bit time, deterministically."""
    lines = [CSV_HEADER]
    for bt in report.bit_times():
        rows = sorted(report.rows_for(bt), key=lambda r: r.seed)
        for r in rows:
            lines.append(",".join([
                report.scenario,
                _fmt_ms(bt),
                str(r.seed),
                f"{r.goodput_bps:.6f}",
                f"{r.retransmissions_per_packet:.6f}",
                "1" if r.success else "0",
                "",
            ]))
        lines.append(",".join([
            report.scenario,
            _fmt_ms(bt),
            "",
            f"{report.mean_goodput(bt):.6f}",
            f"{report.mean_retransmissions(bt):.6f}",
            f"{report.success_rate(bt):.6f}",
            "mean",
        ]))
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    return out


def _fmt_ms(bit_time_us: int) -> str:
    return f"{bit_time_us / 1000:.3f}"


def parse_csv(path: str | Path) -> list[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))
    return rows


# -- scenario config files ---------------------------------------------------------
#
# Plain key = value lines; '#' comments. See configs/ for examples.

def parse_scenario_config(text: str, name_hint: str = "scenario") -> Scenario:
    kv: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()

    policy = _parse_policy(kv)
    bit_times = _parse_bit_times(kv)
    seeds = _parse_seeds(kv.get("seeds", "1..10"))

    def geti(key, default):
        return int(kv[key]) if key in kv else default

    def getf(key, default):
        return float(kv[key]) if key in kv else default

    tx_cores = None
    if kv.get("tx_cores", "auto") != "auto":
        tx_cores = int(kv["tx_cores"])
    ack_cores = None
    if kv.get("ack_cores", "auto") != "auto":
        ack_cores = int(kv["ack_cores"])

    return Scenario(
        name=kv.get("name", name_hint),
        policy=policy,
        bit_times_us=bit_times,
        payload_bytes=geti("payload_bytes", 80),
        seeds=seeds,
        constant_cores=geti("constant_cores", 0),
        tx_cores=tx_cores,
        ack_cores=ack_cores,
        countermeasure=kv.get("countermeasure", "none"),
        countermeasure_cores=geti("countermeasure_cores", 2),
        record_packets=geti("record_packets", 0),
        idle_noise=kv.get("idle_noise", "on").lower() in ("on", "true", "1", "yes"),
        oversampling=geti("oversampling", 8),
        glitch_max=geti("glitch_max", None),
        max_retries=geti("max_retries", 10),
        jitter_sigma=getf("jitter_sigma", 0.005),
        preempt_tx_rate=getf("preempt_tx_rate", None),
        preempt_rx_rate=getf("preempt_rx_rate", None),
        preempt_per_load_core=getf("preempt_per_load_core", 0.20),
    )


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    return parse_scenario_config(p.read_text(), name_hint=p.stem)


def _parse_policy(kv: Mapping[str, str]) -> TurboPolicy:
    if "policy.levels" in kv:
        levels = []
        for part in kv["policy.levels"].split(","):
            bound, ghz = part.strip().split(":")
            levels.append((int(bound), int(float(ghz) * 1e9)))
        return TurboPolicy(
            core_count=int(kv.get("policy.core_count", levels[-1][0])),
            levels=tuple(levels),
            base_frequency_hz=int(float(kv.get("policy.base_ghz", "1.0")) * 1e9),
            pcu_period_us=int(kv.get("policy.pcu_period_us", "1000")),
            recovery_delay_us=int(kv.get("policy.recovery_delay_us", "0")),
        )
    name = kv.get("policy", "xeon-silver-4108")
    if name not in builtin_policy_names():
        raise ConfigError(f"unknown policy {name!r}")
    return builtin_policy(name)


def _parse_bit_times(kv: Mapping[str, str]) -> tuple[int, ...]:
    if "bit_times_ms" in kv:
        vals = [float(v) for v in kv["bit_times_ms"].split(",")]
    elif "bit_time_ms" in kv:
        vals = [float(kv["bit_time_ms"])]
    else:
        vals = [7.0]
    return tuple(int(v * 1000) for v in vals)


def _parse_seeds(text: str) -> tuple[int, ...]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in text.split(","))
