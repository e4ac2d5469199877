"""System dynamics of the edge deployment: cellular bands, diurnal
bandwidth traces, sensor failures, FL round timing, and the multi-process
inference pipeline."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConnectivityError, DataError, ParameterError
from .report import write_csv

DAY_S = 86400.0


@dataclass(frozen=True)
class Band:
    name: str
    uplink_mbps: float
    downlink_mbps: float

    def __post_init__(self):
        if self.uplink_mbps <= 0 or self.downlink_mbps <= 0:
            raise ParameterError(f"band {self.name} needs positive rates")


# nominal 4G bands; the B3 downlink rate is not pinned anywhere and is an
# explicit configuration choice here
DEFAULT_BANDS = (
    Band("B3", uplink_mbps=21.0, downlink_mbps=18.0),
    Band("B40", uplink_mbps=6.0, downlink_mbps=20.0),
)


def select_band(demand, bands):
    """Pick the band with the best nominal rate in the demanded direction;
    ties go to the lexicographically smallest name."""
    if not bands:
        raise DataError("no bands available")
    if demand == "upload":
        key = lambda b: (-b.uplink_mbps, b.name)
    elif demand == "download":
        key = lambda b: (-b.downlink_mbps, b.name)
    else:
        raise ParameterError(f"demand must be 'upload' or 'download', got {demand!r}")
    return min(bands, key=key)


def transmission_time(payload_bytes, effective_rate_mbps) -> float:
    """Seconds to move payload_bytes at the given rate (1 Mbps = 1e6 bit/s)."""
    if payload_bytes < 0:
        raise ParameterError("payload must be nonnegative")
    if effective_rate_mbps <= 0:
        raise ConnectivityError("zero effective bandwidth; retry later")
    return payload_bytes * 8.0 / (effective_rate_mbps * 1e6)


@dataclass
class BandwidthTrace:
    """Multiplicative bandwidth factor over simulated time.

    factor(t) = clamp(base(t) - mealtime dips + AR(1) noise, 0, 1), with a
    higher base at night than during the day and Gaussian dips around
    12:00, 17:00 and 19:00. Values are precomputed on a fixed grid so the
    trace is a pure function of (parameters, seed).
    """

    horizon_s: float
    seed: int = 0
    resolution_s: float = 60.0
    day_base: float = 0.75
    night_base: float = 0.9
    day_start_s: float = 7 * 3600.0
    day_end_s: float = 19 * 3600.0
    dip_centers_s: tuple = (12 * 3600.0, 17 * 3600.0, 19 * 3600.0)
    dip_depth: float = 0.3
    dip_sigma_s: float = 1800.0
    noise_amplitude: float = 0.05
    noise_phi: float = 0.9
    _factors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = max(1, int(np.ceil(self.horizon_s / self.resolution_s)))
        t = np.arange(n) * self.resolution_s
        tod = t % DAY_S
        base = np.where(
            (tod >= self.day_start_s) & (tod < self.day_end_s), self.day_base, self.night_base
        )
        dips = np.zeros(n)
        for c in self.dip_centers_s:
            delta = np.abs(tod - c)
            delta = np.minimum(delta, DAY_S - delta)  # wrap around midnight
            dips += self.dip_depth * np.exp(-0.5 * (delta / self.dip_sigma_s) ** 2)
        rng = np.random.default_rng(self.seed)
        noise = np.empty(n)
        noise[0] = rng.normal(0.0, self.noise_amplitude)
        innov_std = self.noise_amplitude * np.sqrt(1.0 - self.noise_phi**2)
        eps = rng.normal(0.0, innov_std, size=n)
        for i in range(1, n):
            noise[i] = self.noise_phi * noise[i - 1] + eps[i]
        self._factors = np.clip(base - dips + noise, 0.0, 1.0)

    def factor(self, t: float) -> float:
        i = int(t // self.resolution_s)
        return float(self._factors[min(max(i, 0), len(self._factors) - 1)])

    def to_csv(self, path):
        rows = [(i * self.resolution_s, f) for i, f in enumerate(self._factors)]
        write_csv(path, ["t_s", "value"], rows)


@dataclass
class RoundResult:
    round_s: float
    per_node: dict  # node_id -> {"compute_s", "upload_s", "total_s"}
    dropped: list
    broadcast_s: float


def simulate_round(node_compute_s, trace: BandwidthTrace, payload_bytes, t0=0.0,
                   bands=DEFAULT_BANDS, aggregation_s=1.0) -> RoundResult:
    """One global FL round starting at simulated time t0.

    Each node computes, then uploads the payload on the best upload band at
    the round-start trace factor; the round lasts until the slowest node
    finishes, plus server aggregation and the model broadcast. The trace
    factor is sampled once at t0, which keeps round time monotone in every
    node's compute time and in the payload size. Nodes seeing zero
    bandwidth are dropped and the round completes without them.
    """
    f = trace.factor(t0)
    up = select_band("upload", bands)
    down = select_band("download", bands)
    per_node, dropped = {}, []
    slowest = 0.0
    for node_id in sorted(node_compute_s):
        compute = node_compute_s[node_id]
        if compute < 0:
            raise ParameterError(f"negative compute time for {node_id}")
        try:
            upload_s = transmission_time(payload_bytes, up.uplink_mbps * f)
        except ConnectivityError:
            dropped.append(node_id)
            per_node[node_id] = {"compute_s": compute, "upload_s": None, "total_s": None}
            continue
        total = compute + upload_s
        per_node[node_id] = {"compute_s": compute, "upload_s": upload_s, "total_s": total}
        slowest = max(slowest, total)
    if len(dropped) < len(node_compute_s):
        broadcast_s = transmission_time(payload_bytes, down.downlink_mbps * f)
    else:
        broadcast_s = 0.0
    return RoundResult(slowest + aggregation_s + broadcast_s, per_node, dropped, broadcast_s)


@dataclass
class SensorFailureProcess:
    """Poisson sensor outages: per-sensor failure rate in events/day and a
    uniform repair delay. The next failure is scheduled from repair time,
    so outages of one sensor never overlap."""

    rates_per_day: dict  # sensor -> rate in [2, 6]
    repair_range_s: tuple = (60.0, 600.0)

    def __post_init__(self):
        for sensor, rate in self.rates_per_day.items():
            if not 2.0 <= rate <= 6.0:
                raise ParameterError(f"{sensor} rate {rate} outside [2, 6] per day")

    @classmethod
    def draw(cls, sensors, rng):
        return cls({s: float(rng.uniform(2.0, 6.0)) for s in sensors})


def failure_schedule(process: SensorFailureProcess, days, rng):
    """Outage intervals [(sensor, down_at, up_at), ...] over `days` days,
    sorted by (down_at, sensor), clipped to the horizon."""
    if days < 1:
        raise ParameterError("days must be >= 1")
    horizon = days * DAY_S
    events = []
    for sensor in sorted(process.rates_per_day):
        rate = process.rates_per_day[sensor]
        lo, hi = process.repair_range_s
        t = 0.0
        while True:
            t += rng.exponential(DAY_S / rate)
            if t >= horizon:
                break
            up = min(t + rng.uniform(lo, hi), horizon)
            events.append((sensor, t, up))
            t = up
    return sorted(events, key=lambda e: (e[1], e[0]))


def failures_to_csv(events, path):
    write_csv(path, ["sensor", "down_s", "up_s"], events)


def modalities_down(events, start, end):
    """Sensors with an outage overlapping [start, end)."""
    return {s for (s, down, up) in events if down < end and up > start}


@dataclass
class PipelineSpec:
    collect_s: float
    preprocess_s: dict  # modality -> seconds; pool runs them in parallel
    infer_s: float
    mode: str = "pipelined"

    def __post_init__(self):
        if self.collect_s <= 0 or self.infer_s <= 0 or not self.preprocess_s:
            raise ParameterError("stage durations must be positive")
        if any(v <= 0 for v in self.preprocess_s.values()):
            raise ParameterError("stage durations must be positive")
        if self.mode not in ("sequential", "pipelined"):
            raise ParameterError(f"unknown mode {self.mode!r}")


def pipeline_throughput(spec: PipelineSpec) -> float:
    """Steady-state frames per second.

    Preprocessing of the modalities runs in a parallel pool in both modes,
    so its stage time is the slowest modality. Sequential mode pays
    collect + preprocess + infer per frame; pipelined mode overlaps the
    three stages and is bounded by the slowest one.
    """
    pre = max(spec.preprocess_s.values())
    if spec.mode == "sequential":
        return 1.0 / (spec.collect_s + pre + spec.infer_s)
    return 1.0 / max(spec.collect_s, pre, spec.infer_s)
