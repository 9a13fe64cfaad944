"""Discrete-event simulation of the emergency-department workflow.

Baseline: triage -> physician queue -> PIA -> (confirmatory test -> result
review) -> departure. In ``trinet`` mode, patients flagged by the screen at
triage have the test started when triage completes, so part or all of the
turnaround overlaps the wait for the physician.

Both modes draw every per-patient quantity from the same seeded stream, so
runs with the same seed are paired patient by patient. Result review does
not occupy a physician, which keeps the physician schedule identical
across modes.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .metrics import benchmark

MODES = ("baseline", "trinet")
DOWNSTREAM_TEST = {"pneumonia": "chest x-ray", "uti": "urinalysis"}


@dataclass(frozen=True)
class Duration:
    """Lognormal duration in hours, parameterized by its mean and log-space sigma."""

    mean: float
    sigma: float = 0.0

    def __post_init__(self):
        if self.mean <= 0 or self.sigma < 0:
            raise ValueError(f"duration needs mean > 0 and sigma >= 0, got {self}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        mu = math.log(self.mean) - 0.5 * self.sigma**2
        return rng.lognormal(mu, self.sigma, size)


def physician_false_suspicion_rate(condition: str, prevalence: float) -> float:
    """Fraction of true negatives a physician sends for testing, implied by the
    published physician PPV and TPR at the given prevalence."""
    ref = benchmark(condition, "physician")
    tp = ref.tpr * prevalence
    return tp * (1.0 - ref.ppv) / ref.ppv / (1.0 - prevalence)


@dataclass(frozen=True)
class SimConfig:
    condition: str = "pneumonia"
    horizon: float = 24.0 * 90
    # calibrated once so the default baseline p90 LOS is about 8.3 h; the
    # PIA duration covers assessment plus in-department treatment
    arrival_rate: float = 5.0
    physicians: int = 24
    triage_duration: Duration = Duration(0.2, 0.4)
    pia_duration: Duration = Duration(3.5, 0.95)
    result_review_duration: Duration = Duration(0.3, 0.5)
    test_turnaround: dict = field(
        default_factory=lambda: {"pneumonia": Duration(1.5, 0.5), "uti": Duration(2.0, 0.5)}
    )
    condition_prevalence: float = 0.06
    screen_tpr: float = 0.13
    screen_fpr: float = 0.03
    false_suspicion_rate: float | None = None  # None: physician-benchmark implied
    seed: int = 0

    def __post_init__(self):
        if self.condition not in DOWNSTREAM_TEST:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.horizon <= 0 or self.arrival_rate <= 0:
            raise ValueError("horizon and arrival_rate must be positive")
        if self.physicians < 1:
            raise ValueError("need at least one physician")
        for name in ("condition_prevalence", "screen_tpr", "screen_fpr"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.false_suspicion_rate is not None and not 0 <= self.false_suspicion_rate <= 1:
            raise ValueError("false_suspicion_rate must be in [0, 1]")
        if self.condition not in self.test_turnaround:
            raise ValueError(f"no test turnaround for {self.condition}")

    @classmethod
    def for_condition(cls, condition: str, **overrides) -> SimConfig:
        """Defaults with screening rates taken from the published TriNet results."""
        ref = benchmark(condition, "trinet")
        base = dict(condition=condition, screen_tpr=ref.tpr, screen_fpr=round(1.0 - ref.tnr, 10))
        base.update(overrides)
        return cls(**base)

    @property
    def turnaround(self) -> Duration:
        return self.test_turnaround[self.condition]

    @property
    def suspicion_rate(self) -> float:
        if self.false_suspicion_rate is not None:
            return self.false_suspicion_rate
        return physician_false_suspicion_rate(self.condition, self.condition_prevalence)

    # flat key=value form -------------------------------------------------

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Duration):
                out[f"{f.name}.mean"], out[f"{f.name}.sigma"] = repr(v.mean), repr(v.sigma)
            elif f.name == "test_turnaround":
                for cond, dur in sorted(v.items()):
                    out[f"{f.name}.{cond}.mean"] = repr(dur.mean)
                    out[f"{f.name}.{cond}.sigma"] = repr(dur.sigma)
            else:
                out[f.name] = "none" if v is None else str(v) if isinstance(v, str) else repr(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str], base: SimConfig | None = None) -> SimConfig:
        base = base or cls()
        kw = {}
        durations = {f.name: getattr(base, f.name) for f in fields(base) if isinstance(getattr(base, f.name), Duration)}
        turnaround = dict(base.test_turnaround)
        known = {f.name: f for f in fields(base)}
        for key, raw in flat.items():
            parts = key.split(".")
            if parts[0] in durations and len(parts) == 2 and parts[1] in ("mean", "sigma"):
                durations[parts[0]] = replace(durations[parts[0]], **{parts[1]: float(raw)})
            elif parts[0] == "test_turnaround" and len(parts) == 3 and parts[2] in ("mean", "sigma"):
                cur = turnaround.get(parts[1], Duration(1.0))
                turnaround[parts[1]] = replace(cur, **{parts[2]: float(raw)})
            elif len(parts) == 1 and key in known:
                kw[key] = _parse_scalar(key, raw, getattr(base, key))
            else:
                raise ValueError(f"unknown simulation setting {key!r}")
        return replace(base, **durations, test_turnaround=turnaround, **kw)


def _parse_scalar(key, raw: str, current):
    raw = raw.strip()
    if key == "false_suspicion_rate":
        return None if raw.lower() == "none" else float(raw)
    if key == "condition":
        return raw
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    return float(raw)


def read_flat_config(path) -> dict[str, str]:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


@dataclass(frozen=True)
class PatientDraw:
    """Everything random about one patient, shared by both modes."""

    arrival: float
    triage: float
    pia: float
    review: float
    turnaround: float
    truly_positive: bool
    screen_u: float
    suspicion_u: float


def draw_patients(config: SimConfig) -> list[PatientDraw]:
    rng = np.random.default_rng(config.seed)
    times, t = [], 0.0
    while True:
        t += rng.exponential(1.0 / config.arrival_rate)
        if t >= config.horizon:
            break
        times.append(t)
    n = len(times)
    triage = config.triage_duration.sample(rng, n).tolist()
    pia = config.pia_duration.sample(rng, n).tolist()
    review = config.result_review_duration.sample(rng, n).tolist()
    turnaround = config.turnaround.sample(rng, n).tolist()
    positive = (rng.random(n) < config.condition_prevalence).tolist()
    screen_u = rng.random(n).tolist()
    suspicion_u = rng.random(n).tolist()
    return [
        PatientDraw(times[i], triage[i], pia[i], review[i], turnaround[i],
                    positive[i], screen_u[i], suspicion_u[i])
        for i in range(n)
    ]


@dataclass
class PatientEpisode:
    patient: int
    arrival: float
    triage_done: float
    pia_start: float
    pia_done: float
    test_ordered: float | None
    test_done: float | None
    departure: float
    truly_positive: bool
    screened_positive: bool
    directive: bool = False  # test ordered at triage by the screen

    @property
    def length_of_stay(self) -> float:
        return self.departure - self.arrival

    @property
    def tested(self) -> bool:
        return self.test_ordered is not None


@dataclass(frozen=True)
class SimResult:
    mode: str
    episodes: int
    mean_los: float
    p90_los: float
    tests_ordered: int
    unnecessary_tests: int
    directive_tests: int
    directive_unnecessary_tests: int


_ARRIVE, _TRIAGED, _PIA_DONE = 0, 1, 2


def simulate(
    config: SimConfig,
    mode: str,
    patients: Sequence[PatientDraw] | None = None,
    screen: Callable[[int, PatientDraw], bool] | None = None,
) -> tuple[SimResult, list[PatientEpisode]]:
    """Run one mode. ``screen`` overrides the Bernoulli screen with a per-patient decision."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if patients is None:
        patients = draw_patients(config)
    suspicion = config.suspicion_rate

    def screened(i, p):
        if screen is not None:
            return bool(screen(i, p))
        return p.screen_u < (config.screen_tpr if p.truly_positive else config.screen_fpr)

    events = [(p.arrival, _ARRIVE, i) for i, p in enumerate(patients)]
    heapq.heapify(events)
    free = config.physicians
    queue: deque[int] = deque()
    ep = [dict() for _ in patients]

    def start_pia(i, now):
        ep[i]["pia_start"] = now
        heapq.heappush(events, (now + patients[i].pia, _PIA_DONE, i))

    while events:
        now, kind, i = heapq.heappop(events)
        p = patients[i]
        if kind == _ARRIVE:
            ep[i]["arrival"] = now
            heapq.heappush(events, (now + p.triage, _TRIAGED, i))
        elif kind == _TRIAGED:
            ep[i]["triage_done"] = now
            flag = screened(i, p)
            ep[i]["screened_positive"] = flag
            if mode == "trinet" and flag:
                ep[i]["directive"] = True
                ep[i]["test_ordered"] = now
                ep[i]["test_done"] = now + p.turnaround
            if free:
                free -= 1
                start_pia(i, now)
            else:
                queue.append(i)
        else:
            ep[i]["pia_done"] = now
            if queue:
                start_pia(queue.popleft(), now)
            else:
                free += 1
            if "test_ordered" not in ep[i] and (p.truly_positive or p.suspicion_u < suspicion):
                ep[i]["test_ordered"] = now
                ep[i]["test_done"] = now + p.turnaround
            if "test_ordered" in ep[i]:
                ep[i]["departure"] = max(now, ep[i]["test_done"]) + p.review
            else:
                ep[i]["departure"] = now

    episodes = [
        PatientEpisode(
            patient=i,
            arrival=e["arrival"],
            triage_done=e["triage_done"],
            pia_start=e["pia_start"],
            pia_done=e["pia_done"],
            test_ordered=e.get("test_ordered"),
            test_done=e.get("test_done"),
            departure=e["departure"],
            truly_positive=p.truly_positive,
            screened_positive=e["screened_positive"],
            directive=e.get("directive", False),
        )
        for i, (e, p) in enumerate(zip(ep, patients))
    ]
    return summarize(mode, episodes), episodes


def summarize(mode: str, episodes: Sequence[PatientEpisode]) -> SimResult:
    los = np.array([e.length_of_stay for e in episodes])
    tested = [e for e in episodes if e.tested]
    directive = [e for e in tested if e.directive]
    return SimResult(
        mode=mode,
        episodes=len(episodes),
        mean_los=float(los.mean()) if los.size else 0.0,
        p90_los=float(np.percentile(los, 90)) if los.size else 0.0,
        tests_ordered=len(tested),
        unnecessary_tests=sum(not e.truly_positive for e in tested),
        directive_tests=len(directive),
        directive_unnecessary_tests=sum(not e.truly_positive for e in directive),
    )


@dataclass(frozen=True)
class Comparison:
    baseline: SimResult
    trinet: SimResult
    los_deltas: tuple[float, ...]  # baseline LOS minus trinet LOS, per patient

    @property
    def mean_los_delta(self) -> float:
        return self.baseline.mean_los - self.trinet.mean_los

    @property
    def p90_los_delta(self) -> float:
        return self.baseline.p90_los - self.trinet.p90_los

    @property
    def extra_tests(self) -> int:
        return self.trinet.tests_ordered - self.baseline.tests_ordered

    @property
    def extra_unnecessary_tests(self) -> int:
        return self.trinet.unnecessary_tests - self.baseline.unnecessary_tests


def compare(config: SimConfig, screen=None) -> tuple[Comparison, list[PatientEpisode], list[PatientEpisode]]:
    """Run both modes on the same patient stream."""
    patients = draw_patients(config)
    base, base_eps = simulate(config, "baseline", patients, screen)
    tri, tri_eps = simulate(config, "trinet", patients, screen)
    deltas = tuple(b.length_of_stay - t.length_of_stay for b, t in zip(base_eps, tri_eps))
    return Comparison(base, tri, deltas), base_eps, tri_eps
