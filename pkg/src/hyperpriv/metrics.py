"""Evaluation statistics: accuracy, Harrell's C-index, Kaplan-Meier tables,
the two-sample log-rank test and median risk stratification.

Conventions, stated once: a pair is comparable for the C-index iff the
strictly earlier time is an observed event (equal-time pairs are never
comparable); KM rows exist at distinct event times only, with censored
observations shrinking risk sets; the log-rank variance is hypergeometric and
the 1-dof chi-square p-value is computed analytically via erfc.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class NoComparablePairsError(ValueError):
    """Censoring pattern admits no comparable pair; C-index undefined."""


class ZeroVarianceError(ValueError):
    """Log-rank variance is zero; the statistic is undefined."""


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have equal length")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(preds == labels))


def c_index(risks, times, events) -> float:
    """Harrell's concordance: higher risk should mean earlier event."""
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not (risks.shape == times.shape == events.shape) or risks.ndim != 1:
        raise ValueError("risks, times and events must be equal-length vectors")
    # Ordered pairs (i, j) with t_i strictly earlier and i an event; each
    # unordered comparable pair appears exactly once in this orientation.
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise NoComparablePairsError("no comparable pairs under the censoring pattern")
    concordant = int((comparable & (risks[:, None] > risks[None, :])).sum())
    tied = int((comparable & (risks[:, None] == risks[None, :])).sum())
    return (concordant + 0.5 * tied) / n_comp


@dataclass
class KMTable:
    """Product-limit estimate at distinct event times, plus censor ticks."""

    times: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray
    survival: np.ndarray
    censor_times: np.ndarray = field(default_factory=lambda: np.empty(0))

    def survival_at(self, t: float) -> float:
        """Step-function evaluation (right-continuous)."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "n_at_risk": self.n_at_risk.tolist(),
            "n_events": self.n_events.tolist(),
            "survival": self.survival.tolist(),
            "censor_times": self.censor_times.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KMTable":
        return cls(
            times=np.asarray(data["times"], dtype=np.float64),
            n_at_risk=np.asarray(data["n_at_risk"], dtype=np.int64),
            n_events=np.asarray(data["n_events"], dtype=np.int64),
            survival=np.asarray(data["survival"], dtype=np.float64),
            censor_times=np.asarray(data["censor_times"], dtype=np.float64),
        )


def kaplan_meier(times, events) -> KMTable:
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if times.shape != events.shape or times.ndim != 1:
        raise ValueError("times and events must be equal-length vectors")
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    event_times = np.unique(times[events])
    n_at_risk = np.array([(times >= t).sum() for t in event_times], dtype=np.int64)
    n_events = np.array([((times == t) & events).sum() for t in event_times], dtype=np.int64)
    with np.errstate(divide="ignore"):
        survival = np.cumprod(1.0 - n_events / n_at_risk)
    return KMTable(
        times=event_times,
        n_at_risk=n_at_risk,
        n_events=n_events,
        survival=survival,
        censor_times=np.sort(times[~events]),
    )


def chi_square_p_value(stat: float) -> float:
    """Survival function of chi-square with 1 dof: erfc(sqrt(stat / 2))."""
    if stat < 0:
        raise ValueError("chi-square statistic must be non-negative")
    return math.erfc(math.sqrt(stat / 2.0))


@dataclass
class LogRankResult:
    chi_square: float
    p_value: float

    def to_dict(self) -> dict:
        return {"chi_square": self.chi_square, "p_value": self.p_value}

    @classmethod
    def from_dict(cls, data: dict) -> "LogRankResult":
        return cls(chi_square=float(data["chi_square"]), p_value=float(data["p_value"]))


def log_rank(times_a, events_a, times_b, events_b) -> LogRankResult:
    """Two-sample log-rank test over pooled distinct event times."""
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=bool)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=bool)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be nonempty")
    pooled_events = np.unique(np.concatenate([ta[ea], tb[eb]]))
    if pooled_events.size == 0:
        raise ValueError("log-rank needs at least one observed event")
    observed = expected = variance = 0.0
    for t in pooled_events:
        na = int((ta >= t).sum())
        nb = int((tb >= t).sum())
        n = na + nb
        da = int(((ta == t) & ea).sum())
        db = int(((tb == t) & eb).sum())
        d = da + db
        observed += da
        expected += d * na / n
        if n > 1:
            variance += na * nb * d * (n - d) / (n**2 * (n - 1))
    if variance == 0.0:
        raise ZeroVarianceError("log-rank variance is zero for this censoring pattern")
    chi = (observed - expected) ** 2 / variance
    return LogRankResult(chi_square=float(chi), p_value=chi_square_p_value(chi))


def stratify_median(risks) -> np.ndarray:
    """True for high-risk patients (risk strictly above the median)."""
    risks = np.asarray(risks, dtype=np.float64)
    if risks.size < 2:
        raise ValueError("need at least 2 patients to stratify")
    return risks > np.median(risks)


@dataclass
class EndpointReport:
    """Survival evaluation of one endpoint after median-risk stratification."""

    log_rank: LogRankResult
    km_low: KMTable
    km_high: KMTable

    def to_dict(self) -> dict:
        return {
            "log_rank": self.log_rank.to_dict(),
            "km_low": self.km_low.to_dict(),
            "km_high": self.km_high.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EndpointReport":
        return cls(
            log_rank=LogRankResult.from_dict(data["log_rank"]),
            km_low=KMTable.from_dict(data["km_low"]),
            km_high=KMTable.from_dict(data["km_high"]),
        )


@dataclass
class EvalReport:
    acc_group: float
    acc_grade: float
    cindex_pfs: float
    cindex_os: float
    pfs: EndpointReport
    os: EndpointReport

    def to_dict(self) -> dict:
        return {
            "acc_group": self.acc_group,
            "acc_grade": self.acc_grade,
            "cindex_pfs": self.cindex_pfs,
            "cindex_os": self.cindex_os,
            "pfs": self.pfs.to_dict(),
            "os": self.os.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            acc_group=float(data["acc_group"]),
            acc_grade=float(data["acc_grade"]),
            cindex_pfs=float(data["cindex_pfs"]),
            cindex_os=float(data["cindex_os"]),
            pfs=EndpointReport.from_dict(data["pfs"]),
            os=EndpointReport.from_dict(data["os"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def evaluate_endpoint(risks, times, events) -> EndpointReport:
    """Median-split the risks, then KM + log-rank between the strata."""
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    high = stratify_median(risks)
    lr = log_rank(times[~high], events[~high], times[high], events[high])
    return EndpointReport(
        log_rank=lr,
        km_low=kaplan_meier(times[~high], events[~high]),
        km_high=kaplan_meier(times[high], events[high]),
    )


def km_to_csv(report: EndpointReport, path) -> None:
    """Both strata of one endpoint as ``time,n_risk,n_event,survival,group``."""
    lines = ["time,n_risk,n_event,survival,group"]
    for name, km in (("low", report.km_low), ("high", report.km_high)):
        for t, n, d, s in zip(km.times, km.n_at_risk, km.n_events, km.survival):
            lines.append(f"{float(t)!r},{int(n)},{int(d)},{float(s)!r},{name}")
    Path(path).write_text("\n".join(lines) + "\n")
