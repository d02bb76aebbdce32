"""Aggregate metrics, rank correlation and lifecycle-evolution profiles."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, Sequence

from .build import BuildResult

DECILES = 10
MIN_COMMITS = 10


class EmptyInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class TooFewCommits(ValueError):
    pass


class AllMissing(ValueError):
    pass


class Variant(str, enum.Enum):
    ORIGINAL = "Original"
    DEVELOPER = "Developer"
    AUTOMATED = "Automated"


@dataclass(frozen=True)
class EvaluationRecord:
    id: str
    variant: Variant
    build: BuildResult
    understandability_delta: Optional[int] = None
    maintainability_delta: Optional[int] = None
    behavior_ok: bool = True

    def __post_init__(self):
        for name in ("understandability_delta", "maintainability_delta"):
            value = getattr(self, name)
            if value is None:
                continue
            if not self.build.success:
                raise ValueError(f"{name} given for a record whose build failed")
            if isinstance(value, bool) or value not in (-1, 0, 1):
                raise ValueError(f"{name} must be -1, 0 or 1, got {value!r}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "variant": self.variant.value,
            "build": self.build.to_json(),
            "understandability_delta": self.understandability_delta,
            "maintainability_delta": self.maintainability_delta,
            "behavior_ok": self.behavior_ok,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvaluationRecord":
        return cls(
            id=str(data["id"]),
            variant=Variant(data.get("variant", Variant.AUTOMATED.value)),
            build=BuildResult.from_json(data["build"]),
            understandability_delta=data.get("understandability_delta"),
            maintainability_delta=data.get("maintainability_delta"),
            behavior_ok=bool(data.get("behavior_ok", True)),
        )


# ---------------------------------------------------------------------------
# before/after aggregation


def round_percent(count: int, total: int) -> int:
    """Integer percent, rounding halves away from zero."""
    if total <= 0:
        raise EmptyInput("percentage of an empty population")
    value = Decimal(count) * 100 / Decimal(total)
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def format_rate(count: int, total: int) -> str:
    return f"{round_percent(count, total)}% ({count}/{total})"


@dataclass(frozen=True)
class MetricSummary:
    improved: int
    worsened: int
    unchanged: int
    average_reduction_abs: Optional[float] = None
    average_reduction_pct: Optional[float] = None
    total_reduction: Optional[float] = None

    @property
    def pairs(self) -> int:
        return self.improved + self.worsened + self.unchanged

    @property
    def improvement_rate(self) -> float:
        return self.improved / self.pairs if self.pairs else 0.0

    @property
    def deterioration_rate(self) -> float:
        return self.worsened / self.pairs if self.pairs else 0.0

    def to_json(self) -> dict:
        return {
            "improved": self.improved,
            "worsened": self.worsened,
            "unchanged": self.unchanged,
            "improvement_rate": self.improvement_rate,
            "deterioration_rate": self.deterioration_rate,
            "improvement_rate_text": format_rate(self.improved, self.pairs) if self.pairs else None,
            "deterioration_rate_text": format_rate(self.worsened, self.pairs) if self.pairs else None,
            "average_reduction_abs": self.average_reduction_abs,
            "average_reduction_pct": self.average_reduction_pct,
            "total_reduction": self.total_reduction,
        }


CONTINUOUS_METRICS = ("image_size_mb", "build_duration_s")
ORDINAL_METRICS = ("understandability", "maintainability")


@dataclass(frozen=True)
class AggregateReport:
    pairs: int
    built: int
    successful_pairs: int
    metrics: dict

    @property
    def build_success_rate(self) -> float:
        return self.built / self.pairs

    def to_json(self) -> dict:
        return {
            "pairs": self.pairs,
            "built": self.built,
            "successful_pairs": self.successful_pairs,
            "build_success_rate": self.build_success_rate,
            "build_success_rate_text": format_rate(self.built, self.pairs),
            "metrics": {name: m.to_json() for name, m in self.metrics.items()},
        }

    def to_markdown(self) -> str:
        lines = [
            f"Build success: {format_rate(self.built, self.pairs)}",
            "",
            "| Metric | Improvement Rate | Deterioration Rate | Average Reduction | Total Reduction |",
            "|---|---|---|---|---|",
        ]
        for name, m in self.metrics.items():
            imp = format_rate(m.improved, m.pairs) if m.pairs else "n/a"
            det = format_rate(m.worsened, m.pairs) if m.pairs else "n/a"
            if m.average_reduction_abs is None:
                avg = total = "n/a"
            else:
                avg = f"{m.average_reduction_abs:.2f} ({m.average_reduction_pct:.0f}%)"
                total = f"{m.total_reduction:.2f}"
            lines.append(f"| {name} | {imp} | {det} | {avg} | {total} |")
        return "\n".join(lines) + "\n"


def _continuous(pairs: Sequence[tuple[float, float]]) -> MetricSummary:
    improved = sum(1 for b, a in pairs if a < b)
    worsened = sum(1 for b, a in pairs if a > b)
    if not pairs:
        return MetricSummary(0, 0, 0)
    reductions = [b - a for b, a in pairs]
    return MetricSummary(
        improved=improved,
        worsened=worsened,
        unchanged=len(pairs) - improved - worsened,
        average_reduction_abs=sum(reductions) / len(pairs),
        average_reduction_pct=sum((b - a) / b * 100 for b, a in pairs) / len(pairs),
        total_reduction=sum(reductions),
    )


def _ordinal(deltas: Sequence[Optional[int]]) -> MetricSummary:
    improved = sum(1 for d in deltas if d is not None and d > 0)
    worsened = sum(1 for d in deltas if d is not None and d < 0)
    return MetricSummary(improved, worsened, len(deltas) - improved - worsened)


def aggregate(pairs: Sequence[tuple[EvaluationRecord, EvaluationRecord]]) -> AggregateReport:
    """Summarise (before, after) record pairs.

    A pair counts toward the quality metrics when both builds succeeded and
    the after version preserved behaviour. Unannotated quality deltas on such
    pairs count as unchanged.
    """
    if not pairs:
        raise EmptyInput("no records to aggregate")
    built = sum(1 for _, after in pairs if after.build.success)
    ok = [(b, a) for b, a in pairs if b.build.success and a.build.success and a.behavior_ok]
    metrics = {
        "image_size_mb": _continuous([(b.build.image_size_mb, a.build.image_size_mb) for b, a in ok]),
        "build_duration_s": _continuous([(b.build.build_duration_s, a.build.build_duration_s) for b, a in ok]),
        "understandability": _ordinal([a.understandability_delta for _, a in ok]),
        "maintainability": _ordinal([a.maintainability_delta for _, a in ok]),
    }
    return AggregateReport(pairs=len(pairs), built=built, successful_pairs=len(ok), metrics=metrics)


# ---------------------------------------------------------------------------
# rank correlation


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the positions they occupy."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise LengthMismatch(f"series lengths differ: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise InsufficientData("need at least two observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0 or vy == 0:
        raise InsufficientData("a constant series has no rank correlation")
    return max(-1.0, min(1.0, cov / math.sqrt(vx * vy)))


# ---------------------------------------------------------------------------
# lifecycle evolution


def segment_lifecycle(commit_count: int) -> list[range]:
    """Ten contiguous phases; earlier phases take the extra commits."""
    if commit_count < MIN_COMMITS:
        raise TooFewCommits(f"{commit_count} commits, at least {MIN_COMMITS} are required")
    base, extra = divmod(commit_count, DECILES)
    ranges, start = [], 0
    for d in range(DECILES):
        size = base + (1 if d < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return ranges


def carry_forward(series: Sequence[Optional[float]]) -> list[float]:
    """Fill gaps with the next present value; trailing gaps take the last one."""
    if all(v is None for v in series):
        raise AllMissing("no successful measurement to carry")
    out: list[Optional[float]] = list(series)
    upcoming = None
    for i in range(len(out) - 1, -1, -1):
        if out[i] is None:
            out[i] = upcoming
        else:
            upcoming = out[i]
    last = None
    for i, value in enumerate(out):
        if value is None:
            out[i] = last
        else:
            last = value
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class CommitMeasurement:
    image_size_mb: Optional[float]
    build_duration_s: Optional[float]
    refactoring: bool = False


@dataclass(frozen=True)
class ProjectLifecycle:
    size_increase_pct: tuple[float, ...]
    duration_increase_pct: tuple[float, ...]
    refactoring_proportion: tuple[float, ...]
    first_refactoring_decile: Optional[int]


@dataclass(frozen=True)
class LifecycleProfile:
    mean_size_increase_pct: tuple[float, ...]
    mean_duration_increase_pct: tuple[float, ...]
    refactoring_commit_proportion: tuple[float, ...]
    cumulative_first_refactoring_pct: tuple[float, ...]
    projects: int = 1

    def __post_init__(self):
        for name in ("mean_size_increase_pct", "mean_duration_increase_pct",
                     "refactoring_commit_proportion", "cumulative_first_refactoring_pct"):
            if len(getattr(self, name)) != DECILES:
                raise ValueError(f"{name} must have {DECILES} entries")

    def rows(self) -> Iterable[tuple[int, str, float]]:
        series = (
            ("mean_size_increase_pct", self.mean_size_increase_pct),
            ("mean_duration_increase_pct", self.mean_duration_increase_pct),
            ("refactoring_commit_proportion", self.refactoring_commit_proportion),
            ("cumulative_first_refactoring_pct", self.cumulative_first_refactoring_pct),
        )
        for d in range(DECILES):
            for name, values in series:
                yield d + 1, name, values[d]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("decile", "metric", "value"))
        for decile, name, value in self.rows():
            writer.writerow((decile, name, repr(float(value))))
        return buf.getvalue()


def _increase_pct(values: Sequence[float]) -> list[float]:
    first = values[0]
    if first <= 0:
        raise ValueError("the first measurement must be positive")
    return [(v - first) / first * 100 for v in values]


def project_lifecycle(history: Sequence[CommitMeasurement]) -> ProjectLifecycle:
    """Per-decile profile of one Dockerfile's commit history (oldest first)."""
    ranges = segment_lifecycle(len(history))
    sizes = _increase_pct(carry_forward([c.image_size_mb for c in history]))
    durations = _increase_pct(carry_forward([c.build_duration_s for c in history]))

    def mean(values, r):
        return sum(values[i] for i in r) / len(r)

    flags = [1.0 if c.refactoring else 0.0 for c in history]
    first = next((d for d, r in enumerate(ranges) if any(history[i].refactoring for i in r)), None)
    return ProjectLifecycle(
        size_increase_pct=tuple(mean(sizes, r) for r in ranges),
        duration_increase_pct=tuple(mean(durations, r) for r in ranges),
        refactoring_proportion=tuple(mean(flags, r) for r in ranges),
        first_refactoring_decile=first,
    )


def combine_lifecycles(projects: Sequence[ProjectLifecycle]) -> LifecycleProfile:
    """Unweighted per-Dockerfile means across projects."""
    if not projects:
        raise EmptyInput("no project lifecycles to combine")
    n = len(projects)

    def column(attr):
        return tuple(sum(getattr(p, attr)[d] for p in projects) / n for d in range(DECILES))

    cumulative = tuple(
        sum(1 for p in projects if p.first_refactoring_decile is not None and p.first_refactoring_decile <= d)
        / n * 100
        for d in range(DECILES)
    )
    return LifecycleProfile(
        mean_size_increase_pct=column("size_increase_pct"),
        mean_duration_increase_pct=column("duration_increase_pct"),
        refactoring_commit_proportion=column("refactoring_proportion"),
        cumulative_first_refactoring_pct=cumulative,
        projects=n,
    )


def lifecycle_profile(history: Sequence[CommitMeasurement]) -> LifecycleProfile:
    return combine_lifecycles([project_lifecycle(history)])
