"""
Check records, residual rows and run reports.

A verification suite returns a SuiteResult: named records (residual against
tolerance) plus per-sample residual rows for the CSV stream. The runner
collects suites into a Report that serializes to JSON.
"""
import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from django.conf import settings

from core.services.errors import NormalFormError

logger = logging.getLogger(__name__)

# Residuals below this are treated as converged when judging refinement ratios.
REFINEMENT_FLOOR = 1e-10
REFINEMENT_RATIO = 8.0


@dataclass
class CheckRecord:
    """
    One named check of a suite.

    Attributes:
        name: Check identifier, e.g. "pushforward".
        residual: Worst residual observed (inf when a sample failed outright).
        tolerance: Pass threshold.
        passed: residual ≤ tolerance and no failure.
        probed_radius: Largest fibre radius at which all samples succeeded, when relevant.
        detail: Short human-readable note (failure class and message).
    """
    name: str
    residual: float
    tolerance: float
    passed: Optional[bool] = None
    probed_radius: Optional[float] = None
    detail: str = ""
    kind: str = "check"
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.residual = float(self.residual)
        self.tolerance = float(self.tolerance)
        if self.passed is None:
            self.passed = bool(np.isfinite(self.residual) and self.residual <= self.tolerance)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if not np.isfinite(self.residual):
            data["residual"] = None
        if not data["extra"]:
            data.pop("extra")
        return data


@dataclass
class ResidualRow:
    """Per-sample residual: sample index, base point, covector (or fibre part), kind and value."""
    sample: int
    point: List[float]
    covector: List[float]
    kind: str
    value: float


@dataclass
class SuiteResult:
    records: List[CheckRecord] = field(default_factory=list)
    rows: List[ResidualRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(record.passed for record in self.records)

    def record(self, name: str) -> CheckRecord:
        for record in self.records:
            if record.name == name:
                return record
        raise KeyError(name)

    def extend(self, other: "SuiteResult", prefix: str = "") -> "SuiteResult":
        for record in other.records:
            if prefix:
                record.name = f"{prefix}.{record.name}"
            self.records.append(record)
        self.rows.extend(other.rows)
        return self


def worst(values: Iterable[float]) -> float:
    """Maximum residual, inf if any is not finite, 0 for an empty set."""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return 0.0
    if not np.all(np.isfinite(values)):
        return float("inf")
    return float(np.max(values))


def probed_radius(radii: Sequence[float], ok: Sequence[bool]) -> float:
    """Largest sampled radius below which every sample succeeded."""
    radii = np.asarray(radii, dtype=float)
    ok = np.asarray(ok, dtype=bool)
    if radii.size == 0:
        return 0.0
    limit = np.min(radii[~ok]) if np.any(~ok) else np.inf
    good = radii[ok & (radii < limit)]
    return float(np.max(good)) if good.size else 0.0


def failure_detail(errors: Dict[int, NormalFormError]) -> str:
    if not errors:
        return ""
    index, error = next(iter(errors.items()))
    return f"{len(errors)} sample(s) failed; first #{index}: {type(error).__name__}: {error}"


def refinement_record(name: str, coarse: float, fine: float, steps: int,
                      ratio: float = REFINEMENT_RATIO, floor: float = REFINEMENT_FLOOR) -> CheckRecord:
    """
    Record comparing a residual at steps and 2·steps.

    Passes when the residual drops by at least the ratio, or when both
    residuals are already below the numerical floor.
    """
    observed = coarse / fine if fine > 0.0 else float("inf")
    converged = coarse <= floor and fine <= floor
    passed = bool(np.isfinite(coarse) and np.isfinite(fine) and (observed >= ratio or converged))
    return CheckRecord(
        name=name,
        residual=fine,
        tolerance=max(coarse / ratio, floor),
        passed=passed,
        kind="refinement",
        detail=f"steps {steps}: {coarse:.3e}, steps {2 * steps}: {fine:.3e}, ratio {observed:.2f}",
        extra={"coarse": coarse, "fine": fine, "steps": steps, "ratio": observed},
    )


def ordered_map(fn: Callable, items: Sequence, threads: Optional[int] = None) -> List:
    """
    Apply fn to every item, fanning out over a thread pool capped by PNF_THREADS.

    Results come back in item order.
    """
    threads = threads or getattr(settings, "PNF_THREADS", 1)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _clean(value):
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def canonical_json(data: Any) -> str:
    return json.dumps(_clean(data), sort_keys=True, separators=(",", ":"))


def config_digest(config: Dict[str, Any]) -> str:
    """sha256 of the canonical JSON of a validated configuration."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


@dataclass
class Report:
    """
    Outcome of one command run.

    The timing block is informational only: it is excluded from the digest
    and from pass/fail logic.
    """
    command: str
    config_name: str
    config_digest: str
    version: str
    records: List[CheckRecord] = field(default_factory=list)
    rows: List[ResidualRow] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    timing: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.records) and all(record.passed for record in self.records)

    def add(self, suite: SuiteResult, prefix: str = "") -> None:
        for record in suite.records:
            if prefix:
                record.name = f"{prefix}.{record.name}"
            self.records.append(record)
        self.rows.extend(suite.rows)

    def to_dict(self, include_timing: bool = True) -> Dict[str, Any]:
        data = {
            "command": self.command,
            "config": self.config_name,
            "config_digest": self.config_digest,
            "version": self.version,
            "passed": self.passed,
            "records": [record.to_dict() for record in self.records],
            "summary": self.summary,
        }
        if include_timing:
            data["timing"] = self.timing
        return _clean(data)

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.to_json())
            handle.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["sample", "point", "covector", "kind", "value"])
            for row in self.rows:
                writer.writerow([
                    row.sample,
                    " ".join(repr(float(v)) for v in row.point),
                    " ".join(repr(float(v)) for v in row.covector),
                    row.kind,
                    repr(float(row.value)),
                ])
