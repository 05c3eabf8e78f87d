"""Success criterion, accuracy, checkpoint ensembles and evaluation reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .classical import IcpConfig, MatchResult, RansacConfig, icp_translate, ransac_translate
from .geometry import Displacement, Profile, read_profile
from .synthetic import DatasetManifest
from .training import Checkpoint, NeuralMatcher, _neural_result

log = logging.getLogger(__name__)

ENSEMBLE_PRESETS = {
    "mean4": (0.25, 0.25, 0.25, 0.25),
    # dual-branch, single-branch, alternate single-branch backbone
    "weighted3": (0.5, 0.25, 0.25),
}


@dataclass(frozen=True)
class SuccessCriterion:
    tolerance: float = 0.4

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


def is_success(pred: Displacement, label: Displacement, c: SuccessCriterion = SuccessCriterion()) -> bool:
    """Strict per-axis test: both |error| components below the tolerance."""
    return abs(pred.dx - label.dx) < c.tolerance and abs(pred.dy - label.dy) < c.tolerance


def accuracy(
    preds: Sequence[Displacement], labels: Sequence[Displacement], c: SuccessCriterion = SuccessCriterion()
) -> float:
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if not preds:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(is_success(p, l, c) for p, l in zip(preds, labels)) / len(preds)


class Matcher(Protocol):
    method: str

    def match_many(self, pairs: Sequence[tuple[Profile, Profile]], sample_ids: Sequence[str] | None = None) -> list[MatchResult]: ...


class ClassicalMatcher:
    def __init__(self, method: str = "icp", config: IcpConfig | RansacConfig | None = None):
        if method not in ("icp", "ransac"):
            raise ValueError(f"unknown classical method {method!r}")
        self.method = method
        self.config = config if config is not None else (IcpConfig() if method == "icp" else RansacConfig())

    def match(self, designed: Profile, measured: Profile) -> MatchResult:
        if self.method == "icp":
            return icp_translate(measured, designed, self.config)
        return ransac_translate(measured, designed, self.config)

    def match_many(self, pairs, sample_ids=None) -> list[MatchResult]:
        return [self.match(d, m) for d, m in pairs]


@dataclass
class EnsembleSpec:
    members: list[str]
    weights: list[float]

    def __post_init__(self) -> None:
        self.members = [str(m) for m in self.members]
        self.weights = [float(w) for w in self.weights]
        if len(self.members) != len(self.weights) or not self.members:
            raise ValueError("ensemble needs one weight per member and at least one member")
        if any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ValueError("ensemble weights must be non-negative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must sum to 1, got {sum(self.weights)}")

    @classmethod
    def preset(cls, name: str, members: Sequence[str | Path]) -> EnsembleSpec:
        if name not in ENSEMBLE_PRESETS:
            raise ValueError(f"unknown ensemble preset {name!r}; choose from {sorted(ENSEMBLE_PRESETS)}")
        weights = ENSEMBLE_PRESETS[name]
        if len(members) != len(weights):
            raise ValueError(f"preset {name} needs {len(weights)} members, got {len(members)}")
        return cls([str(m) for m in members], list(weights))

    @classmethod
    def load(cls, path: str | Path) -> EnsembleSpec:
        path = Path(path)
        data = json.loads(path.read_text())
        members = [m if Path(m).is_absolute() else str(path.parent / m) for m in data["members"]]
        return cls(members, data["weights"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"members": self.members, "weights": self.weights}, indent=2) + "\n")
        return path


def combine(member_preds: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """Weighted sum over the leading (member) axis."""
    member_preds = np.asarray(member_preds, dtype=np.float64)
    out = np.zeros(member_preds.shape[1:], dtype=np.float64)
    for w, p in zip(weights, member_preds):
        out += w * p
    return out


class EnsembleMatcher:
    method = "ensemble"

    def __init__(self, spec: EnsembleSpec, members: Sequence[NeuralMatcher] | None = None):
        self.spec = spec
        if members is None:
            members = []
            for ref in spec.members:
                try:
                    members.append(NeuralMatcher(ref))
                except FileNotFoundError as exc:
                    raise FileNotFoundError(f"ensemble member {ref} is missing: {exc}") from exc
        self.members = list(members)
        norms = {m.l_norm for m in self.members}
        if len(norms) != 1:
            raise ValueError(f"ensemble members disagree on L_norm: {sorted(norms)}")
        self.l_norm = norms.pop()
        self.last_member_preds: np.ndarray | None = None

    def member_predictions_mm(self, pairs, sample_ids=None) -> np.ndarray:
        """``(members, N, 2)`` predictions in mm."""
        return np.stack([m.predict_norm(pairs, sample_ids) * m.l_norm for m in self.members])

    def match_many(self, pairs, sample_ids=None) -> list[MatchResult]:
        member = self.member_predictions_mm(pairs, sample_ids)
        self.last_member_preds = member
        combined = combine(member, self.spec.weights)
        return [
            _neural_result(Displacement(float(p[0]), float(p[1])), d, m, method="ensemble")
            for p, (d, m) in zip(combined, pairs)
        ]

    def match(self, designed: Profile, measured: Profile) -> MatchResult:
        return self.match_many([(designed, measured)])[0]


def ensemble_predict(spec: EnsembleSpec | EnsembleMatcher, designed: Profile, measured: Profile) -> MatchResult:
    matcher = spec if isinstance(spec, EnsembleMatcher) else EnsembleMatcher(spec)
    return matcher.match(designed, measured)


@dataclass
class SampleOutcome:
    id: str
    label_dx: float
    label_dy: float
    pred_dx: float | None
    pred_dy: float | None
    success: bool
    error: str | None = None

    @property
    def err(self) -> tuple[float, float] | None:
        if self.pred_dx is None:
            return None
        return self.pred_dx - self.label_dx, self.pred_dy - self.label_dy


@dataclass
class EvalReport:
    split: str
    method: str
    tolerance_mm: float
    accuracy: float
    mse_mm2: float
    max_abs_error_mm: tuple[float, float]
    n_samples: int
    n_failed: int
    samples: list[SampleOutcome] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_abs_error_mm"] = list(self.max_abs_error_mm)
        return d

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        d = json.loads(Path(path).read_text())
        d["samples"] = [SampleOutcome(**s) for s in d["samples"]]
        d["max_abs_error_mm"] = tuple(d["max_abs_error_mm"])
        return cls(**d)


def build_report(
    split: str,
    method: str,
    ids: Sequence[str],
    labels: Sequence[Displacement],
    preds: Sequence[Displacement | None],
    errors: Sequence[str | None],
    c: SuccessCriterion,
) -> EvalReport:
    outcomes = []
    for sid, lab, pred, err in sorted(zip(ids, labels, preds, errors), key=lambda t: t[0]):
        if pred is None:
            outcomes.append(SampleOutcome(sid, lab.dx, lab.dy, None, None, False, err))
        else:
            outcomes.append(SampleOutcome(sid, lab.dx, lab.dy, pred.dx, pred.dy, is_success(pred, lab, c), err))
    errs = np.array([o.err for o in outcomes if o.err is not None], dtype=np.float64).reshape(-1, 2)
    n = len(outcomes)
    return EvalReport(
        split=split,
        method=method,
        tolerance_mm=c.tolerance,
        accuracy=sum(o.success for o in outcomes) / n if n else float("nan"),
        mse_mm2=float(np.mean(errs**2)) if len(errs) else float("nan"),
        max_abs_error_mm=tuple(float(v) for v in np.abs(errs).max(axis=0)) if len(errs) else (math.nan, math.nan),
        n_samples=n,
        n_failed=sum(o.pred_dx is None for o in outcomes),
        samples=outcomes,
    )


def evaluate(
    matcher: Matcher,
    manifest: DatasetManifest,
    split: str = "test",
    c: SuccessCriterion = SuccessCriterion(),
    batch_size: int = 64,
) -> EvalReport:
    """Run ``matcher`` on every sample of ``split``.

    A sample that fails to load or match is reported with its error and
    counted as unsuccessful; evaluation continues. ``mse_mm2`` is the mean
    squared per-axis error over samples that produced a prediction.
    """
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    ids, labels, preds, errors = [], [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        pairs, ok = [], []
        for rec in chunk:
            try:
                pairs.append((read_profile(manifest.path(rec.designed_path)), read_profile(manifest.path(rec.measured_path))))
                ok.append(rec)
            except (OSError, ValueError) as exc:
                log.warning("sample %s: %s", rec.id, exc)
                ids.append(rec.id), labels.append(rec.label), preds.append(None), errors.append(str(exc))
        results = _match_robustly(matcher, pairs, [r.id for r in ok])
        for rec, res in zip(ok, results):
            ids.append(rec.id)
            labels.append(rec.label)
            if isinstance(res, Exception):
                preds.append(None)
                errors.append(str(res))
            else:
                preds.append(res.displacement)
                errors.append(res.error)
    return build_report(split, getattr(matcher, "method", "unknown"), ids, labels, preds, errors, c)


def _match_robustly(matcher: Matcher, pairs, ids) -> list[MatchResult | Exception]:
    if not pairs:
        return []
    try:
        return list(matcher.match_many(pairs, ids))
    except Exception:  # fall back to one-by-one so a single bad sample is isolated
        out: list[MatchResult | Exception] = []
        for pair, sid in zip(pairs, ids):
            try:
                out.append(matcher.match_many([pair], [sid])[0])
            except Exception as exc:
                log.warning("sample %s: %s", sid, exc)
                out.append(exc)
        return out


def jensen_by_batch(
    member_preds: np.ndarray, weights: Sequence[float], labels: np.ndarray, batch_size: int = 32
) -> list[tuple[float, float]]:
    """Per batch: (MSE of the weighted prediction, weighted mean of member MSEs).

    Convexity of the squared error guarantees first <= second.
    """
    member_preds = np.asarray(member_preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    combined = combine(member_preds, weights)
    rows = []
    for start in range(0, labels.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        ens = float(np.mean((combined[sl] - labels[sl]) ** 2))
        members = [float(np.mean((p[sl] - labels[sl]) ** 2)) for p in member_preds]
        rows.append((ens, float(np.dot(weights, members))))
    return rows


SVG_UNITS_PER_MM = 100.0


def error_scatter_export(report: EvalReport, out: str | Path) -> tuple[Path, Path]:
    """Write ``<out>.csv`` and ``<out>.svg``: per-sample errors and a scatter
    with the +/- tolerance box. SVG user units are 1/100 mm."""
    out = Path(out)
    if out.suffix in (".csv", ".svg"):
        out = out.with_suffix("")
    rows = [o for o in report.samples if o.err is not None]
    if not rows:
        raise ValueError("report has no predictions to plot")
    csv_path, svg_path = out.with_suffix(".csv"), out.with_suffix(".svg")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "err_dx_mm", "err_dy_mm", "success"])
        for o in report.samples:
            e = o.err
            writer.writerow([o.id, "" if e is None else repr(e[0]), "" if e is None else repr(e[1]), int(o.success)])

    k = SVG_UNITS_PER_MM
    tol = report.tolerance_mm
    errs = np.array([o.err for o in rows])
    extent = max(2.0 * tol, float(np.abs(errs).max()) * 1.1)
    half = extent * k
    r = half / 150.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{-half:.3f} {-half:.3f} {2 * half:.3f} {2 * half:.3f}" '
        f'width="600" height="600" data-units-per-mm="{k:g}">',
        f'<rect x="{-half:.3f}" y="{-half:.3f}" width="{2 * half:.3f}" height="{2 * half:.3f}" fill="white"/>',
        f'<line x1="{-half:.3f}" y1="0" x2="{half:.3f}" y2="0" stroke="#999" stroke-width="{r / 3:.3f}"/>',
        f'<line x1="0" y1="{-half:.3f}" x2="0" y2="{half:.3f}" stroke="#999" stroke-width="{r / 3:.3f}"/>',
        f'<rect id="tolerance-box" x="{-tol * k:.3f}" y="{-tol * k:.3f}" width="{2 * tol * k:.3f}" '
        f'height="{2 * tol * k:.3f}" fill="none" stroke="blue" stroke-width="{r / 2:.3f}"/>',
    ]
    for o, (ex, ey) in zip(rows, errs):
        # y flipped so +dy error points up
        parts.append(
            f'<circle cx="{ex * k:.3f}" cy="{-ey * k:.3f}" r="{r:.3f}" fill="{"red" if o.success else "black"}">'
            f"<title>{o.id}</title></circle>"
        )
    parts.append(
        f'<text x="{-half + r:.3f}" y="{-half + 6 * r:.3f}" font-size="{5 * r:.3f}">'
        f"{report.method} {report.split}: accuracy {report.accuracy:.4f} (tol {tol:g} mm)</text>"
    )
    parts.append("</svg>")
    svg_path.write_text("\n".join(parts) + "\n")
    return csv_path, svg_path
