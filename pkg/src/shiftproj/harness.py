"""Replicated experiment runner with deterministic report emission.

Runs each configured method over seeded replicates of a benchmark (or a
fixed CSV split), aggregates out-of-sample loss and effective sample size,
and writes raw per-replicate rows plus normalized summary artifacts
(JSON/CSV/SVG).  All outputs are byte-deterministic for a fixed config.
"""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .baselines import BaselineSpec, run_baseline
from .data import TrainTestPair
from .dataio import read_json, read_split, write_json
from .errors import InputError, NumericalError
from .subspace_search import SearchConfig, holdout_loss, search
from .synthetic import gen_example1, gen_example2
from .weighted_model import LossSpec

logger = logging.getLogger(__name__)

_METHOD_WITH_K = re.compile(r"^(JP|RP|SIR)\((\d+)\)$")
_METHOD_PLAIN = ("UW", "IW")
_GENERATORS = ("example1", "example2", "split")
MAX_FAILURE_FRACTION = 0.2

_SEARCH_FIELDS = {f.name for f in dataclasses.fields(SearchConfig)} - {"k", "seed"}
_TUPLE_SEARCH_FIELDS = ("lambda_grid", "c_grid")


def parse_method(label: str):
    """Parse a method label into (kind, k); k is None for UW/IW."""
    if label in _METHOD_PLAIN:
        return label, None
    m = _METHOD_WITH_K.match(label)
    if m is None:
        raise InputError(
            f"unknown method {label!r}; expected UW, IW, or JP(K)/RP(K)/SIR(K)"
        )
    k = int(m.group(2))
    if k < 1:
        raise InputError(f"method {label!r}: K must be >= 1")
    return m.group(1), k


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun an experiment from scratch."""

    generator: str
    methods: tuple
    replicates: int = 50
    sample_sizes: tuple = ()
    seed: int = 0
    task: str = "regression"
    data_dir: str | None = None
    out_dir: str | None = None
    search: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.generator not in _GENERATORS:
            raise InputError(f"generator must be one of {_GENERATORS}")
        if not self.methods:
            raise InputError("methods must be nonempty")
        for label in self.methods:
            parse_method(label)
        if self.replicates < 1:
            raise InputError("replicates must be >= 1")
        if self.task not in ("regression", "classification"):
            raise InputError("task must be regression or classification")
        if self.generator == "split":
            if not self.data_dir:
                raise InputError("generator 'split' requires data_dir")
        else:
            if not self.sample_sizes:
                raise InputError("sample_sizes must be nonempty")
            if any(int(n) < 10 for n in self.sample_sizes):
                raise InputError("sample sizes must be >= 10")
        unknown = set(self.search) - _SEARCH_FIELDS
        if unknown:
            raise InputError(f"unknown search options: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        if "sample_sizes" in d:
            d["sample_sizes"] = tuple(int(n) for n in d["sample_sizes"])
        search = dict(d.get("search") or {})
        for key in _TUPLE_SEARCH_FIELDS:
            if key in search:
                search[key] = tuple(search[key])
        d["search"] = search
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        body = read_json(path)
        if not isinstance(body, dict):
            raise InputError(f"{path}: config must be a JSON object")
        return cls.from_dict(body)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["methods"] = list(self.methods)
        d["sample_sizes"] = [int(n) for n in self.sample_sizes]
        d["search"] = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in self.search.items()
        }
        # directories may arrive as Path objects; keep the dict JSON-ready
        for key in ("data_dir", "out_dir"):
            if d[key] is not None:
                d[key] = str(d[key])
        return d


@dataclass(frozen=True)
class MethodAggregate:
    """Summary statistics for one (method, N) cell."""

    method: str
    kind: str
    k: int | None
    n: int
    replicates: int
    failures: int
    loss_mean: float
    loss_std: float
    ess_mean: float
    norm_loss_mean: float | None
    norm_loss_std: float | None
    norm_ess_mean: float | None
    auc_complement_mean: float | None
    small_sample: bool


@dataclass(frozen=True)
class NormalizationConstants:
    n: int
    loss: float
    ess: float


@dataclass(frozen=True)
class ExperimentReport:
    generator: str
    task: str
    replicates: int
    seed: int
    methods: tuple
    sample_sizes: tuple
    aggregates: tuple
    normalization: tuple


def rank_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann–Whitney rank statistic."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positive = np.asarray(labels).ravel() > 0
    n_pos = int(positive.sum())
    n_neg = int(len(positive) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise InputError("rank_auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _make_loss(task: str) -> LossSpec:
    return LossSpec.classification() if task == "classification" else LossSpec.regression()


def _generate(config: ExperimentConfig, n: int, seed: int, fixed) -> TrainTestPair:
    if config.generator == "example1":
        return gen_example1(n, seed=seed)
    if config.generator == "example2":
        return gen_example2(n, seed=seed)
    return fixed


def _run_method(kind, k, data: TrainTestPair, loss: LossSpec, seed: int, config):
    """Fit one method on one replicate; returns (loss, ess, auc_complement)."""
    if kind == "JP":
        cfg = SearchConfig(k=k, seed=seed, **config.search)
        result = search(data, cfg, loss=loss)
        loss_val = holdout_loss(result, data, loss=loss)
        ess = result.state.weights.ess
        proj, model = result.projection.A, result.state.model
    else:
        spec = BaselineSpec(kind, k=k, seed=seed)
        n_centers = config.search.get("n_centers")
        fit = run_baseline(spec, data, loss=loss, n_centers=n_centers)
        loss_val = fit.holdout_loss(data.holdout_X, data.y_te_holdout, loss)
        ess = fit.weights.ess
        proj, model = fit.projection, fit.model
    auc_c = None
    if loss.task == "classification":
        y_ho = np.asarray(data.y_te_holdout).ravel()
        if np.unique(y_ho > 0).size == 2:
            X = np.asarray(data.holdout_X, dtype=np.float64)
            U = X @ proj if proj is not None else X
            auc_c = 1.0 - rank_auc(model.predict_score(U), y_ho)
    return float(loss_val), float(ess), auc_c


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """Run every (method, N, replicate) cell and aggregate the results.

    If any method fails on more than 20% of its replicates the run aborts
    with a per-replicate error log (written to ``errors.log`` when an
    output directory is given).
    """
    out = out_dir if out_dir is not None else config.out_dir
    loss = _make_loss(config.task)
    fixed = read_split(config.data_dir) if config.generator == "split" else None
    ns = (
        tuple(int(n) for n in config.sample_sizes)
        if config.generator != "split"
        else (fixed.n_train,)
    )

    rows = []
    errors = []
    for n in ns:
        for rep in range(config.replicates):
            rep_seed = config.seed + rep
            data = _generate(config, n, rep_seed, fixed)
            for label in config.methods:
                kind, k = parse_method(label)
                try:
                    loss_val, ess, auc_c = _run_method(kind, k, data, loss, rep_seed, config)
                except (NumericalError, InputError, np.linalg.LinAlgError) as exc:
                    logger.error(
                        "method %s failed on n=%d replicate %d (seed %d): %s",
                        label, n, rep, rep_seed, exc,
                    )
                    errors.append(
                        {"method": label, "n": n, "replicate": rep,
                         "seed": rep_seed, "error": f"{type(exc).__name__}: {exc}"}
                    )
                    continue
                rows.append(
                    {"method": label, "k": k, "n": n, "replicate": rep,
                     "seed": rep_seed, "loss": loss_val, "ess": ess,
                     "auc_complement": auc_c}
                )

    _check_failures(config, ns, errors, out)
    aggregates, normalization = _aggregate(config, ns, rows)
    report = ExperimentReport(
        generator=config.generator,
        task=config.task,
        replicates=config.replicates,
        seed=config.seed,
        methods=tuple(config.methods),
        sample_sizes=ns,
        aggregates=aggregates,
        normalization=normalization,
    )
    if out is not None:
        out_path = Path(out)
        out_path.mkdir(parents=True, exist_ok=True)
        write_raw_csv(out_path / "raw.csv", rows, task=config.task)
        files = emit_report(report, out_path)
        files["raw"] = out_path / "raw.csv"
        manifest = {
            "config": config.to_dict(),
            "files": {k: p.name for k, p in sorted(files.items())},
            "n_errors": len(errors),
        }
        write_json(out_path / "manifest.json", manifest)
    return report


def _check_failures(config, ns, errors, out):
    if not errors:
        return
    if out is not None:
        out_path = Path(out)
        out_path.mkdir(parents=True, exist_ok=True)
        lines = [
            "method={method} n={n} replicate={replicate} seed={seed}: {error}".format(**e)
            for e in errors
        ]
        (out_path / "errors.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for label in config.methods:
        for n in ns:
            n_fail = sum(1 for e in errors if e["method"] == label and e["n"] == n)
            if n_fail > MAX_FAILURE_FRACTION * config.replicates:
                raise NumericalError(
                    f"method {label} failed on {n_fail}/{config.replicates} replicates "
                    f"at n={n}; see error log"
                )


def _aggregate(config, ns, rows):
    uw_consts = {}
    for n in ns:
        uw = [r for r in rows if r["method"] == "UW" and r["n"] == n]
        if uw:
            uw_consts[n] = NormalizationConstants(
                n=int(n),
                loss=float(np.mean([r["loss"] for r in uw])),
                ess=float(np.mean([r["ess"] for r in uw])),
            )
    aggregates = []
    for n in ns:
        for label in config.methods:
            kind, k = parse_method(label)
            cell = [r for r in rows if r["method"] == label and r["n"] == n]
            failures = config.replicates - len(cell)
            if not cell:
                continue
            losses = np.array([r["loss"] for r in cell])
            esses = np.array([r["ess"] for r in cell])
            small = len(cell) < 2
            loss_std = 0.0 if small else float(np.std(losses, ddof=1))
            aucs = [r["auc_complement"] for r in cell if r["auc_complement"] is not None]
            const = uw_consts.get(n)
            norm = None
            if const is not None and const.loss > 0 and const.ess > 0:
                norm = const
            aggregates.append(
                MethodAggregate(
                    method=label,
                    kind=kind,
                    k=k,
                    n=int(n),
                    replicates=len(cell),
                    failures=failures,
                    loss_mean=float(np.mean(losses)),
                    loss_std=loss_std,
                    ess_mean=float(np.mean(esses)),
                    norm_loss_mean=float(np.mean(losses) / norm.loss) if norm else None,
                    norm_loss_std=float(loss_std / norm.loss) if norm else None,
                    norm_ess_mean=float(np.mean(esses) / norm.ess) if norm else None,
                    auc_complement_mean=float(np.mean(aucs)) if aucs else None,
                    small_sample=small,
                )
            )
    return tuple(aggregates), tuple(uw_consts[n] for n in ns if n in uw_consts)


# ---------------------------------------------------------------------------
# Emission


def write_raw_csv(path, rows, task="regression") -> Path:
    path = Path(path)
    header = ["method", "k", "n", "replicate", "seed", "loss", "ess"]
    with_auc = task == "classification"
    if with_auc:
        header.append("auc_complement")
    lines = [",".join(header)]
    for r in rows:
        cells = [
            r["method"],
            "" if r["k"] is None else str(int(r["k"])),
            str(int(r["n"])),
            str(int(r["replicate"])),
            str(int(r["seed"])),
            repr(float(r["loss"])),
            repr(float(r["ess"])),
        ]
        if with_auc:
            auc = r.get("auc_complement")
            cells.append("" if auc is None else repr(float(auc)))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "generator": report.generator,
        "task": report.task,
        "replicates": report.replicates,
        "seed": report.seed,
        "methods": list(report.methods),
        "sample_sizes": [int(n) for n in report.sample_sizes],
        "aggregates": [dataclasses.asdict(a) for a in report.aggregates],
        "normalization": [dataclasses.asdict(c) for c in report.normalization],
    }


def report_from_dict(d: dict) -> ExperimentReport:
    try:
        return ExperimentReport(
            generator=d["generator"],
            task=d["task"],
            replicates=int(d["replicates"]),
            seed=int(d["seed"]),
            methods=tuple(d["methods"]),
            sample_sizes=tuple(int(n) for n in d["sample_sizes"]),
            aggregates=tuple(MethodAggregate(**a) for a in d["aggregates"]),
            normalization=tuple(NormalizationConstants(**c) for c in d["normalization"]),
        )
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed report payload: {exc}") from exc


def write_report_csv(path, report: ExperimentReport) -> Path:
    path = Path(path)
    header = [
        "method", "kind", "k", "n", "replicates", "failures",
        "loss_mean", "loss_std", "ess_mean",
        "norm_loss_mean", "norm_loss_std", "norm_ess_mean",
        "auc_complement_mean", "small_sample",
    ]
    lines = [",".join(header)]
    for a in report.aggregates:
        cells = [
            a.method, a.kind,
            "" if a.k is None else str(a.k),
            str(a.n), str(a.replicates), str(a.failures),
            repr(a.loss_mean), repr(a.loss_std), repr(a.ess_mean),
        ]
        for v in (a.norm_loss_mean, a.norm_loss_std, a.norm_ess_mean, a.auc_complement_mean):
            cells.append("" if v is None else repr(float(v)))
        cells.append(str(int(a.small_sample)))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def emit_report(report: ExperimentReport, out_dir, formats=("json", "csv", "svg")) -> dict:
    """Write the report in the requested formats; returns name -> path."""
    if not report.aggregates:
        raise InputError("report has no aggregates to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if "json" in formats:
        files["report_json"] = write_json(out / "report.json", report_to_dict(report))
    if "csv" in formats:
        files["report_csv"] = write_report_csv(out / "report.csv", report)
    if "svg" in formats:
        figure = out / "figure.svg"
        figure.write_text(render_figure(report), encoding="utf-8")
        files["figure"] = figure
    return files


# --- tiny deterministic SVG plotter (three panels, Figure-style layout) ----

_COLORS = {"JP": "#000000", "UW": "#1f77b4", "IW": "#d62728",
           "RP": "#2ca02c", "SIR": "#9467bd"}
_DASHES = ("", "6,3", "2,2", "8,2,2,2")

_PANEL_W, _PANEL_H = 280, 220
_PANEL_GAP, _MARGIN_L, _MARGIN_T = 40, 50, 40


def _fmt(v: float) -> str:
    return format(float(v), ".3f")


def _panel(x0, title, curves, hlines, ks):
    """Render one panel; curves: (name, kind, dash, [(k, v)]), hlines: (name, kind, dash, v)."""
    vals = [v for _, _, _, pts in curves for _, v in pts] + [v for _, _, _, v in hlines]
    vmax = max(vals + [1.0]) * 1.15
    kmin, kmax = (min(ks), max(ks)) if ks else (0, 1)
    span = (kmax - kmin) or 1

    def px(k):
        return x0 + 25 + (k - kmin) / span * (_PANEL_W - 50)

    def py(v):
        return _MARGIN_T + _PANEL_H - (v / vmax) * _PANEL_H

    parts = [
        f'<rect x="{x0}" y="{_MARGIN_T}" width="{_PANEL_W}" height="{_PANEL_H}" '
        'fill="none" stroke="#888888"/>',
        f'<text x="{x0 + _PANEL_W // 2}" y="{_MARGIN_T - 12}" text-anchor="middle" '
        f'font-size="13">{title}</text>',
    ]
    for i in range(5):
        v = vmax * i / 4
        y = py(v)
        parts.append(
            f'<line x1="{x0 - 4}" y1="{_fmt(y)}" x2="{x0}" y2="{_fmt(y)}" stroke="#444444"/>'
        )
        parts.append(
            f'<text x="{x0 - 7}" y="{_fmt(y + 4)}" text-anchor="end" font-size="10">'
            f"{format(v, '.2f')}</text>"
        )
    for k in sorted(set(ks)):
        x = px(k)
        y1 = _MARGIN_T + _PANEL_H
        parts.append(f'<line x1="{_fmt(x)}" y1="{y1}" x2="{_fmt(x)}" y2="{y1 + 4}" stroke="#444444"/>')
        parts.append(
            f'<text x="{_fmt(x)}" y="{y1 + 16}" text-anchor="middle" font-size="10">{k}</text>'
        )
    parts.append(
        f'<text x="{x0 + _PANEL_W // 2}" y="{_MARGIN_T + _PANEL_H + 32}" '
        'text-anchor="middle" font-size="11">subspace dimension K</text>'
    )
    for name, kind, dash, v in hlines:
        y = _fmt(py(v))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        parts.append(
            f'<line x1="{x0}" y1="{y}" x2="{x0 + _PANEL_W}" y2="{y}" '
            f'stroke="{_COLORS[kind]}" stroke-width="1.5"{dash_attr}/>'
        )
    for name, kind, dash, pts in curves:
        color = _COLORS[kind]
        if len(pts) > 1:
            coords = " ".join(f"{_fmt(px(k))},{_fmt(py(v))}" for k, v in pts)
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" '
                f'stroke-width="1.5"{dash_attr}/>'
            )
        for k, v in pts:
            parts.append(
                f'<circle cx="{_fmt(px(k))}" cy="{_fmt(py(v))}" r="3" fill="{color}"/>'
            )
    return parts


def render_figure(report: ExperimentReport) -> str:
    """Three-panel SVG: normalized loss, normalized ESS, loss std vs K."""
    ns = sorted({a.n for a in report.aggregates})
    dash_of = {n: _DASHES[i % len(_DASHES)] for i, n in enumerate(ns)}

    def value(a, which):
        # normalized when available; a zero UW mean leaves these unset
        if which == "loss":
            return a.loss_mean if a.norm_loss_mean is None else a.norm_loss_mean
        if which == "ess":
            return a.ess_mean if a.norm_ess_mean is None else a.norm_ess_mean
        return a.loss_std if a.norm_loss_std is None else a.norm_loss_std

    panels = []
    ks = sorted({a.k for a in report.aggregates if a.k is not None})
    for idx, (title, which) in enumerate(
        [("loss", "loss"), ("effective sample size", "ess"), ("loss std", "std")]
    ):
        curves, hlines = [], []
        for n in ns:
            for kind in ("JP", "RP", "SIR"):
                pts = sorted(
                    (a.k, value(a, which))
                    for a in report.aggregates
                    if a.kind == kind and a.n == n
                )
                if pts:
                    curves.append((f"{kind} n={n}", kind, dash_of[n], pts))
            for kind in ("UW", "IW"):
                for a in report.aggregates:
                    if a.kind == kind and a.n == n:
                        hlines.append((f"{kind} n={n}", kind, dash_of[n], value(a, which)))
        x0 = _MARGIN_L + idx * (_PANEL_W + _PANEL_GAP)
        panels.extend(_panel(x0, title, curves, hlines, ks))

    legend = []
    x = _MARGIN_L
    y = _MARGIN_T + _PANEL_H + 56
    seen = []
    for a in report.aggregates:
        key = (a.kind, a.n)
        if key in seen:
            continue
        seen.append(key)
        legend.append(
            f'<line x1="{x}" y1="{y - 4}" x2="{x + 22}" y2="{y - 4}" '
            f'stroke="{_COLORS[a.kind]}" stroke-width="2"'
            + (f' stroke-dasharray="{dash_of[a.n]}"' if dash_of[a.n] else "")
            + "/>"
        )
        legend.append(
            f'<text x="{x + 27}" y="{y}" font-size="11">{a.kind} n={a.n}</text>'
        )
        x += 110

    width = _MARGIN_L + 3 * _PANEL_W + 2 * _PANEL_GAP + 20
    height = y + 20
    body = "\n".join(panels + legend)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>\n'
        f"{body}\n</svg>\n"
    )
