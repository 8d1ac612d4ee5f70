"""Seeded sweeps that reproduce the information-scaling and finite-sample experiments.

Every sweep is a list of independent work units (SNR points or Monte-Carlo
trials) evaluated serially or on a process pool and merged in grid order,
so outputs do not depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__
from .information import QuadratureSpec, info_discrepancy, layer_bilinear, observed_fisher
from .models import (
    LatentModel,
    ModelSpec,
    NoiseSpec,
    build_model,
    make_rng,
    sample,
    substream_seed,
)
from .moments import moment_filtration
from .estimators import WeightingChoice, empirical_features, gmom_fit, mle_fit
from .optim import OptOptions
from .plotting import LogLogPlot

__all__ = [
    "SweepConfig",
    "SweepReport",
    "MseReport",
    "SlopeFitError",
    "fit_loglog_slope",
    "run_info_sweep",
    "run_mse_sweep",
    "run_layers_report",
    "write_outputs",
    "parse_estimator",
]

EXPERIMENTS = ("info_sweep", "mse_sweep", "layers", "validate")
SLOPE_FLOOR = 1e3 * np.finfo(float).eps


class SlopeFitError(ValueError):
    pass


def fit_loglog_slope(points: Iterable[tuple[float, float]], floor: float = SLOPE_FLOOR) -> tuple[float, float]:
    """Least-squares slope of ``log y`` against ``log x`` and its ``r^2``.

    Points with ``y < floor`` (or non-positive coordinates) are discarded.
    """
    pts = [(float(x), float(y)) for x, y in points
           if x > 0 and y >= floor and math.isfinite(x) and math.isfinite(y)]
    if len(pts) < 3:
        raise SlopeFitError(f"need at least 3 usable points above {floor:.3g}, got {len(pts)}")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def _logspace(spec) -> list[float]:
    if isinstance(spec, dict):
        return np.logspace(math.log10(spec["start"]), math.log10(spec["stop"]), int(spec["num"])).tolist()
    return [float(v) for v in spec]


@dataclass
class SweepConfig:
    experiment: str
    model: ModelSpec
    snr_grid: list[float] = field(default_factory=lambda: _logspace({"start": 1e-3, "stop": 1e-1, "num": 8}))
    L_list: list[int] = field(default_factory=lambda: [1, 2, 3])
    n_grid: list[int] = field(default_factory=lambda: [10_000, 30_000, 100_000])
    trials: int = 50
    seed: int = 0
    output_dir: str = "out"
    nodes_per_axis: int | None = None
    quad_budget: int = 10**7
    estimators: list[str] = field(default_factory=lambda: ["mle", "gmom_L3_opt", "gmom_L2_opt", "gmom_L3_id"])
    init_radius: float = 0.1
    ridge: float | None = None
    gtol: float = 1e-8
    max_iter: int = 500
    Lmax: int = 6
    tol: float = 1e-9

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        if not self.snr_grid or any(s <= 0 for s in self.snr_grid):
            raise ValueError("snr_grid must be non-empty and positive")
        if not self.L_list or any(L < 1 for L in self.L_list):
            raise ValueError("L_list must be non-empty with entries >= 1")
        if not self.n_grid or any(n < 2 for n in self.n_grid):
            raise ValueError("n_grid must be non-empty with entries >= 2")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for tag in self.estimators:
            parse_estimator(tag)

    @classmethod
    def from_dict(cls, cfg: dict) -> "SweepConfig":
        cfg = dict(cfg)
        model = cfg.pop("model")
        if isinstance(model, str):
            model = {"model": model, **{k: cfg.pop(k) for k in ("d", "K", "theta", "beta", "sigma", "theta_seed",
                                                                   "theta_norm")
                                        if k in cfg}}
        quad = cfg.pop("quadrature", {}) or {}
        kwargs = {k: v for k, v in cfg.items() if k in cls.__dataclass_fields__}
        if "snr_grid" in kwargs:
            kwargs["snr_grid"] = _logspace(kwargs["snr_grid"])
        if "nodes_per_axis" in quad:
            kwargs["nodes_per_axis"] = quad["nodes_per_axis"]
        if "budget" in quad:
            kwargs["quad_budget"] = quad["budget"]
        return cls(model=ModelSpec.from_dict(model), **kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> "SweepConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "model"}
        out["model"] = self.model.to_dict()
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def quad(self, model: LatentModel) -> QuadratureSpec:
        return QuadratureSpec(model.d, self.nodes_per_axis, self.quad_budget)


@dataclass
class SweepReport:
    """Tabular sweep output plus summary metadata and an optional plot."""

    columns: list[str]
    rows: list[list]
    summary: dict
    plot: LogLogPlot | None = None
    seeds: list[int] = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


MseReport = SweepReport


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else str(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def _map(fn: Callable, items: list, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=1))


def _model_and_theta(cfg: SweepConfig) -> tuple[LatentModel, np.ndarray]:
    model = build_model(cfg.model)
    return model, cfg.model.theta_array(model)


# ---------------------------------------------------------------------------
# information sweep
# ---------------------------------------------------------------------------


def _info_unit(args):
    cfg, snr = args
    model, theta = _model_and_theta(cfg)
    noise = NoiseSpec.from_snr(snr, cfg.model.sigma)
    quad = cfg.quad(model)
    fisher = observed_fisher(model, theta, noise, quad)
    return [info_discrepancy(model, theta, noise, L, None, quad, fisher=fisher) for L in cfg.L_list]


def run_info_sweep(cfg: SweepConfig, threads: int = 1) -> SweepReport:
    """Fisher-vs-GMoM discrepancy over the SNR grid for each moment cutoff."""
    model, theta = _model_and_theta(cfg)
    results = _map(_info_unit, [(cfg, s) for s in cfg.snr_grid], threads)
    columns = ["model", "snr", "L", "op_norm_discrepancy", "min_eig_R", "fisher_min_eig",
               "cond_sigma", "theta_seed"]
    rows = []
    for reports in results:
        for rep in reports:
            rows.append([model.name, rep.snr, rep.L, rep.discrepancy_op_norm, rep.R_min_eig,
                         rep.fisher_min_eig, rep.cond_sigma, cfg.model.theta_seed])
    slopes = {}
    plot = LogLogPlot(f"Fisher-GMoM discrepancy: {model.name}", "SNR", "||I_obs - I_GMoM||_op")
    for j, L in enumerate(cfg.L_list):
        pts = [(r[j].snr, r[j].discrepancy_op_norm) for r in results]
        try:
            slope, r2 = fit_loglog_slope(pts)
            slopes[str(L)] = {"slope": slope, "r2": r2, "expected": L + 1}
        except SlopeFitError:
            slopes[str(L)] = {"slope": None, "r2": None, "expected": L + 1}
        plot.add(f"L={L}", *zip(*pts))
        usable = [p for p in pts if p[1] >= SLOPE_FLOOR]
        if usable:
            plot.add_reference(f"slope {L + 1}", [p[0] for p in pts], L + 1, *usable[-1])
    summary = {
        "experiment": "info_sweep",
        "model": model.name,
        "theta": theta.tolist(),
        "slopes": slopes,
        "min_R_eig": min(r.R_min_eig for rs in results for r in rs),
        "fisher_min_eig_slope": _safe_slope([(rs[0].snr, rs[0].fisher_min_eig) for rs in results]),
    }
    return SweepReport(columns, rows, summary, plot, seeds=[cfg.model.theta_seed])


def _safe_slope(pts):
    try:
        slope, r2 = fit_loglog_slope(pts)
        return {"slope": slope, "r2": r2}
    except SlopeFitError:
        return {"slope": None, "r2": None}


# ---------------------------------------------------------------------------
# finite-sample MSE sweep
# ---------------------------------------------------------------------------

_EST_RE = re.compile(r"^gmom_L(\d+)_(opt|id)$")


def parse_estimator(tag: str) -> tuple[str, int | None, str | None]:
    """``"mle"`` or ``"gmom_L<k>_<opt|id>"`` -> (kind, L, weighting)."""
    if tag == "mle":
        return "mle", None, None
    m = _EST_RE.match(tag)
    if not m:
        raise ValueError(f"unknown estimator tag {tag!r}")
    return "gmom", int(m.group(1)), m.group(2)


def truth_perturbed_init(theta, radius_frac: float, seed: int) -> np.ndarray:
    """``theta + radius_frac * ||theta|| * u`` for a seeded uniform unit direction ``u``."""
    theta = np.asarray(theta, dtype=float)
    u = make_rng(seed, 1).standard_normal(theta.size)
    return theta + radius_frac * np.linalg.norm(theta) * u / np.linalg.norm(u)


def _mse_unit(args):
    cfg, i_snr, i_n, trial = args
    model, theta = _model_and_theta(cfg)
    snr, n = cfg.snr_grid[i_snr], cfg.n_grid[i_n]
    noise = NoiseSpec.from_snr(snr, cfg.model.sigma)
    seed = substream_seed(cfg.seed, i_snr, i_n, trial)
    data = sample(model, theta, noise, n, seed)
    init = truth_perturbed_init(theta, cfg.init_radius, seed)
    opts = OptOptions(gtol=cfg.gtol, max_iter=cfg.max_iter)
    feats: dict[int, tuple] = {}
    out = []
    for tag in cfg.estimators:
        kind, L, wkind = parse_estimator(tag)
        if kind == "mle":
            fit = mle_fit(data, model, noise, init, opts, reference=theta)
        else:
            if L not in feats:
                feats[L] = empirical_features(data, noise.sigma, L)
            w = WeightingChoice.optimal(cfg.ridge) if wkind == "opt" else WeightingChoice.identity()
            fit = gmom_fit(data, model, noise, L, w, init, opts, reference=theta, features=feats[L])
        out.append((tag, seed, fit.d_eq_to_ref**2, fit.converged, fit.iterations))
    return out


def run_mse_sweep(cfg: SweepConfig, threads: int = 1) -> SweepReport:
    """Aligned normalized MSE of each estimator over the (SNR, n) grid."""
    model, theta = _model_and_theta(cfg)
    norm2 = float(theta @ theta)
    units = [(cfg, i, j, t) for i in range(len(cfg.snr_grid)) for j in range(len(cfg.n_grid))
             for t in range(cfg.trials)]
    results = _map(_mse_unit, units, threads)

    columns = ["estimator", "snr", "n", "trial", "seed", "sq_error_normalized", "converged", "iterations"]
    rows = []
    acc: dict[tuple, list] = {}
    failed: dict[tuple, int] = {}
    for (_, i, j, t), res in zip(units, results):
        snr, n = cfg.snr_grid[i], cfg.n_grid[j]
        for tag, seed, sq, conv, iters in res:
            rows.append([tag, snr, n, t, seed, sq / norm2, conv, iters])
            key = (tag, i, j)
            if conv:
                acc.setdefault(key, []).append(sq / norm2)
            else:
                failed[key] = failed.get(key, 0) + 1

    table = []
    for tag in cfg.estimators:
        for i, snr in enumerate(cfg.snr_grid):
            for j, n in enumerate(cfg.n_grid):
                vals = np.asarray(acc.get((tag, i, j), []))
                mse = float(vals.mean()) if vals.size else float("nan")
                se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
                table.append({"estimator": tag, "snr": snr, "n": n, "mse": mse, "std_error": se,
                              "trials": int(vals.size), "failed": failed.get((tag, i, j), 0)})

    slopes: dict[str, dict] = {}
    for tag in cfg.estimators:
        for snr in cfg.snr_grid:
            pts = [(r["n"], r["mse"]) for r in table if r["estimator"] == tag and r["snr"] == snr]
            slopes.setdefault(tag, {})[repr(snr)] = _safe_slope(pts) if len(pts) >= 3 else {"slope": None, "r2": None}

    snr_plot = cfg.snr_grid[0]
    plot = LogLogPlot(f"Aligned MSE vs n: {model.name}, SNR={snr_plot:g}", "n", "normalized MSE")
    for tag in cfg.estimators:
        pts = [(r["n"], r["mse"]) for r in table if r["estimator"] == tag and r["snr"] == snr_plot]
        plot.add(tag, *zip(*pts))
    ref = [(r["n"], r["mse"]) for r in table if r["snr"] == snr_plot and math.isfinite(r["mse"])]
    if len(cfg.n_grid) > 1 and ref:
        plot.add_reference("n^-1", cfg.n_grid, -1.0, *ref[0])

    summary = {
        "experiment": "mse_sweep",
        "model": model.name,
        "theta": theta.tolist(),
        "table": table,
        "n_slopes": slopes,
        "failed_total": int(sum(failed.values())),
    }
    return SweepReport(columns, rows, summary, plot, seeds=sorted({r[4] for r in rows}))


# ---------------------------------------------------------------------------
# layers report
# ---------------------------------------------------------------------------


def run_layers_report(cfg: SweepConfig, threads: int = 1) -> SweepReport:
    """Informative-layer decomposition and diagonal leading-term ratios over the SNR grid."""
    model, theta = _model_and_theta(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        filt = moment_filtration(model, theta, cfg.Lmax, cfg.tol)
    quad = cfg.quad(model)
    fishers = _map(_fisher_unit, [(cfg, s) for s in cfg.snr_grid], threads)

    columns = ["model", "snr", "layer", "value", "prediction", "ratio", "fisher_min_eig"]
    rows = []
    for snr, F in zip(cfg.snr_grid, fishers):
        noise = NoiseSpec.from_snr(snr, cfg.model.sigma)
        lam = float(np.linalg.eigvalsh(F)[0])
        for k, U in enumerate(filt.Ubases, start=1):
            if U.shape[1] == 0:
                continue
            val, pred = layer_bilinear(model, theta, noise, U[:, 0], U[:, 0], filt, quad, fisher=F)
            rows.append([model.name, snr, k, val, pred, val / pred if pred else float("nan"), lam])

    plot = LogLogPlot(f"Layer scaling: {model.name}", "SNR", "<h, I_obs h>")
    for k, U in enumerate(filt.Ubases, start=1):
        pts = [(r[1], r[3]) for r in rows if r[2] == k]
        if pts:
            plot.add(f"U_{k}", *zip(*pts))
    summary = {
        "experiment": "layers",
        "model": model.name,
        "theta": theta.tolist(),
        "filtration": filt.to_dict(),
        "dims": filt.dims,
        "r_loc": None if math.isinf(filt.r_loc) else int(filt.r_loc),
        "fisher_min_eig_slope": _safe_slope([(r[1], r[6]) for r in rows if r[2] == rows[0][2]])
        if rows else None,
    }
    return SweepReport(columns, rows, summary, plot, seeds=[cfg.model.theta_seed])


def _fisher_unit(args):
    cfg, snr = args
    model, theta = _model_and_theta(cfg)
    return observed_fisher(model, theta, NoiseSpec.from_snr(snr, cfg.model.sigma), cfg.quad(model))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def write_outputs(report: SweepReport, cfg: SweepConfig, out_dir: str | Path) -> Path:
    """Write ``report.csv``, ``report.json``, ``plot.svg`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.csv_text())
    (out / "report.json").write_text(json.dumps(_clean(report.summary), indent=2, sort_keys=True) + "\n")
    if report.plot is not None:
        (out / "plot.svg").write_text(report.plot.to_svg())
    manifest = {
        "tool": "lowsnr-gmom",
        "version": __version__,
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "config_sha256": cfg.config_hash(),
        "seed": cfg.seed,
        "substream_seeds": report.seeds,
    }
    (out / "manifest.json").write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n")
    return out


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
