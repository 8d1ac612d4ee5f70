"""Command-line entry point: ``lowsnr-gmom <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .estimators import WeightingChoice, gmom_fit, mle_fit
from .experiments import (
    SweepConfig,
    run_info_sweep,
    run_layers_report,
    run_mse_sweep,
    truth_perturbed_init,
    write_outputs,
)
from .models import ModelSpec, NoiseSpec, build_model, sample
from .optim import OptOptions
from .validation import run_validation

log = logging.getLogger("lowsnr_gmom")

RUNNERS = {
    "info-sweep": ("info_sweep", run_info_sweep),
    "mse-sweep": ("mse_sweep", run_mse_sweep),
    "layers": ("layers", run_layers_report),
}


def _parse_init(text: str) -> float:
    kind, _, radius = text.partition(":")
    if kind != "truth-perturbed":
        raise argparse.ArgumentTypeError("init must look like truth-perturbed:<radius>")
    return float(radius or 0.1)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowsnr-gmom", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name in RUNNERS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", required=True, help="sweep configuration (JSON)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes")
        sp.add_argument("--seed", type=int, help="override the master seed")

    sp = sub.add_parser("validate", help="run the cross-module invariant suite")
    sp.add_argument("--config", help="accepted for symmetry; unused")
    sp.add_argument("--out")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("fit", help="simulate one dataset and fit it")
    sp.add_argument("--model-config", required=True, help="model JSON (model, d, K, theta, beta, sigma)")
    sp.add_argument("--n", type=int, default=10_000)
    sp.add_argument("--snr", type=float, help="override beta via beta = sqrt(snr) * sigma")
    sp.add_argument("--L", type=int, default=3)
    sp.add_argument("--estimator", choices=["gmom", "mle"], default="gmom")
    sp.add_argument("--weighting", choices=["optimal", "identity"], default="optimal")
    sp.add_argument("--ridge", type=float)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--init", type=_parse_init, default=0.1, metavar="truth-perturbed:<radius>")
    return p


def _run_sweep(args) -> int:
    experiment, runner = RUNNERS[args.command]
    cfg_dict = json.loads(Path(args.config).read_text())
    cfg_dict["experiment"] = experiment
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = SweepConfig.from_dict(cfg_dict)
    out_dir = Path(args.out or cfg.output_dir)
    report = runner(cfg, threads=args.threads)
    write_outputs(report, cfg, out_dir)
    print(json.dumps(_headline(report.summary), indent=2))
    print(f"wrote {out_dir}/report.csv, report.json, plot.svg, manifest.json")
    return 0


def _headline(summary: dict) -> dict:
    keys = ("experiment", "model", "slopes", "min_R_eig", "n_slopes", "dims", "r_loc",
            "fisher_min_eig_slope", "failed_total")
    return {k: summary[k] for k in keys if k in summary}


def _run_validate(args) -> int:
    results = run_validation()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validate.json").write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results], indent=2) + "\n")
    return 1 if failed else 0


def _run_fit(args) -> int:
    spec = ModelSpec.from_json(args.model_config)
    model = build_model(spec)
    theta = spec.theta_array(model)
    noise = NoiseSpec.from_snr(args.snr, spec.sigma) if args.snr is not None else spec.noise()
    data = sample(model, theta, noise, args.n, args.seed)
    init = truth_perturbed_init(theta, args.init, args.seed)
    opts = OptOptions()
    if args.estimator == "mle":
        fit = mle_fit(data, model, noise, init, opts, reference=theta)
    else:
        w = (WeightingChoice.optimal(args.ridge) if args.weighting == "optimal"
             else WeightingChoice.identity())
        fit = gmom_fit(data, model, noise, args.L, w, init, opts, reference=theta)
    out = fit.to_dict()
    out.pop("trace")
    out["theta_star"] = np.asarray(theta).tolist()
    out["normalized_sq_error"] = fit.d_eq_to_ref**2 / float(theta @ theta)
    print(json.dumps(out, indent=2))
    return 0 if fit.converged else 2


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in RUNNERS:
        return _run_sweep(args)
    if args.command == "validate":
        return _run_validate(args)
    return _run_fit(args)


if __name__ == "__main__":
    sys.exit(main())
