"""Command-line interface: fit, cv, gate, simulate and evaluate.

Every command writes its resolved configuration to ``config.json`` in the
output directory. Precedence is command-line flag, then ``--config`` file,
then built-in default.
"""

import argparse
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from .admm import AdmmOptions, AdmmWarning
from .cv import CvOptions, grid_search
from .cytodata import BinGrid, CytoDataError, bin_series, load_series, write_series
from .em import FitOptions, fit
from .gating import (GatingResult, evaluation_dict, hard_gate, read_labels, soft_gate,
                     write_json)
from .model import Hyperparams, estep, load_model
from .simgen import SimError, apply_delta, build_template, generate
from .study import StudyOptions, options_dict, run_study, summarize, write_rows

log = logging.getLogger("flowtrend")

EXIT_OK, EXIT_ERROR, EXIT_MAXITER = 0, 1, 2

DEFAULTS = {
    "common": {"input": None, "output_dir": ".", "seed": 0, "workers": 1, "plots": True},
    "model": {"k": 2, "l_mu": 0, "l_pi": 0, "lambda_mu": 0.0, "lambda_pi": 0.0, "r": None,
              "restarts": 5, "max_iter": 200, "tol": 1e-6, "uneven": False, "bins": None,
              "rho": 1.0, "adapt_rho": False, "admm_max_iter": 500},
    "cv": {"folds": 5, "n_lambda": 10, "min_ratio": 1e-4,
           "lambda_mu_grid": None, "lambda_pi_grid": None},
    "gate": {"model": None, "mode": "hard"},
    "simulate": {"template": None, "delta": 12, "n_t": 100},
    "evaluate": {"truth": None, "study": False, "deltas": [0, 4, 8, 12], "reps": 5, "n_t": 100,
                 "lambda_mu": 0.1, "lambda_pi": 0.01, "l_mu": 2, "l_pi": 1, "restarts": 3,
                 "template": None},
}

SECTIONS = {
    "fit": ("common", "model"),
    "cv": ("common", "model", "cv"),
    "gate": ("common", "gate"),
    "simulate": ("common", "simulate"),
    "evaluate": ("common", "evaluate"),
}


class CliError(Exception):
    pass


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _add_common(p):
    p.add_argument("--input", help="input CSV (time,y1..yd[,weight])")
    p.add_argument("--output-dir", dest="output_dir", help="directory for outputs")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="worker processes (never changes results)")
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--no-plots", dest="plots", action="store_const", const=False,
                   help="skip figure rendering")


def _add_model(p):
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--lmu", dest="l_mu", type=int, help="trend order of the means")
    p.add_argument("--lpi", dest="l_pi", type=int, help="trend order of the logits")
    p.add_argument("--lambda-mu", dest="lambda_mu", type=float)
    p.add_argument("--lambda-pi", dest="lambda_pi", type=float)
    p.add_argument("--r", type=float, help="radius of the mean ball constraint")
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--uneven", action="store_const", const=True,
                   help="difference operators use actual time spacing")
    p.add_argument("--bins", type=int, help="bin each dimension into this many cells")
    p.add_argument("--rho", type=float)
    p.add_argument("--adapt-rho", dest="adapt_rho", action="store_const", const=True)
    p.add_argument("--admm-max-iter", dest="admm_max_iter", type=int)


def build_parser():
    ap = argparse.ArgumentParser(prog="flowtrend", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model at fixed penalties")
    _add_common(p)
    _add_model(p)

    p = sub.add_parser("cv", help="cross-validate the penalty grid and refit")
    _add_common(p)
    _add_model(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--n-lambda", dest="n_lambda", type=int)
    p.add_argument("--min-ratio", dest="min_ratio", type=float)
    p.add_argument("--lambda-mu-grid", dest="lambda_mu_grid", type=_floats,
                   help="comma-separated explicit grid")
    p.add_argument("--lambda-pi-grid", dest="lambda_pi_grid", type=_floats)

    p = sub.add_parser("gate", help="assign particles to clusters")
    _add_common(p)
    p.add_argument("--model", help="model.json from fit or cv")
    p.add_argument("--mode", choices=["soft", "hard"])

    p = sub.add_parser("simulate", help="generate the two-cluster benchmark")
    _add_common(p)
    p.add_argument("--template", help="template JSON")
    p.add_argument("--delta", type=float)
    p.add_argument("--n-t", dest="n_t", type=int)

    p = sub.add_parser("evaluate", help="Rand index between labelings, or the full study")
    _add_common(p)
    p.add_argument("--truth", help="reference labels CSV")
    p.add_argument("--study", action="store_const", const=True,
                   help="run the simulation study instead")
    p.add_argument("--deltas", type=_ints)
    p.add_argument("--reps", type=int)
    p.add_argument("--n-t", dest="n_t", type=int)
    p.add_argument("--lambda-mu", dest="lambda_mu", type=float)
    p.add_argument("--lambda-pi", dest="lambda_pi", type=float)
    p.add_argument("--lmu", dest="l_mu", type=int)
    p.add_argument("--lpi", dest="l_pi", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--template", help="template JSON")
    return ap


def resolve_config(args):
    """Merge defaults, the config file and explicit flags."""
    cfg = {}
    for sec in SECTIONS[args.command]:
        cfg.update(DEFAULTS[sec])
    if args.config:
        if not os.path.exists(args.config):
            raise CliError("config file not found: %s" % args.config)
        with open(args.config, encoding="utf-8") as fh:
            filecfg = json.load(fh)
        unknown = set(filecfg) - set(cfg)
        if unknown:
            raise CliError("unknown config keys: %s" % ", ".join(sorted(unknown)))
        cfg.update(filecfg)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    return cfg


def _write_config(cfg, out):
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _hyper(cfg):
    r = cfg["r"]
    return Hyperparams(K=cfg["k"], lambda_mu=cfg["lambda_mu"], lambda_pi=cfg["lambda_pi"],
                       l_mu=cfg["l_mu"], l_pi=cfg["l_pi"], r=math.inf if r is None else r)


def _fit_options(cfg):
    admm = AdmmOptions(rho=cfg["rho"], adapt_rho=bool(cfg["adapt_rho"]),
                       max_iter=cfg["admm_max_iter"])
    return FitOptions(tol_em=cfg["tol"], max_em_iter=cfg["max_iter"], n_restarts=cfg["restarts"],
                      seed=cfg["seed"], workers=cfg["workers"], uneven=bool(cfg["uneven"]),
                      admm=admm)


def _load_input(cfg):
    path = cfg["input"]
    if not path:
        raise CliError("--input is required")
    if not os.path.exists(path):
        raise CliError("input file not found: %s" % path)
    s = load_series(path)
    if cfg.get("bins"):
        s = bin_series(s, BinGrid.from_series(s, cfg["bins"]))
    return s


def _write_trace(path, res):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,objective,surrogate\n")
        q = [""] + [repr(float(v)) for v in res.surrogate_trace]
        for i, v in enumerate(res.objective_trace):
            fh.write("%d,%r,%s\n" % (i, float(v), q[i]))


def _fit_outputs(res, s, cfg, out):
    res.save(os.path.join(out, "model.json"))
    _write_trace(os.path.join(out, "objective_trace.csv"), res)
    if cfg["plots"]:
        from .plotting import plot_fit, plot_trace
        plot_fit(s, res.params, os.path.join(out, "fit.png"), seed=cfg["seed"])
        plot_trace(res.objective_trace, os.path.join(out, "objective_trace.png"))
    for w in res.warnings:
        log.warning("%s", w)
    return EXIT_OK if res.converged else EXIT_MAXITER


def cmd_fit(cfg, out):
    s = _load_input(cfg)
    res = fit(s, _hyper(cfg), _fit_options(cfg))
    return _fit_outputs(res, s, cfg, out)


def cmd_cv(cfg, out):
    s = _load_input(cfg)
    copts = CvOptions(M=cfg["folds"], n_lambda_mu=cfg["n_lambda"], n_lambda_pi=cfg["n_lambda"],
                      min_ratio=cfg["min_ratio"], lambda_mu=cfg["lambda_mu_grid"],
                      lambda_pi=cfg["lambda_pi_grid"], workers=cfg["workers"],
                      fit=replace(_fit_options(cfg), workers=1))
    report = grid_search(s, _hyper(cfg), copts)
    report.save(os.path.join(out, "cv_report.json"))
    report.write_surface(os.path.join(out, "score_surface.csv"))
    if cfg["plots"]:
        from .plotting import plot_cv_surface
        plot_cv_surface(report, os.path.join(out, "cv_surface.png"))
    return _fit_outputs(report.refit, s, cfg, out)


def cmd_gate(cfg, out):
    s = _load_input(cfg)
    if not cfg["model"] or not os.path.exists(cfg["model"]):
        raise CliError("model file not found: %s" % cfg["model"])
    p, _, _ = load_model(cfg["model"])
    if p.T != s.T or p.d != s.d:
        raise CliError("model has T=%d, d=%d but data has T=%d, d=%d" % (p.T, p.d, s.T, s.d))
    p = p.replace(times=s.times)
    g = estep(s, p)
    res = soft_gate(g, cfg["seed"]) if cfg["mode"] == "soft" else hard_gate(g)
    res.write_csv(os.path.join(out, "labels.csv"), s.times)
    return EXIT_OK


def cmd_simulate(cfg, out):
    if cfg["template"]:
        if not os.path.exists(cfg["template"]):
            raise CliError("template file not found: %s" % cfg["template"])
        with open(cfg["template"], encoding="utf-8") as fh:
            tmpl = build_template(json.load(fh))
    else:
        tmpl = build_template()
    tmpl = apply_delta(tmpl, cfg["delta"])
    s, truth, labels = generate(tmpl, cfg["n_t"], cfg["seed"])
    write_series(s, os.path.join(out, "series.csv"), weights=False)
    from .model import params_to_dict
    h = Hyperparams(K=2, l_mu=2, l_pi=1)
    write_json(os.path.join(out, "truth.json"),
               params_to_dict(truth, h, seed=cfg["seed"], delta=cfg["delta"],
                              sigma1=tmpl.sigma1, sigma2=tmpl.sigma2))
    GatingResult(labels, "true").write_csv(os.path.join(out, "labels.csv"), s.times)
    if cfg["plots"]:
        from .plotting import plot_fit
        plot_fit(s, truth, os.path.join(out, "sim.png"), seed=cfg["seed"])
    return EXIT_OK


def cmd_evaluate(cfg, out):
    if cfg["study"]:
        tmpl = None
        if cfg["template"]:
            with open(cfg["template"], encoding="utf-8") as fh:
                tmpl = json.load(fh)
        opts = StudyOptions(deltas=tuple(cfg["deltas"]), reps=cfg["reps"], n_t=cfg["n_t"],
                            seed=cfg["seed"], lambda_mu=cfg["lambda_mu"],
                            lambda_pi=cfg["lambda_pi"], l_mu=cfg["l_mu"], l_pi=cfg["l_pi"],
                            restarts=cfg["restarts"], workers=cfg["workers"], template=tmpl)
        rows = run_study(opts)
        summary = summarize(rows)
        write_rows(os.path.join(out, "study.csv"), rows,
                   ["delta", "rep", "model", "rand", "rand_over_oracle", "converged"])
        write_rows(os.path.join(out, "study_summary.csv"), summary,
                   ["delta", "model", "rand", "rand_over_oracle", "n"])
        write_json(os.path.join(out, "study.json"),
                   {"options": options_dict(opts), "rows": rows, "summary": summary})
        if cfg["plots"]:
            from .plotting import plot_study
            plot_study(summary, os.path.join(out, "study.png"))
        return EXIT_OK
    for key in ("input", "truth"):
        if not cfg[key] or not os.path.exists(cfg[key]):
            raise CliError("%s labels file not found: %s" % (key, cfg[key]))
    times, a = read_labels(cfg["input"])
    _, b = read_labels(cfg["truth"])
    metrics = evaluation_dict(a, b)
    write_json(os.path.join(out, "metrics.json"), metrics)
    if cfg["plots"]:
        from .plotting import plot_per_time_rand
        plot_per_time_rand(metrics["per_time_rand"], times, os.path.join(out, "per_time_rand.png"))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "gate": cmd_gate, "simulate": cmd_simulate,
            "evaluate": cmd_evaluate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # inner-solver warnings are already collected on the fit result and logged once
    warnings.simplefilter("ignore", AdmmWarning)
    try:
        cfg = resolve_config(args)
        out = cfg["output_dir"]
        os.makedirs(out, exist_ok=True)
        _write_config(cfg, out)
        return COMMANDS[args.command](cfg, out)
    except (CliError, CytoDataError, SimError, ValueError, RuntimeError, OSError) as e:
        print("flowtrend %s: error: %s" % (args.command, e), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
