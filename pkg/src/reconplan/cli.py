"""Command-line interface.

Subcommands: optimize, evaluate, register, pcsa, sensitivity, validate,
report. Every run that writes artifacts also writes a ``manifest.json``
(config hash, tool version, timestamps, exit status) atomically at the end;
all other outputs are byte-reproducible from the configuration and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, bayesopt
from .anatomy import AnatomyError, max_force, pcsa_estimate
from .cases import CaseError, load_case, make_evaluator
from .design import COMPONENT_NAMES, DesignError, DesignVector
from .evaluator import EvaluatorError
from .geometry import GeometryError, Plane
from .meshio import read_mesh
from .objective import ObjectiveWeights, f_opt, f_sf
from .personalize import PersonalizeError, build_patient_parameters
from .registration import RegistrationError, extract_scs
from .runio import RunManifest, config_hash, write_csv

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _parse_phi(text: str, dims: int) -> DesignVector:
    try:
        values = [float(tok) for tok in text.split(",")]
    except ValueError as exc:
        raise DesignError(f"bad --phi value: {exc}") from exc
    if len(values) != dims:
        raise DesignError(f"--phi needs {dims} comma-separated values for this case")
    return DesignVector.from_array(values)


def _parse_seeds(text: str) -> tuple:
    if "," in text:
        return tuple(int(t) for t in text.split(","))
    return tuple(range(int(text)))


def _weights(args) -> ObjectiveWeights:
    return ObjectiveWeights(
        w1=args.w1, w2=args.w2, w_side=args.w_side,
        sf_desired=args.sf_desired, ordered_pairs=args.ordered_pairs,
    )


def _add_weight_flags(parser):
    parser.add_argument("--w1", type=float, default=0.5)
    parser.add_argument("--w2", type=float, default=0.5)
    parser.add_argument("--w-side", dest="w_side", type=float, default=0.5)
    parser.add_argument("--sf-desired", dest="sf_desired", type=float, default=1.0)
    parser.add_argument("--ordered-pairs", dest="ordered_pairs", action="store_true",
                        help="count each interface pair twice in the imbalance penalty")


def _component_names(dims: int) -> list:
    return list(COMPONENT_NAMES[:dims])


def _trace_header(dims: int) -> list:
    names = _component_names(dims)
    return (
        ["index", "phase", "iteration"]
        + names
        + [f"norm_{n}" for n in names]
        + ["y", "best_so_far", "ei", "safeguard_rounds", "safeguard_capped", "sigma_f"]
        + [f"ls_{n}" for n in names]
        + ["noise_var"]
    )


def _trace_rows(trace, region):
    for rec in trace.records:
        raw = rec.phi.to_array()
        norm = region.normalize(rec.phi)
        ls = rec.lengthscales if rec.lengthscales is not None else [""] * region.dims
        yield (
            [rec.index, rec.phase, rec.iteration]
            + list(raw)
            + list(norm)
            + [
                rec.y,
                rec.best_so_far,
                rec.ei if rec.ei is not None else "",
                rec.safeguard_rounds,
                rec.safeguard_capped,
                rec.sigma_f if rec.sigma_f is not None else "",
            ]
            + list(ls)
            + [rec.noise_var if rec.noise_var is not None else ""]
        )


def _write_parallel_coordinates(path, traces, region):
    names = _component_names(region.dims)
    rows = []
    for trace in traces:
        for rec in trace.records:
            rows.append(
                [trace.seed, rec.index] + list(region.normalize(rec.phi)) + [-rec.y]
            )
    scores = sorted((r[-1] for r in rows), reverse=True)
    cutoff = scores[max(0, (len(scores) + 9) // 10 - 1)] if scores else 0.0
    header = ["seed", "index"] + [f"norm_{n}" for n in names] + ["score", "top_decile"]
    write_csv(path, header, [r + [1 if r[-1] >= cutoff else 0] for r in rows])


def _cmd_optimize(args) -> int:
    bundle = load_case(args.case)
    evaluator = make_evaluator(bundle)
    config = bayesopt.BoConfig(
        n_sobol=args.sobol,
        n_iterations=args.iters,
        seeds=_parse_seeds(args.seeds),
        t_sigma=args.t_sigma,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="optimize",
        argv=sys.argv[1:],
        config_hash=config_hash({"case": bundle.raw, "objective": args.objective,
                                 "seeds": list(config.seeds), "iters": config.n_iterations,
                                 "sobol": config.n_sobol}),
    )
    result = bayesopt.run(evaluator, args.objective, _weights(args), config, threads=args.threads)
    region = bundle.region
    for trace in result.traces:
        if trace.records:
            write_csv(out / f"trace_seed{trace.seed}.csv", _trace_header(region.dims),
                      _trace_rows(trace, region))
    _write_parallel_coordinates(out / "parallel_coordinates.csv", result.completed(), region)
    summary = {
        "case": bundle.name,
        "objective": args.objective,
        "seeds": list(config.seeds),
        "best_losses": {str(k): v for k, v in result.best_losses().items()},
        "best_scores": {str(k): -v for k, v in result.best_losses().items()},
        "best_designs": {
            str(k): dict(zip(_component_names(region.dims), phi.to_array().tolist()))
            for k, phi in result.best_designs().items()
        },
        "aggregate_best_so_far": result.aggregate(),
        "errors": {str(t.seed): t.error for t in result.traces if t.error},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest.finalize(0)
    manifest.write(out / "manifest.json")
    print(f"optimize: {len(result.completed())}/{len(result.traces)} seeds completed -> {out}")
    return 0 if not summary["errors"] else FAILURE_EXIT


def _cmd_evaluate(args) -> int:
    bundle = load_case(args.case)
    evaluator = make_evaluator(bundle)
    phi = _parse_phi(args.phi, bundle.region.dims) if args.phi else bundle.region.baseline()
    result = evaluator.evaluate(phi)
    weights = _weights(args)
    averages = result.averages()
    payload = {
        "case": bundle.name,
        "phi": dict(zip(_component_names(bundle.region.dims), phi.to_array().tolist())),
        "cycle_averaged_apposition": averages,
        "f_opt": f_opt(averages, weights),
        "f_sf": f_sf(averages, result.sf_worst, weights),
        "min_sf_worst": {side: float(np.min(tr)) for side, tr in result.sf_worst.items()},
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "evaluation.json").write_text(text + "\n")
        manifest = RunManifest(command="evaluate", argv=sys.argv[1:],
                               config_hash=config_hash({"case": bundle.raw, "phi": args.phi}))
        manifest.finalize(0)
        manifest.write(out / "manifest.json")
    return 0


def _cmd_register(args) -> int:
    params = build_patient_parameters(
        args.bundle,
        cpd_beta=args.beta,
        cpd_lambda=args.cpd_lambda,
        w_outlier=args.outlier_weight,
        max_iters=args.max_iters,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    print(f"register: wrote {out}")
    return 0


def _cmd_pcsa(args) -> int:
    if args.scs is None and args.mesh is None:
        raise AnatomyError("pcsa needs either --scs or --mesh with plane flags")
    if args.scs is not None:
        scs = args.scs
        protocol = None
    else:
        mesh = read_mesh(args.mesh)
        plane = Plane.from_normal(
            [float(t) for t in args.plane_origin.split(",")],
            [float(t) for t in args.plane_normal.split(",")],
        )
        result = extract_scs(mesh, plane)
        scs = result.area_cm2
        protocol = {"offset_mm": result.offset_mm,
                    "areas": {str(k): v for k, v in sorted(result.areas.items())}}
    est = pcsa_estimate(scs, args.group)
    payload = {
        "group": args.group,
        "scs_cm2": scs,
        "pcsa": {"wpcs": est.wpcs, "bpcs": est.bpcs, "mean": est.mean},
        "max_forces_n": max_force(est.mean, args.group),
    }
    if protocol:
        payload["scs_protocol"] = protocol
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_sensitivity(args) -> int:
    case_paths = [p for chunk in args.cases for p in chunk.split(",") if p]
    spec = analysis.SensitivitySpec(perturbation=args.perturbation, repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run_case(path):
        bundle = load_case(path)
        if bundle.synthetic_config is None:
            raise CaseError(f"sensitivity requires the synthetic evaluator ({bundle.name})")
        baseline = (
            _parse_phi(args.baseline, bundle.region.dims)
            if args.baseline
            else bundle.region.baseline()
        )
        region = bundle.region
        return analysis.sensitivity_run(
            bundle.name,
            lambda cfg: make_evaluator(bundle, cfg),
            bundle.synthetic_config,
            baseline,
            spec,
            _weights(args),
        )

    if args.threads > 1 and len(case_paths) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            per_case = list(pool.map(run_case, case_paths))
    else:
        per_case = [run_case(p) for p in case_paths]

    rows = []
    total_evals = 0
    for cells in per_case:
        for c in cells:
            rows.append([c.case, c.parameter, c.direction, c.factor,
                         c.mean_relative_change if c.mean_relative_change is not None else "",
                         c.n_evaluations, c.error or ""])
            total_evals += c.n_evaluations if c.error is None else 0
    write_csv(out / "sensitivity.csv",
              ["case", "parameter", "direction", "factor", "mean_relative_change",
               "n_evaluations", "error"],
              rows)
    manifest = RunManifest(command="sensitivity", argv=sys.argv[1:],
                           config_hash=config_hash({"cases": case_paths,
                                                    "perturbation": args.perturbation,
                                                    "repeats": args.repeats}))
    manifest.finalize(0)
    manifest.write(out / "manifest.json")
    print(f"sensitivity: {len(rows)} cells, {total_evals} evaluations -> {out}")
    return 0


def _cmd_validate(args) -> int:
    if len(args.predicted) != len(args.observed):
        raise analysis.AnalysisError("--predicted-mask and --observed-mask counts differ")
    labels = args.label or [f"pair{i}" for i in range(len(args.predicted))]
    if len(labels) != len(args.predicted):
        raise analysis.AnalysisError("--label count must match the mask pairs")
    scores = {}
    for label, pred, obs in zip(labels, args.predicted, args.observed):
        scores[label] = analysis.dice(analysis.load_mask(pred), analysis.load_mask(obs))
    print(json.dumps({"dice": scores}, indent=2, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    runs = Path(args.runs)
    traces = sorted(runs.glob("trace_seed*.csv"))
    if not traces:
        raise analysis.AnalysisError(f"no trace_seed*.csv files under {runs}")
    curves = []
    pooled = []
    header = None
    for path in traces:
        rows = path.read_text().strip().splitlines()
        header = rows[0].split(",")
        body = [r.split(",") for r in rows[1:]]
        phase_i = header.index("phase")
        best_i = header.index("best_so_far")
        y_i = header.index("y")
        norm_cols = [i for i, h in enumerate(header) if h.startswith("norm_")]
        curves.append([float(r[best_i]) for r in body if r[phase_i] == "bo"])
        for r in body:
            pooled.append([path.stem] + [float(r[i]) for i in norm_cols] + [-float(r[y_i])])
    summary = analysis.convergence_summary([c for c in curves if c])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "convergence_summary.csv", ["iteration", "mean_best_so_far", "std_best_so_far"],
              zip(summary["iterations"], summary["mean"], summary["std"]))
    scores = sorted((r[-1] for r in pooled), reverse=True)
    cutoff = scores[max(0, (len(scores) + 9) // 10 - 1)]
    norm_names = [h for h in header if h.startswith("norm_")]
    write_csv(out / "parallel_coordinates.csv",
              ["trace"] + norm_names + ["score", "top_decile"],
              [r + [1 if r[-1] >= cutoff else 0] for r in pooled])
    print(f"report: {len(traces)} traces -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reconplan",
                                     description="Reconstruction planning optimization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="multi-seed Bayesian optimization of a case")
    p.add_argument("--case", required=True)
    p.add_argument("--objective", choices=["fopt", "fsf"], default="fopt")
    p.add_argument("--seeds", default="5", help="seed count or comma-separated seed list")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--sobol", type=int, default=25)
    p.add_argument("--t-sigma", dest="t_sigma", type=float, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_weight_flags(p)
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("evaluate", help="score one design vector")
    p.add_argument("--case", required=True)
    p.add_argument("--phi", default="", help="comma-separated components; default baseline zeros")
    p.add_argument("--out", default="")
    _add_weight_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("register", help="template-to-patient personalization on a bundle directory")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--cpd-lambda", dest="cpd_lambda", type=float, default=2.0)
    p.add_argument("--outlier-weight", dest="outlier_weight", type=float, default=0.1)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=150)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("pcsa", help="PCSA and branch forces from a scan cross section")
    p.add_argument("--group", required=True,
                   choices=["masseter", "temporalis", "medial_pterygoid", "lateral_pterygoid"])
    p.add_argument("--scs", type=float, default=None, help="measured section area, cm^2")
    p.add_argument("--mesh", default=None, help="muscle surface mesh for the plane protocol")
    p.add_argument("--plane-origin", dest="plane_origin", default="0,0,0")
    p.add_argument("--plane-normal", dest="plane_normal", default="0,0,1")
    p.set_defaults(func=_cmd_pcsa)

    p = sub.add_parser("sensitivity", help="perturbation sweep over the model parameters")
    p.add_argument("--cases", action="append", required=True,
                   help="case file(s); repeatable or comma-separated")
    p.add_argument("--baseline", default="", help="design at which to evaluate; default zeros")
    p.add_argument("--perturbation", type=float, default=0.10)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_weight_flags(p)
    p.set_defaults(func=_cmd_sensitivity)

    p = sub.add_parser("validate", help="Dice overlap between predicted and observed masks")
    p.add_argument("--predicted-mask", dest="predicted", action="append", required=True)
    p.add_argument("--observed-mask", dest="observed", action="append", required=True)
    p.add_argument("--label", action="append")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("report", help="summaries from existing optimization traces")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CaseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (DesignError, GeometryError, EvaluatorError, RegistrationError,
            PersonalizeError, AnatomyError, analysis.AnalysisError,
            bayesopt.BoError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
