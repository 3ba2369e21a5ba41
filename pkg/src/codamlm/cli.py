"""Batch command line: transform, fit, substitute, simulate, diagnose.

Every run writes its artifacts plus a ``manifest.json`` carrying the
package version, the seed and a hash of the resolved configuration, so a
run can be identified and reproduced exactly.  Exit codes are part of
the contract: 0 success, 2 usage error, 3 data error, 4 sampling error,
5 diagnostics threshold breach.

A JSON config file passed via ``--config`` supplies defaults for any
long flag of the chosen subcommand; explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .basis import build_basis, default_sbp, read_sbp, validate_sbp
from .composition import Composition
from .data import between_within_split, ingest
from .diagnostics import ESS_THRESHOLD, RHAT_THRESHOLD, diagnose
from .errors import DataError, SamplingError
from .model import ModelSpec, SamplerConfig, build_design, default_priors, fit
from .posterior import draws_from_csv, draws_to_csv, summarize
from .simulate import default_study_config, full_scale_study_config, run_study
from .substitution import SubstitutionGrid, estimate_delta, reference

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_SAMPLING = 4
EXIT_DIAGNOSTICS = 5


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text}") from None
    if not (np.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(f"must be a positive number: {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text}")
    return value


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text}") from None
    if not (0.0 < value < 1.0):
        raise argparse.ArgumentTypeError(f"must be strictly between 0 and 1: {text}")
    return value


def _comma_list(text: str) -> tuple[str, ...]:
    items = tuple(s.strip() for s in text.split(",") if s.strip())
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV with a header row")
    p.add_argument("--id", required=True, help="cluster identifier column")
    p.add_argument("--outcome", required=True, help="outcome column")
    p.add_argument("--parts", required=True, type=_comma_list, help="comma-separated part columns")
    p.add_argument("--covariates", type=_comma_list, default=(), help="comma-separated covariate columns")
    p.add_argument("--total", required=True, type=_positive_float, help="constant sum of the parts (e.g. 1440)")
    p.add_argument("--sbp", default=None, help="partition matrix file; omit for the pivot default")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=_positive_int, default=1, help="worker processes")
    p.add_argument("--config", default=None, help="JSON file with default flag values")


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=_positive_int, default=4)
    p.add_argument("--warmup", type=_positive_int, default=500)
    p.add_argument("--iter", type=_positive_int, default=2500, dest="iterations",
                   help="post-warmup iterations per chain")
    p.add_argument("--adapt-delta", type=_fraction, default=0.8, dest="adapt_delta")
    p.add_argument("--parameterization", choices=("centered", "noncentered"), default="noncentered")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codamlm",
        description="Bayesian multilevel compositional analysis pipeline",
    )
    parser.add_argument("--version", action="version", version=f"codamlm {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("transform", help="decompose a data set into between/within coordinates")
    _add_data_flags(p)
    _add_common_flags(p)

    p = sub.add_parser("fit", help="fit the random-intercept compositional model")
    _add_data_flags(p)
    _add_common_flags(p)
    _add_sampler_flags(p)

    p = sub.add_parser("substitute", help="reallocation analysis from a saved fit")
    p.add_argument("--fit", required=True, dest="fit_dir", help="directory written by the fit command")
    p.add_argument("--level", choices=("between", "within", "both"), default="both")
    p.add_argument("--t-min", type=_positive_float, default=1.0, dest="t_min")
    p.add_argument("--t-max", type=_positive_float, default=30.0, dest="t_max")
    p.add_argument("--ref", default="mean",
                   help="'mean' for the sample compositional mean, or a composition file")
    p.add_argument("--within-mode", choices=("absolute", "proportional"), default="absolute",
                   dest="within_mode",
                   help="how within-level amounts are applied (absolute units by default)")
    _add_common_flags(p)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("--study", default=None, help="study configuration JSON")
    p.add_argument("--write-default-study", default=None, dest="write_default_study",
                   help="write an editable study configuration and exit")
    p.add_argument("--scale", choices=("desk", "full"), default="desk",
                   help="template written by --write-default-study: one desk-size "
                        "cell or the complete 240-condition design")
    _add_common_flags(p)

    p = sub.add_parser("diagnose", help="convergence report for a saved fit")
    p.add_argument("--fit", required=True, dest="fit_dir", help="directory written by the fit command")
    p.add_argument("--config", default=None, help="JSON file with default flag values")
    return parser


def _apply_config_file(argv: list[str], parser: argparse.ArgumentParser) -> list[str]:
    """Turn config-file entries into leading flags so explicit flags win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        parser.error("--config needs a file path")
    path = Path(argv[idx + 1])
    if not path.is_file():
        parser.error(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        parser.error(f"config file is not valid JSON: {exc}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object of flag values")
    subcommand = argv[0] if argv else ""
    injected: list[str] = []
    for key, value in values.items():
        flag = "--" + str(key).replace("_", "-")
        if f"--{key}" in argv or flag in argv:
            continue
        if isinstance(value, bool):
            parser.error(f"config key {key} must carry a value, not a boolean")
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        injected.extend([flag, str(value)])
    return [subcommand, *injected, *argv[1:]]


def _manifest(args: argparse.Namespace, out_dir: Path) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("config",)}
    for k, v in config.items():
        if isinstance(v, tuple):
            config[k] = list(v)
    payload = json.dumps(config, sort_keys=True)
    manifest = {
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": config,
        "config_hash": hashlib.sha256(payload.encode("utf-8")).hexdigest(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_table(args: argparse.Namespace):
    path = Path(args.data)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    frame = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    table = ingest(
        frame,
        id_column=args.id,
        part_columns=args.parts,
        outcome_column=args.outcome,
        total=args.total,
        covariate_columns=args.covariates,
    )
    for line in table.report.lines():
        print(line, file=sys.stderr)
    return table


def _load_basis(args: argparse.Namespace, part_names):
    if args.sbp:
        sbp = read_sbp(args.sbp, part_names=part_names)
        if sbp.n_parts != len(part_names):
            raise DataError(
                f"SBP file has {sbp.n_parts} parts but {len(part_names)} part columns were given"
            )
    else:
        sbp = default_sbp(len(part_names), part_names)
    return build_basis(sbp)


def _write_coordinates(path: Path, table, coords) -> None:
    k = coords.n_coords
    header = (
        ["cluster", "outcome"]
        + list(table.covariate_names)
        + [f"z{i + 1}" for i in range(k)]
        + [f"zb{i + 1}" for i in range(k)]
        + [f"zw{i + 1}" for i in range(k)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        zb_rows = coords.z_between[coords.cluster_index]
        for i in range(table.n_rows):
            row = [table.cluster_labels[table.cluster_index[i]], repr(float(table.outcome[i]))]
            if table.covariates is not None:
                row += [repr(float(v)) for v in table.covariates[i]]
            row += [repr(float(v)) for v in coords.z_total[i]]
            row += [repr(float(v)) for v in zb_rows[i]]
            row += [repr(float(v)) for v in coords.z_within[i]]
            writer.writerow(row)


def basis_sbp_matrix(basis) -> np.ndarray:
    """Recover the sign matrix from a contrast matrix."""
    return np.sign(basis.contrast).astype(int)


def _cmd_transform(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _load_table(args)
    basis = _load_basis(args, table.part_names)
    coords = between_within_split(table, basis)
    _write_coordinates(out_dir / "coordinates.csv", table, coords)
    _manifest(args, out_dir)
    print(f"wrote {out_dir / 'coordinates.csv'}")
    return EXIT_OK


def _summary_payload(args, table, basis, spec, priors, draws, report):
    ref = reference(between_within_split(table, basis), basis)
    parameters = []
    for name in draws.names:
        s = summarize(draws, name)
        d = report.per_parameter[name]
        parameters.append(
            {
                "name": name,
                "mean": s.mean,
                "median": s.median,
                "ci_low": s.ci_low,
                "ci_high": s.ci_high,
                "significant": s.significant,
                "rhat": None if np.isnan(d.rhat) else d.rhat,
                "ess_bulk": None if np.isnan(d.ess_bulk) else d.ess_bulk,
                "ess_tail": None if np.isnan(d.ess_tail) else d.ess_tail,
            }
        )
    return {
        "model": {
            "outcome": args.outcome,
            "part_names": list(table.part_names),
            "total": table.total,
            "sbp": [[int(v) for v in row] for row in basis_sbp_matrix(basis)],
            "covariates": list(spec.covariates),
            "n_clusters": table.n_clusters,
            "n_rows": table.n_rows,
            "reference_mean": [float(v) for v in ref.composition.parts],
        },
        "priors": {
            "intercept": ["student_t", priors.intercept.nu, priors.intercept.loc, priors.intercept.scale],
            "coefficients": ["flat"],
            "sd_intercept": ["half_student_t", priors.sd_intercept.nu, priors.sd_intercept.scale],
            "sd_residual": ["half_student_t", priors.sd_residual.nu, priors.sd_residual.scale],
        },
        "sampler": {
            "chains": draws.config.chains,
            "warmup": draws.config.warmup,
            "iterations": draws.config.iterations,
            "seed": draws.config.seed,
            "adapt_target": draws.config.adapt_target,
            "max_depth": draws.config.max_depth,
            "parameterization": draws.config.parameterization,
        },
        "parameters": parameters,
        "diagnostics": {
            "divergences": draws.n_divergent,
            "warmup_divergences": draws.warmup_divergences,
            "max_rhat": None if np.isnan(report.max_rhat) else report.max_rhat,
            "min_ess": None if np.isnan(report.min_ess) else report.min_ess,
            "converged": report.converged,
            "sensitivity": {
                name: {
                    "index": r.index,
                    "informative": r.informative,
                    "unreliable": r.unreliable,
                }
                for name, r in report.sensitivity.items()
            },
        },
    }


def _cmd_fit(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _load_table(args)
    basis = _load_basis(args, table.part_names)
    coords = between_within_split(table, basis)
    spec = ModelSpec(
        outcome=args.outcome,
        n_parts=table.n_parts,
        basis=basis,
        covariates=tuple(args.covariates),
    )
    design = build_design(coords, table, spec)
    priors = default_priors(table.outcome)
    cfg = SamplerConfig(
        chains=args.chains,
        warmup=args.warmup,
        iterations=args.iterations,
        seed=args.seed,
        adapt_target=args.adapt_delta,
        parameterization=args.parameterization,
        workers=args.workers,
    )
    draws = fit(spec, design, priors, cfg)
    report = diagnose(draws)
    draws_to_csv(draws, out_dir / "draws.csv")
    payload = _summary_payload(args, table, basis, spec, priors, draws, report)
    (out_dir / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _manifest(args, out_dir)
    n_main = draws.n_coefficients + 2
    print(f"{'parameter':12s} {'mean':>8s} {'2.5%':>8s} {'97.5%':>8s}  sig")
    for entry in payload["parameters"][:n_main]:
        star = "*" if entry["significant"] else ""
        print(
            f"{entry['name']:12s} {entry['mean']:8.3f} {entry['ci_low']:8.3f} "
            f"{entry['ci_high']:8.3f}  {star}"
        )
    print(
        f"divergences={draws.n_divergent} max_rhat={report.max_rhat:.4f} "
        f"min_ess={report.min_ess:.0f}"
    )
    return EXIT_OK


def _read_reference_file(path: Path, part_names, total: float) -> Composition:
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"reference file {path} is empty")
    rows = [ln.replace(",", " ").split() for ln in lines]
    values = rows[-1]
    if len(rows) == 2:
        header = tuple(rows[0])
        if header != tuple(part_names):
            raise DataError(
                f"reference file parts {header} do not match the fitted parts {tuple(part_names)}"
            )
    elif len(rows) > 2:
        raise DataError(f"reference file {path} must hold one composition")
    try:
        parts = np.array([float(v) for v in values])
    except ValueError:
        raise DataError(f"reference file {path} has non-numeric entries") from None
    if parts.size != len(part_names):
        raise DataError(f"reference file must have {len(part_names)} values")
    return Composition(parts, total)


def _load_fit_dir(fit_dir: Path):
    summary_path = fit_dir / "summary.json"
    draws_path = fit_dir / "draws.csv"
    if not summary_path.is_file() or not draws_path.is_file():
        raise DataError(f"{fit_dir} does not contain summary.json and draws.csv")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    draws = draws_from_csv(draws_path)
    model = summary["model"]
    sbp = validate_sbp(np.asarray(model["sbp"], dtype=int), model["part_names"])
    basis = build_basis(sbp)
    return summary, draws, basis


def _cmd_substitute(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary, draws, basis = _load_fit_dir(Path(args.fit_dir))
    model = summary["model"]
    total = float(model["total"])
    if args.ref == "mean":
        comp = Composition(np.asarray(model["reference_mean"], dtype=float), total)
        ref = reference(comp, basis, provenance="sample-mean")
    else:
        path = Path(args.ref)
        if not path.is_file():
            raise DataError(f"reference file not found: {path}")
        ref = reference(_read_reference_file(path, model["part_names"], total), basis)
    if args.t_min > args.t_max:
        raise DataError("--t-min must not exceed --t-max")
    amounts = tuple(float(t) for t in np.arange(args.t_min, args.t_max + 0.5, 1.0))
    levels = ("between", "within") if args.level == "both" else (args.level,)
    pairs = tuple(itertools.permutations(range(len(model["part_names"])), 2))
    grid = SubstitutionGrid(
        pairs=pairs, amounts=amounts, levels=levels, within_mode=args.within_mode
    )
    result = estimate_delta(draws, grid, ref)
    result.to_csv(out_dir / "substitution.csv")
    _manifest(args, out_dir)
    n_sig = sum(r.significant for r in result.rows)
    print(f"wrote {out_dir / 'substitution.csv'} ({len(result.rows)} rows, {n_sig} significant)")
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.write_default_study:
        template = default_study_config() if args.scale == "desk" else full_scale_study_config()
        Path(args.write_default_study).write_text(
            json.dumps(template, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(f"wrote {args.write_default_study}")
        return EXIT_OK
    if not args.study:
        raise DataError("simulate needs --study (or --write-default-study)")
    study_path = Path(args.study)
    if not study_path.is_file():
        raise DataError(f"study config not found: {study_path}")
    config = json.loads(study_path.read_text(encoding="utf-8"))
    rows, infos, cell_metrics = run_study(config, workers=args.workers)

    with open(out_dir / "estimates.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["cell", "replication", "parameter", "estimate", "ci_low", "ci_high", "truth", "excluded"]
        )
        for r in rows:
            writer.writerow(
                [r.cell, r.replication, r.parameter, repr(r.estimate), repr(r.ci_low),
                 repr(r.ci_high), repr(r.truth), int(r.excluded)]
            )
    with open(out_dir / "replications.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "replication", "n_divergent", "max_rhat", "min_ess", "excluded"])
        for i in infos:
            writer.writerow(
                [i.cell, i.replication, i.n_divergent, repr(i.max_rhat), repr(i.min_ess), int(i.excluded)]
            )
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["cell", "parameter", "n_used", "bias", "bias_mcse", "coverage", "coverage_mcse",
             "bias_eliminated_coverage", "be_coverage_mcse"]
        )
        for cell, ms in cell_metrics.items():
            for name, m in ms.per_parameter.items():
                writer.writerow(
                    [cell, name, m.n_used, repr(m.bias), repr(m.bias_mcse), repr(m.coverage),
                     repr(m.coverage_mcse), repr(m.bias_eliminated_coverage), repr(m.be_coverage_mcse)]
                )
    config_echo = {k: v for k, v in vars(args).items() if k != "config"}
    config_echo["study_config"] = config
    payload = json.dumps(config_echo, sort_keys=True)
    manifest = {
        "version": __version__,
        "seed": config.get("seed"),
        "config": config_echo,
        "config_hash": hashlib.sha256(payload.encode("utf-8")).hexdigest(),
        "n_replications": len(infos),
        "n_excluded": sum(i.excluded for i in infos),
        "n_divergent_replications": sum(i.n_divergent > 0 for i in infos),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote study outputs to {out_dir} ({len(infos)} replications)")
    return EXIT_OK


def _cmd_diagnose(args: argparse.Namespace) -> int:
    fit_dir = Path(args.fit_dir)
    _, draws, _ = _load_fit_dir(fit_dir)
    report = diagnose(draws, include_sensitivity=True)
    print(f"{'parameter':12s} {'rhat':>8s} {'ess_bulk':>10s} {'ess_tail':>10s}")
    breach = False
    for name, d in report.per_parameter.items():
        def fmt(v, width):
            return f"{'n/a':>{width}s}" if np.isnan(v) else f"{v:{width}.3f}"
        print(f"{name:12s} {fmt(d.rhat, 8)} {fmt(d.ess_bulk, 10)} {fmt(d.ess_tail, 10)}")
        if np.isfinite(d.rhat) and d.rhat >= RHAT_THRESHOLD:
            breach = True
        if (np.isfinite(d.ess_bulk) and d.ess_bulk <= ESS_THRESHOLD) or (
            np.isfinite(d.ess_tail) and d.ess_tail <= ESS_THRESHOLD
        ):
            breach = True
    print(f"divergences={draws.n_divergent}")
    for name, r in report.sensitivity.items():
        note = " (unreliable)" if r.unreliable else ""
        flag = "informative prior" if r.informative else "ok"
        print(f"sensitivity {name:12s} {r.index:.3f} {flag}{note}")
    if breach:
        print(
            f"FAIL: rhat >= {RHAT_THRESHOLD} or ess <= {ESS_THRESHOLD:.0f} for some parameter",
            file=sys.stderr,
        )
        return EXIT_DIAGNOSTICS
    print("all parameters within thresholds")
    return EXIT_OK


_COMMANDS = {
    "transform": _cmd_transform,
    "fit": _cmd_fit,
    "substitute": _cmd_substitute,
    "simulate": _cmd_simulate,
    "diagnose": _cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-"):
        argv = _apply_config_file(argv, parser)
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.subcommand](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SamplingError as exc:
        print(f"sampling error: {exc}", file=sys.stderr)
        return EXIT_SAMPLING


if __name__ == "__main__":
    sys.exit(main())
