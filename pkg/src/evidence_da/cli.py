"""Command-line front end: config parsing, experiment dispatch, CSV emission.

Every command writes one CSV plus a JSON manifest recording the command, a
stable digest of the canonicalized config, the seed, the package version,
wall time and output paths.  Floats are printed with 17 significant digits
so a rerun with the same config and seed reproduces the CSV byte for byte.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import IntegratorSpec, matrix_flow, propagate
from .errors import IllConditionedError, NumericalOverflowError
from .etkf import EtkfConfig
from .evidence import (
    EvidencingWindow,
    cme_en4dvar,
    cme_enkf,
    cme_ienks,
    kf_evidence,
)
from .gaussian import GaussianBelief, ObsErrorSpec, ObsOperator, log_sum_exp, mean_and_anomalies
from .harness import (
    METHODS,
    SweepSpec,
    TwinConfig,
    build_context,
    estimate_parameter,
    run_sweep,
    run_twin,
)
from .oracles import gh_cme, hermite_rule, mc_cme, mc_cme_ladder, powerlaw_extrapolate

CSV_SCHEMA_VERSION = 1
CONFIG_SCHEMA_VERSION = 1

TWIN_COLUMNS = ("window_start_index", "method", "model_branch", "log_cme",
                "converged", "note")
SWEEP_COLUMNS = ("axis", "value", "method", "mean_log_cme_factual",
                 "mean_log_cme_counterfactual", "mean_discriminating_power",
                 "n_failed_factual", "n_failed_counterfactual")
ESTIMATE_COLUMNS = ("seed", "method", "parameter", "mean_log_cme", "argmax",
                    "ci_low", "ci_high", "flags")
ORACLE_COLUMNS = ("model_branch", "kind", "n_samples", "log_cme_mean",
                  "fit_a", "fit_b", "fit_c", "fit_rmse")

_CONFIG_FIELDS = {
    "schema_version": int,
    "model": str,
    "factual_forcing": (int, float),
    "counterfactual_forcing": (int, float),
    "obs_sigma": (int, float),
    "window_k": int,
    "n_windows": int,
    "spinup_steps": int,
    "seed": int,
    "n_members": int,
    "inflation": (int, float),
    "dt": (int, float),
    "obs_interval": (int, float),
    "methods": list,
    "forcing_angle": (int, float),
    "dimension": int,
}
_OPTIONAL_FIELDS = ("forcing_angle", "dimension")


class ConfigError(ValueError):
    """Configuration problem; mapped to exit code 2."""


def builtin_config_path(model: str) -> Path:
    name = {"l63": "l63_default.json", "l95": "l95_default.json"}.get(model)
    if name is None:
        raise ConfigError(f"no builtin config for model {model!r}")
    return Path(str(resources.files("evidence_da").joinpath("configs", name)))


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return canonicalize_config(raw)


def canonicalize_config(raw: dict) -> dict:
    """Validate a config document and return its canonical (key-sorted,
    defaults-applied) form.  Canonicalization is idempotent."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(_CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = set(_CONFIG_FIELDS) - set(raw) - set(_OPTIONAL_FIELDS)
    if missing:
        raise ConfigError(f"missing config keys: {sorted(missing)}")
    for key, types in _CONFIG_FIELDS.items():
        if key in raw and not isinstance(raw[key], types):
            raise ConfigError(f"config key {key!r} has wrong type")
    if raw["schema_version"] != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {raw['schema_version']}")
    if raw["model"] not in ("l63", "l95"):
        raise ConfigError(f"unknown model {raw['model']!r}")
    bad = [m for m in raw["methods"] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    canon = {key: raw[key] for key in sorted(raw)}
    for key in ("factual_forcing", "counterfactual_forcing", "obs_sigma",
                "inflation", "dt", "obs_interval", "forcing_angle"):
        if key in canon:
            canon[key] = float(canon[key])
    return canon


def config_digest(canon: dict) -> str:
    return hashlib.sha256(
        json.dumps(canon, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def twin_config_from(canon: dict, overrides: dict | None = None) -> TwinConfig:
    canon = dict(canon)
    if overrides:
        canon.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = dict(
        model_name=canon["model"],
        factual_forcing=canon["factual_forcing"],
        counterfactual_forcing=canon["counterfactual_forcing"],
        obs_sigma=canon["obs_sigma"],
        dt=canon["dt"],
        obs_interval=canon["obs_interval"],
        n_members=canon["n_members"],
        inflation=canon["inflation"],
        window_k=canon["window_k"],
        n_windows=canon["n_windows"],
        spinup_steps=canon["spinup_steps"],
        seed=canon["seed"],
        methods=tuple(canon["methods"]),
    )
    if "forcing_angle" in canon:
        kwargs["forcing_angle"] = canon["forcing_angle"]
    if "dimension" in canon:
        kwargs["dimension"] = canon["dimension"]
    try:
        return TwinConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def write_manifest(out_dir: Path, command: str, canon: dict, outputs, started: float):
    manifest = {
        "command": command,
        "config": canon,
        "config_digest": config_digest(canon),
        "seed": canon["seed"],
        "version": __version__,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "wall_time_s": round(time.monotonic() - started, 3),
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / f"{command.replace('-', '_')}_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_grid(text: str):
    return tuple(float(v) for v in text.split(","))


def _parse_ladder(text: str):
    """Sample-size ladder, either "1e2..1e5" (decades) or "1e2,1e3,2e4"."""
    if ".." in text:
        lo_s, hi_s = text.split("..", 1)
        lo, hi = int(float(lo_s)), int(float(hi_s))
        sizes = []
        n = lo
        while n <= hi:
            sizes.append(n)
            n *= 10
        return tuple(sizes)
    return tuple(int(float(v)) for v in text.split(","))


def _common_config(args) -> dict:
    if args.config:
        return load_config(args.config)
    if getattr(args, "model", None):
        return load_config(builtin_config_path(args.model))
    raise ConfigError("supply --config FILE or --model {l63,l95}")


def cmd_twin_run(args) -> int:
    started = time.monotonic()
    canon = _common_config(args)
    overrides = {"n_windows": args.windows, "seed": args.seed,
                 "window_k": args.k}
    canon.update({k: v for k, v in overrides.items() if v is not None})
    cfg = twin_config_from(canon)
    series = run_twin(cfg, threads=args.threads)
    rows = []
    for i, start in enumerate(series.start_indices):
        for method in cfg.methods:
            for branch in ("factual", "counterfactual"):
                s = series.series(branch, method)
                rows.append({
                    "window_start_index": int(start), "method": method,
                    "model_branch": branch, "log_cme": float(s.values[i]),
                    "converged": bool(s.converged[i]), "note": s.notes[i],
                })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "twin_run.csv"
    write_csv(csv_path, TWIN_COLUMNS, rows)
    write_manifest(out_dir, "twin-run", canon, [csv_path], started)
    return 0


def _sweep_rows(cfg: TwinConfig, spec: SweepSpec, threads):
    rows = run_sweep(cfg, spec, threads=threads)
    return [{
        "axis": r["axis"], "value": r["value"], "method": r["method"],
        "mean_log_cme_factual": r["mean_factual"],
        "mean_log_cme_counterfactual": r["mean_counterfactual"],
        "mean_discriminating_power": r["mean_power"],
        "n_failed_factual": r["n_failed_factual"],
        "n_failed_counterfactual": r["n_failed_counterfactual"],
    } for r in rows]


def cmd_sweep(args, command="sweep") -> int:
    started = time.monotonic()
    canon = _common_config(args)
    if args.windows is not None:
        canon["n_windows"] = args.windows
    if args.seed is not None:
        canon["seed"] = args.seed
    cfg = twin_config_from(canon)
    grid = _parse_grid(args.grid)
    if args.axis == "window_length":
        grid = tuple(int(v) for v in grid)
    spec = SweepSpec(axis=args.axis, grid=grid, methods=cfg.methods)
    rows = _sweep_rows(cfg, spec, args.threads)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{command.replace('-', '_')}.csv"
    write_csv(csv_path, SWEEP_COLUMNS, rows)
    write_manifest(out_dir, command, canon, [csv_path], started)
    return 0


def cmd_attribute(args) -> int:
    return cmd_sweep(args, command="attribute")


def cmd_estimate_param(args) -> int:
    started = time.monotonic()
    canon = _common_config(args)
    if args.windows is not None:
        canon["n_windows"] = args.windows
    cfg = twin_config_from(canon)
    grid = _parse_grid(args.grid)
    rows = []
    for seed_offset in range(args.n_seeds):
        seed = cfg.seed + seed_offset
        cfg_seed = twin_config_from(canon, {"seed": seed})
        estimates = estimate_parameter(cfg_seed, grid, threads=args.threads)
        for method in cfg.methods:
            est = estimates[method]
            for theta, value in zip(est.grid, est.profile):
                rows.append({
                    "seed": seed, "method": method, "parameter": float(theta),
                    "mean_log_cme": float(value), "argmax": est.argmax,
                    "ci_low": est.ci[0], "ci_high": est.ci[1],
                    "flags": "|".join(est.flags),
                })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "estimate_param.csv"
    write_csv(csv_path, ESTIMATE_COLUMNS, rows)
    write_manifest(out_dir, "estimate-param", canon, [csv_path], started)
    return 0


def cmd_oracle_compare(args) -> int:
    started = time.monotonic()
    canon = _common_config(args)
    if args.windows is not None:
        canon["n_windows"] = args.windows
    cfg = twin_config_from(canon)
    ladder = _parse_ladder(args.mc_ladder)
    if max(ladder) > 10**5 and not args.allow_large:
        raise ConfigError("sample sizes above 1e5 need --allow-large")
    use_ghq = cfg.model_name == "l63" and not args.no_ghq

    context = build_context(cfg)
    branches = (("factual", cfg.factual_forcing),
                ("counterfactual", cfg.counterfactual_forcing))
    rows = []
    for branch, forcing in branches:
        flow = context.candidate_flow(forcing)
        ladder_values = {n: [] for n in ladder}
        ghq_values = []
        for start in context.window_starts():
            window = context.window(start, cfg.window_k)
            belief = context.prior_belief(start)
            rng = context.streams.window_generator("mc", start)
            values = mc_cme_ladder(belief, flow, context.obs_op, context.err,
                                   window, ladder, rng)
            for n, v in values.items():
                ladder_values[n].append(v)
            if use_ghq:
                ghq_values.append(gh_cme(belief, flow, context.obs_op, context.err,
                                         window, args.ghq_degree).log_cme)
        means = [(n, float(np.mean(ladder_values[n]))) for n in ladder]
        for n, mean in means:
            rows.append({"model_branch": branch, "kind": "mc", "n_samples": n,
                         "log_cme_mean": mean, "fit_a": "", "fit_b": "",
                         "fit_c": "", "fit_rmse": ""})
        if use_ghq:
            rows.append({"model_branch": branch, "kind": "ghq",
                         "n_samples": args.ghq_degree ** context.truth.shape[1],
                         "log_cme_mean": float(np.mean(ghq_values)), "fit_a": "",
                         "fit_b": "", "fit_c": "", "fit_rmse": ""})
        fit = powerlaw_extrapolate(means)
        rows.append({"model_branch": branch, "kind": "fit", "n_samples": "",
                     "log_cme_mean": fit.asymptote, "fit_a": fit.a, "fit_b": fit.b,
                     "fit_c": fit.c, "fit_rmse": fit.rmse})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "oracle_compare.csv"
    write_csv(csv_path, ORACLE_COLUMNS, rows)
    write_manifest(out_dir, "oracle-compare", canon, [csv_path], started)
    return 0


def _validate_checks():
    """Quick invariant suite run by the `validate` subcommand.

    Yields (name, passed) pairs; every check is deterministic and cheap.
    """
    # RK4 order on the linear decay test problem.
    class _Decay:
        @staticmethod
        def tendency(x):
            return -x

    errs = []
    for dt in (0.02, 0.01, 0.005):
        traj = propagate(_Decay, np.array([1.0]), round(1.0 / dt), IntegratorSpec(dt))
        errs.append(abs(float(traj[-1][0]) - math.exp(-1.0)))
    order = math.log(errs[0] / errs[2]) / math.log(4.0)
    yield "rk4_fourth_order", 3.5 < order < 4.5

    # Log-sum-exp shift and permutation invariance.
    v = np.array([-3.0, -1.5, 2.0, 0.25])
    lse = log_sum_exp(v)
    ok = abs(log_sum_exp(v + 10.0) - lse - 10.0) < 1e-12
    ok = ok and abs(log_sum_exp(v[::-1]) - lse) < 1e-12
    yield "log_sum_exp_invariances", ok

    # Quadrature exactness for monomials of degree <= 2m-1.
    ok = True
    for m in (2, 8, 16, 32):
        rule = hermite_rule(m)
        for k in range(2 * m):
            approx = float(rule.weights @ rule.nodes**k)
            exact = 0.0 if k % 2 else math.gamma((k + 1) / 2)
            scale = max(abs(exact), float(rule.weights @ np.abs(rule.nodes) ** k), 1e-300)
            ok = ok and abs(approx - exact) / scale < 1e-9
    yield "hermite_exactness", ok

    # Linear-Gaussian collapse of all estimators onto the exact filter.
    rng = np.random.default_rng(1)
    ensemble = 0.5 + 1.2 * rng.standard_normal((1, 4))
    flow = matrix_flow(np.eye(1))
    err = ObsErrorSpec(1.0, 1)
    op = ObsOperator.identity()
    belief = mean_and_anomalies(ensemble)
    ok = True
    for k in (1, 2, 5):
        window = EvidencingWindow(rng.standard_normal((k, 1)))
        target = kf_evidence(np.eye(1), belief.mean, belief.cov(), op, err, window).log_cme
        ok = ok and abs(cme_enkf(ensemble, flow, op, err, window,
                                 EtkfConfig(4, 1.0)).log_cme - target) < 1e-6
        ok = ok and abs(cme_en4dvar(ensemble, flow, op, err, window).log_cme - target) < 1e-6
        ok = ok and abs(cme_ienks(ensemble, flow, op, err, window).log_cme - target) < 1e-6
    yield "linear_gaussian_collapse", ok

    # Closed-form 1-D evidence through quadrature, Monte Carlo and the filter.
    prior = GaussianBelief(np.array([0.0]), np.array([[-(2**-0.5), 2**-0.5]]))
    window = EvidencingWindow(np.array([[0.0]]))
    truth_value = -0.5 * math.log(4.0 * math.pi)
    ghq = gh_cme(prior, flow, op, err, window, 32).log_cme
    mc = mc_cme(prior, flow, op, err, window, 200_000,
                np.random.default_rng(12345)).log_cme
    kf = kf_evidence(np.eye(1), prior.mean, prior.cov(), op, err, window).log_cme
    yield "closed_form_evidence", (abs(ghq - truth_value) < 1e-9
                                   and abs(kf - truth_value) < 1e-12
                                   and abs(mc - truth_value) < 0.02)

    # Determinism of a small twin run, bit for bit.
    from .harness import l63_default_config

    cfg = l63_default_config(n_windows=3, spinup_steps=20, seed=11)
    a = run_twin(cfg)
    b = run_twin(cfg)
    same = all(
        np.array_equal(a.series(branch, m).values, b.series(branch, m).values)
        for branch in ("factual", "counterfactual") for m in cfg.methods
    )
    yield "twin_run_determinism", same

    # Frozen CSV schemas.
    yield "csv_schema_stable", (
        TWIN_COLUMNS == ("window_start_index", "method", "model_branch",
                         "log_cme", "converged", "note")
        and SWEEP_COLUMNS[0] == "axis" and ORACLE_COLUMNS[0] == "model_branch"
        and CSV_SCHEMA_VERSION == 1
    )


def cmd_validate(args) -> int:
    failed = 0
    for name, passed in _validate_checks():
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        if not passed:
            failed += 1
    return 0 if failed == 0 else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evidence-da",
        description="Window evidence experiments for chaotic toy models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, model_ok=True):
        p.add_argument("--config", help="JSON config file")
        if model_ok:
            p.add_argument("--model", choices=("l63", "l95"),
                           help="use the builtin default config for this model")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--windows", type=int, help="override n_windows")
        p.add_argument("--seed", type=int, help="override seed")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: EVIDENCE_DA_THREADS or 1)")

    p = sub.add_parser("twin-run", help="per-window evidence for both model branches")
    add_common(p)
    p.add_argument("--k", type=int, help="override window length K")
    p.set_defaults(func=cmd_twin_run)

    for name, fn in (("sweep", cmd_sweep), ("attribute", cmd_attribute)):
        p = sub.add_parser(name)
        add_common(p)
        p.add_argument("--axis", choices=("forcing_delta", "window_length"),
                       required=True)
        p.add_argument("--grid", required=True,
                       help="comma-separated grid values")
        p.set_defaults(func=fn)

    p = sub.add_parser("estimate-param", help="maximum-evidence forcing estimate")
    add_common(p)
    p.add_argument("--grid", required=True, help="comma-separated forcing grid")
    p.add_argument("--n-seeds", type=int, default=1)
    p.set_defaults(func=cmd_estimate_param)

    p = sub.add_parser("oracle-compare",
                       help="quadrature vs Monte Carlo ladder with power-law fit")
    add_common(p)
    p.add_argument("--mc-ladder", default="1e2..1e5",
                   help='e.g. "1e2..1e5" or "1e2,1e3,5e4"')
    p.add_argument("--ghq-degree", type=int, default=32)
    p.add_argument("--no-ghq", action="store_true")
    p.add_argument("--allow-large", action="store_true",
                   help="permit Monte Carlo sizes above 1e5")
    p.set_defaults(func=cmd_oracle_compare)

    p = sub.add_parser("validate", help="run the quick invariant suite")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalOverflowError, IllConditionedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
