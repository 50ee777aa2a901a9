"""Command line entry point: ``dgapost run|study|verify``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .models import DomainError

EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def parse_box(text: str):
    """'lo:hi' or 'lo:hi,lo:hi' -> [[lo, hi], ...]."""
    try:
        box = [[float(v) for v in part.split(":")] for part in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --domain-box {text!r}") from exc
    if any(len(b) != 2 or b[0] > b[1] for b in box):
        raise ConfigError(f"bad --domain-box {text!r}")
    return box


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", choices=["burgers", "p_system", "advection"])
    common.add_argument("--flux")
    common.add_argument("--degree", type=int)
    common.add_argument("--levels", help="refinement levels l:L, N = n0 * 2^i")
    common.add_argument("--c", type=float, help="time-step constant in tau = c h^k")
    common.add_argument("--k", type=float, help="time-step exponent in tau = c h^k")
    common.add_argument("--tfinal", type=float)
    common.add_argument("--domain-box", help="admissible box, lo:hi per component, comma separated")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="YAML or JSON file; its keys override flags")
    common.add_argument("--series-tol", type=float)
    common.add_argument("--ref-mult", type=int)
    common.add_argument("--no-abort", action="store_true", help="keep going when u_hat leaves the box")

    parser = argparse.ArgumentParser(prog="dgapost", description="dG solver with a posteriori error indicators")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="single simulation")
    run.add_argument("--cells", type=int, help="number of cells (default: finest level)")
    sub.add_parser("study", parents=[common], help="convergence study over refinement levels")
    sub.add_parser("verify", parents=[common], help="invariant checks on a short run")
    return parser


def config_from_args(args):
    from .harness import StudyConfig, parse_levels

    data = {}
    mapping = {
        "model": "model_name",
        "flux": "flux",
        "degree": "p",
        "c": "c",
        "k": "k",
        "tfinal": "T",
        "out": "out_dir",
        "series_tol": "series_tol",
        "ref_mult": "ref_mult",
    }
    for arg, key in mapping.items():
        value = getattr(args, arg)
        if value is not None:
            data[key] = value
    if args.levels is not None:
        try:
            data["levels"] = parse_levels(args.levels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if args.domain_box is not None:
        data["box"] = parse_box(args.domain_box)
    if args.no_abort:
        data["abort_on_escape"] = False
    if args.config:
        try:
            text = Path(args.config).read_text()
            extra = json.loads(text) if args.config.endswith(".json") else yaml.safe_load(text)
        except (OSError, ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        if not isinstance(extra, dict):
            raise ConfigError("config file must hold a key-value mapping")
        if isinstance(extra.get("config"), dict):
            extra = extra["config"]
        data.update(extra)
    try:
        return StudyConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_study(config) -> int:
    from .harness import run_study

    report = run_study(config)
    print(report.table())
    for note in config.advisories():
        print(f"note: {note}")
    if report.failures:
        for f in report.failures:
            print(f"failed: {f}", file=sys.stderr)
        return EXIT_DOMAIN if any("domain" in f for f in report.failures) else EXIT_NUMERICAL
    return EXIT_OK


def cmd_run(config, cells: int | None) -> int:
    from .harness import run_level, psystem_reference, series_csv

    N = cells or config.level_cells()[-1]
    reference = psystem_reference(config, [N]) if config.exact_mode() == "reference" else None
    result = run_level(config, N, reference)
    print(f"N={N} steps={result.steps} error={result.error:.4e} indicator={result.indicator:.4e}")
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"series_N{N}.csv").write_text(series_csv(result.series))
    if result.failure:
        print(f"failed: {result.failure}", file=sys.stderr)
        return EXIT_DOMAIN if result.failure.startswith("domain") else EXIT_NUMERICAL
    return EXIT_OK


def cmd_verify(config) -> int:
    """Reconstruction contracts, mass conservation and entropy-flux compatibility."""
    from .harness import run_level
    from .models import numerical_flux
    from .reconstruct import RECONSTRUCTION_TOLERANCES

    N = config.level_cells()[0]
    config.check_every = 1
    reference = None if config.exact_mode() == "bessel" else _self_reference(config, N)
    result = run_level(config, N, reference)
    checks = {}
    for key, tol in RECONSTRUCTION_TOLERANCES.items():
        v = result.reconstruction_violation.get(key)
        checks[f"reconstruction {key}"] = (v is None or v <= tol, v)
    checks["mass conservation"] = (result.mass_drift <= 1e-10, result.mass_drift)
    model = config.model()
    numerical_flux(model, config.flux)
    checks["entropy flux compatibility"] = _entropy_flux_check(model)
    ok = True
    for name, (passed, value) in checks.items():
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'} {name}: {value}")
    if result.failure:
        print(f"failed: {result.failure}", file=sys.stderr)
        return EXIT_DOMAIN if result.failure.startswith("domain") else EXIT_NUMERICAL
    return EXIT_OK if ok else EXIT_NUMERICAL


def _self_reference(config, N):
    from .harness import psystem_reference

    return psystem_reference(config, [N])


def _entropy_flux_check(model, n: int = 200, eps: float = 1e-6):
    """max |Dq - D eta Df| by central differences at random box states."""
    rng = np.random.default_rng(3)
    box = model.domain_box
    u = box[:, :1] + (box[:, 1:] - box[:, :1]) * rng.random((model.d, n))
    worst = 0.0
    grad = model.entropy_grad(u)
    jac = model.flux_tensor(u, 1)
    expected = np.einsum("in,ijn->jn", grad, jac)
    for j in range(model.d):
        e = np.zeros((model.d, 1))
        e[j] = eps
        dq = (model.entropy_flux(u + e) - model.entropy_flux(u - e)) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(dq - expected[j]))))
    return worst <= 1e-6, worst


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "study":
            return cmd_study(config)
        if args.command == "run":
            return cmd_run(config, args.cells)
        return cmd_verify(config)
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (FloatingPointError, RuntimeError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
