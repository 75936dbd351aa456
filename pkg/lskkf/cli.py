"""
Command-line entry point
Subcommands follow the workflow: design-kernel on a small model, inspect the
conditional expectation, run the experiment, benchmark scaling, convert fields.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import (
    THREADS_ENV,
    ExperimentConfig,
    build_material_config,
    build_noise_config,
    config_digest,
    observer_section,
    parse_config,
    resolve_config,
    resolve_thread_count,
    to_dict,
    with_observer_params,
)
from .errors import ConfigError, FieldFormatError, LskkfError, MaskError, ShapeError
from .fields import ScalarField, read_field_csv, read_sf1, write_field_csv, write_pgm, write_sf1
from .harness import CONFIG_FILE, lskkf_gamma, run_benchmark, run_experiment
from .model import assemble_system
from .observers import kernel_factor
from .oracle import (
    conditional_expectation,
    fit_kernel_params,
    probe_set,
    score_kernel_candidates,
    select_kernel_params,
    steady_state_covariance,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = "lskkf_run.log"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ShapeError, MaskError, FieldFormatError)
FORMATS = ("sf1", "csv", "pgm")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1 instead of exiting with 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(message)


def configure_logging(level: int = logging.INFO, log_file: str | Path | None = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def export_field(
    fld: ScalarField,
    path: str | Path,
    fmt: str,
    axis: int | None = None,
    index: int | None = None,
    digest: str | None = None,
) -> Path:
    """Write ``fld`` as SF1, CSV or a 16-bit PGM heatmap (3-D fields need a slice for PGM)."""
    if fmt == "sf1":
        return write_sf1(fld, path)
    if fmt == "csv":
        return write_field_csv(fld, path, digest)
    if fmt == "pgm":
        return write_pgm(fld, path, axis, index)
    raise ConfigError("--format", f"one of {FORMATS}", fmt)


def check_output_dir(out_dir: str | Path, digest: str, force: bool = False) -> None:
    """Refuse a directory that already holds artifacts of a different config unless forced."""
    marker = Path(out_dir) / CONFIG_FILE
    if not marker.exists():
        return
    try:
        existing = json.loads(marker.read_text()).get("digest")
    except (OSError, json.JSONDecodeError):
        existing = None
    if existing != digest:
        if not force:
            raise ConfigError("--out", f"an empty directory or one holding digest {digest[:12]} (use --force)", existing)
        logger.warning(f"⚠️ Overwriting {out_dir} (digest {str(existing)[:12]} → {digest[:12]})")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {"seed": getattr(args, "seed", None), "out_dir": getattr(args, "out", None), "profile": args.profile}
    if args.config:
        return parse_config(args.config, **overrides)
    return resolve_config({}, **overrides)


def _write_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    payload = {"digest": config_digest(cfg), "config": to_dict(cfg)}
    (out_dir / CONFIG_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# Subcommands ==================================================================
def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    digest = config_digest(cfg)
    check_output_dir(out_dir, digest, args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO, out_dir / LOG_FILE)
    _write_config(cfg, out_dir)
    report = run_experiment(cfg, out_dir)
    for name, res in report.observers.items():
        status = "failed" if res.failure else f"total RMS {res.total_rms:.4f} K, STD {res.std_estimate:.4f} K"
        print(f"{name}: {status}")
    return EXIT_RUNTIME if report.partial else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO, out_dir / LOG_FILE)
    table = run_benchmark(cfg, out_dir)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_design_kernel(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.update_config and not args.config:
        raise ConfigError("--update-config", "a --config file to update")
    spec = observer_section(cfg, "lskkf")
    if spec is None:
        raise ConfigError("observers", "an lskkf observer to design a kernel for")
    small = assemble_system(
        build_material_config(cfg, shape=cfg.design.shape), noise=build_noise_config(cfg), dt=cfg.model.dt
    )
    gammas, sigmas = list(cfg.design.gammas), list(cfg.design.sigmas)
    probes = probe_set(small, cfg.design.probes_per_material)
    threads = resolve_thread_count()
    if args.table:
        table = score_kernel_candidates(small, gammas, sigmas, steady_state_covariance(small), probes, threads)
        print(table.sort_values("score").to_string(index=False))
        gamma, sigma = select_kernel_params(table)
    else:
        gamma, sigma = fit_kernel_params(small, gammas, sigmas, probes=probes, threads=threads)
    print(json.dumps({"gamma": gamma, "sigma": sigma}))
    if args.update_config:
        updated = with_observer_params(cfg, spec.name, gamma=gamma, sigma=sigma)
        raw = json.loads(Path(args.config).read_text())
        raw["observers"] = to_dict(updated)["observers"]
        Path(args.config).write_text(json.dumps(raw, indent=2) + "\n")
        logger.info(f"✅ Wrote gamma={gamma:.6g}, sigma={sigma:.6g} into {args.config}")
    return EXIT_OK


def cmd_cond_exp(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    spec = observer_section(cfg, "lskkf")
    if spec is None:
        raise ConfigError("observers", "an lskkf observer whose kernel to inspect")
    noise = build_noise_config(cfg)
    model = assemble_system(build_material_config(cfg), noise=noise, dt=cfg.model.dt)
    gamma, sigma = lskkf_gamma(spec, noise, model)
    L = kernel_factor(model, spec.param("kernel"), gamma, sigma)
    fld = conditional_expectation(L, args.index, args.value, model.grid)
    path = export_field(fld, args.output, args.format, args.slice_axis, args.slice_index, config_digest(cfg))
    print(path)
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    source = Path(args.input)
    if not source.exists():
        raise ConfigError("--input", "an existing field file", str(source))
    fld = read_field_csv(source) if source.suffix == ".csv" else read_sf1(source)
    print(export_field(fld, args.output, args.format, args.slice_axis, args.slice_index))
    return EXIT_OK


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="lskkf", description="Matrix-free Kalman filtering experiments")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    sub.required = True

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", "-c", default=None, help="Experiment JSON config")
        p.add_argument("--profile", default=None, help="default, small or large")
        p.add_argument("--verbose", "-v", action="store_true", help="Log per-step solver telemetry")

    p_run = sub.add_parser("run", help="Run truth and all observers")
    common(p_run)
    p_run.add_argument("--seed", type=int, default=None, help="RNG seed (unsigned 64-bit)")
    p_run.add_argument("--out", "-o", default=None, help="Output directory")
    p_run.add_argument("--force", action="store_true", help="Overwrite a directory holding another config digest")
    p_run.set_defaults(handler=cmd_run)

    p_bench = sub.add_parser("bench", help="Per-step timing across grid sizes")
    common(p_bench)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--out", "-o", default=None)
    p_bench.set_defaults(handler=cmd_bench)

    p_design = sub.add_parser("design-kernel", help="Fit kernel gamma/sigma on the small model")
    common(p_design)
    p_design.add_argument("--update-config", action="store_true", help="Write the fit into the config's lskkf observer")
    p_design.add_argument("--table", action="store_true", help="Print the score of every candidate")
    p_design.set_defaults(handler=cmd_design_kernel)

    def field_output(p: argparse.ArgumentParser) -> None:
        p.add_argument("--output", required=True, help="Output path")
        p.add_argument("--format", choices=FORMATS, default="sf1")
        p.add_argument("--slice-axis", type=int, default=None, help="Axis for PGM export of 3-D fields")
        p.add_argument("--slice-index", type=int, default=None, help="Index along --slice-axis")

    p_cond = sub.add_parser("cond-exp", help="Conditional-expectation field of the LSK-KF kernel")
    common(p_cond)
    p_cond.add_argument("--index", type=int, required=True, help="Flat index b to condition on")
    p_cond.add_argument("--value", type=float, default=1.0, help="Conditioning value v_b")
    field_output(p_cond)
    p_cond.set_defaults(handler=cmd_cond_exp)

    p_export = sub.add_parser("export", help="Convert SF1/CSV fields to SF1, CSV or PGM")
    p_export.add_argument("--input", required=True, help="SF1 or CSV field")
    p_export.add_argument("--verbose", "-v", action="store_true")
    field_output(p_export)
    p_export.set_defaults(handler=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if not logging.getLogger().handlers:
        configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.handler(args)
    except VALIDATION_ERRORS as e:
        logger.error(f"❌ {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LskkfError, FloatingPointError, MemoryError, OSError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


__all__ = ["THREADS_ENV", "main"]
