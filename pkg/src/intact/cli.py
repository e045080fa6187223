"""Command-line entry point wiring configs, seeds, and artifacts together.

Subcommands: gen-data, train-teacher, train-student, eval, lidar-model, all.
Every run writes artifacts stamped with the config hash under --out.
"""

from __future__ import annotations

import argparse
import sys

from . import experiment, lidarmodel
from .config import load_config, write_default_config
from .errors import ConfigError, DataError, DomainError, SeverityError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to an INI config file (defaults built in)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intact",
        description=(
            "Noise-tolerant point-cloud training: meta-taught teacher, "
            "saliency-guided adversarial curriculum, and a LiDAR energy budget calculator."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, descr in (
        ("gen-data", "generate the synthetic dataset"),
        ("train-teacher", "run the meta-learning phase"),
        ("eval", "evaluate checkpointed students under the configured conditions"),
        ("all", "run the full pipeline: data, teacher, three students, report"),
    ):
        p = sub.add_parser(name, help=descr)
        _add_common(p)

    p = sub.add_parser("train-student", help="run the adversarial curriculum phase")
    _add_common(p)
    p.add_argument(
        "--variant",
        choices=experiment.VARIANTS,
        default="intact",
        help="training recipe (default: intact)",
    )
    p.add_argument(
        "--dump-saliency",
        action="store_true",
        help="write per-point saliency dumps for a few training clouds",
    )

    p = sub.add_parser("lidar-model", help="evaluate the sensing power/energy budget")
    p.add_argument("--params", help="key=value file of physical parameters")
    p.add_argument("--range", type=float, default=100.0, dest="range_m",
                   help="sensing range in meters (default 100)")
    p.add_argument("--emit-severity", action="store_true",
                   help="print the derived perturbation severity as config fragment")
    p.add_argument("--reference-energy", type=float, default=None,
                   help="available pulse energy of the nominal operating point [J]")

    p = sub.add_parser("write-config", help="write the built-in default config to a file")
    p.add_argument("path")
    return parser


def _load_lidar_params(path: str | None) -> lidarmodel.LidarConfig:
    if path is None:
        return lidarmodel.LidarConfig()
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: expected key=value, got '{raw.strip()}'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    kwargs = {}
    for key, value in values.items():
        if key == "n_bits":
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return lidarmodel.LidarConfig(**kwargs)


def _cmd_lidar_model(args) -> int:
    cfg = _load_lidar_params(args.params)
    print(lidarmodel.budget_table(cfg, args.range_m))
    if args.emit_severity:
        budget = lidarmodel.total_power(cfg, args.range_m)
        if args.reference_energy is not None:
            budget.e_pulse_available = args.reference_energy
        spec = lidarmodel.severity_from_budget(budget, budget)
        print()
        print("# derived perturbation severity (config fragment)")
        print("[severity]")
        print(f"drop_fraction = {spec.drop_fraction!r}")
        print(f"sigma = {spec.sigma!r}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "lidar-model":
            return _cmd_lidar_model(args)
        if args.command == "write-config":
            write_default_config(args.path)
            print(f"wrote {args.path}")
            return 0

        cfg = load_config(args.config, args.overrides, seed=args.seed, out_dir=args.out)
        experiment.write_run_meta(cfg)
        if args.command == "gen-data":
            manifest = experiment.run_gen_data(cfg)
            print(f"dataset written: {manifest}")
        elif args.command == "train-teacher":
            dataset = experiment.load_run_dataset(cfg)
            _, log = experiment.run_train_teacher(cfg, dataset)
            last = log.query_losses[-1] if log.query_losses else float("nan")
            print(f"teacher trained; final mean query loss {last:.4f}")
        elif args.command == "train-student":
            dataset = experiment.load_run_dataset(cfg)
            _, report = experiment.run_train_student(
                cfg, dataset, args.variant, dump_saliency=args.dump_saliency
            )
            if report.records:
                last = report.records[-1]
                print(
                    f"student '{args.variant}' trained; final probes "
                    f"clean {last.probe_clean:.1f} / noise {last.probe_noise:.1f} "
                    f"/ drop {last.probe_drop:.1f}"
                )
            else:
                print(f"student '{args.variant}' returned untrained (0 stages)")
        elif args.command == "eval":
            dataset = experiment.load_run_dataset(cfg)
            table = experiment.run_eval(cfg, dataset)
            print(table.to_text())
        elif args.command == "all":
            table = experiment.run_all(cfg)
            print(table.to_text())
            print(experiment.ordering_summary(table))
        else:
            raise ConfigError(f"unhandled command {args.command}")
        return 0
    except (ConfigError, DataError, DomainError, SeverityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
