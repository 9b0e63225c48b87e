import argparse
import logging
import sys
from pathlib import Path

import yaml

from experiments.plots import emit_plots
from experiments.runner import EXIT_CONFIG, EXIT_DATA, EXIT_MODEL, EXIT_OK, load_config, median_orderings, run_experiment
from flunow.dataset import save_panel_csv, synthesize_panel
from flunow.errors import ConfigError, DataError, ModelError
from flunow.models import SynthesisConfig
from flunow.stats import Stats
from store.repository import Repository

logger = logging.getLogger("flunow")


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s - %(name)s - %(message)s",
        stream=sys.stderr,
    )
    # third-party chatter
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def cmd_synth(args) -> int:
    mapping = {}
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"{args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: config must be a mapping")
        mapping = dict((raw.get("data") or {}).get("synthesis") or raw)
    if args.seed is not None:
        mapping["seed"] = args.seed
    try:
        config = SynthesisConfig(**mapping)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid synthesis config: {e}") from e
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    panel = synthesize_panel(config)
    paths = save_panel_csv(panel, out / "incidence.csv", out / "queries.csv")
    logger.info(f"wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config")
    overrides = {"output_dir": args.out, "seed": args.seed, "jobs": args.jobs, "gru_retrain": args.gru_retrain}
    return run_experiment(load_config(args.config, overrides))


def cmd_evaluate(args) -> int:
    repo = Repository(args.out or "runs/latest")
    frame = repo.load_forecasts()
    if frame.empty:
        raise DataError(f"{repo.path(Repository.FORECASTS)}: no forecast records")
    report = Stats.evaluate(frame)
    paths = repo.save_report(report)
    manifest = repo.load_manifest()
    if manifest is not None:
        manifest["ordering"] = median_orderings(report)
        paths.append(repo.save_manifest(manifest))
    logger.info(f"wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_plot(args) -> int:
    repo = Repository(args.out or "runs/latest")
    report = repo.load_report()
    if report.rmse.empty:
        raise DataError(f"{repo.path(Repository.RMSE)}: empty report")
    emit_plots(report, repo.load_attributions(), repo.path(Repository.PLOTS))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flunow", description="Multi-location influenza nowcasting experiments")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    verbs = parser.add_subparsers(dest="verb", required=True)

    def add(name, func, help_text):
        sub = verbs.add_parser(name, help=help_text)
        sub.add_argument("--config", help="YAML config file")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--seed", type=int, help="override the config seed")
        sub.add_argument("--jobs", type=int, help="parallel walk-forward workers")
        sub.add_argument("--gru-retrain", choices=["full", "warm"], help="GRU weekly retraining mode")
        sub.set_defaults(func=func)

    add("synth", cmd_synth, "generate a synthetic panel as CSV")
    add("run", cmd_run, "run a full experiment")
    add("evaluate", cmd_evaluate, "recompute report tables from forecasts.csv")
    add("plot", cmd_plot, "draw figures from report tables and attribution dumps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"config error: {e}")
        return EXIT_CONFIG
    except DataError as e:
        logger.error(f"data error: {e}")
        return EXIT_DATA
    except ModelError as e:
        logger.error(f"model error: {e}")
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
