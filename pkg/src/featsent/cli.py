"""``featsent <command> --config <path> [--force] [--seed N] [--deterministic] [--subset N] [--out DIR]``."""
import argparse
import logging
import sys

from .config import load_config, parse_config
from .errors import ConfigError, MissingArtifactError, ProvenanceError
from .pipeline import COMMANDS, run_command
from .store import ArtifactStore, default_store_root
from .utils import logger, set_deterministic

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


def build_parser():
    p = argparse.ArgumentParser(prog="featsent", description="Hidden-layer feature-map adversarial example detector.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="TOML or JSON experiment config")
    p.add_argument("--force", action="store_true", help="recompute even if outputs exist")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels, single thread")
    p.add_argument("--subset", type=int, help="override dataset.subset")
    p.add_argument("--out", help="store root (default $FEATSENT_STORE or ./featsent_store)")
    p.add_argument("--axis", choices=("layers", "gram"), default="layers", help="ablation axis")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.subset is not None:
            updates["dataset"] = {**cfg.dataset.model_dump(), "subset": args.subset}
        if updates:
            cfg = parse_config({**cfg.to_dict(), **updates})
        if args.deterministic:
            set_deterministic(True)
        store = ArtifactStore(args.out or default_store_root(), cfg.name)
        run_command(args.command, cfg, store, force=args.force, axis=args.axis)
    except MissingArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ProvenanceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as err:  # noqa: BLE001 - top-level reporting
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
