# app/main.py
"""
vdim command line
pretrain, finetune, evaluate, ablate, synthesize and selfcheck over one YAML run config
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from app.config import RunConfig, dump_run_config, get_settings, load_run_config
from app.exceptions import ConfigurationError, VDIMError
from app.models import SplitName

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    """Bad command line; maps to exit code 1"""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(level: Optional[str] = None) -> None:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )


def split_overrides(extra: Sequence[str]) -> List[str]:
    """Keep `--section.key=value` flags; anything else left over is a usage error"""
    overrides = []
    for token in extra:
        body = token[2:] if token.startswith("--") else ""
        if not body or "=" not in body or "." not in body.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument '{token}' (overrides look like --section.key=value)")
        overrides.append(token)
    return overrides


def _load(args: argparse.Namespace, overrides: Sequence[str]) -> RunConfig:
    from app.utils.config_validator import validate_config_on_startup

    config = load_run_config(args.config, overrides)
    if config.output_dir is None:
        config = config.model_copy(update={"output_dir": get_settings().output_dir})
    validate_config_on_startup(config)
    return config


def _splits(config: RunConfig):
    from app.services.video_io import get_video_io_service

    return get_video_io_service(config.dataset).load_splits()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    from app.services.pretrain import get_pretrain_service

    config = _load(args, overrides)
    train, _ = _splits(config)
    service = get_pretrain_service(config, config.resolved_output_dir() / "pretrain")
    state = service.run(train, resume_from=args.resume)
    logger.info(f"✅ Pretraining checkpoints in {service.checkpoint_dir} (step {state.step})")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    from app.services.downstream import get_downstream_service

    config = _load(args, overrides)
    train, test = _splits(config)
    service = get_downstream_service(config, config.resolved_output_dir() / "finetune")
    _, report = service.finetune_and_evaluate(train, test, args.checkpoint)
    print(f"test video accuracy: {report.video_accuracy:.4f} ({len(report.predictions)} videos)")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    from app.services.downstream import get_downstream_service, load_downstream_model

    if args.config is not None or overrides:
        config = _load(args, overrides)
    else:
        _, config, _ = load_downstream_model(args.checkpoint)
        config = config.model_copy(update={"output_dir": get_settings().output_dir})
    train, test = _splits(config)
    split = train if args.split == SplitName.TRAIN.value else test
    service = get_downstream_service(config, config.resolved_output_dir() / "evaluate")
    report = service.evaluate_checkpoint(args.checkpoint, split)
    print(f"{split.split_name} video accuracy: {report.video_accuracy:.4f} "
          f"(clip accuracy {report.clip_accuracy:.4f}, {report.warning_count} errors)")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    from app.services.downstream import get_downstream_service, parse_axes

    axes = parse_axes(args.axes)
    config = _load(args, overrides)
    train, test = _splits(config)
    table = get_downstream_service(config).ablate(axes, train, test, args.checkpoint)
    print(table.drop(columns=["error"]).to_string(index=False))
    failed = int((table["error"] != "").sum())
    if failed:
        logger.warning(f"⚠️ {failed} of {len(table)} ablation cells failed; see ablation.csv")
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    from app.services.video_io import export_frame_directory

    config = _load(args, overrides)
    root = config.resolved_output_dir() / "dataset"
    dump_run_config(config, root / "resolved_config.yaml")
    manifest = export_frame_directory(_splits(config), root)
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_selfcheck(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    from app.services.selfcheck import run_selfcheck

    if overrides:
        raise UsageError("selfcheck takes no config overrides")
    results = run_selfcheck(args.check or None)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"[{status}] {result.name:<18} {result.seconds:6.1f}s  {result.detail}")
    return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE


COMMANDS: Dict[str, Tuple[Callable[[argparse.Namespace, Sequence[str]], int], str]] = {
    "pretrain": (cmd_pretrain, "contrastive pretraining of the encoder"),
    "finetune": (cmd_finetune, "supervised fine-tuning followed by test evaluation"),
    "evaluate": (cmd_evaluate, "evaluate a fine-tuned checkpoint on a split"),
    "ablate": (cmd_ablate, "grid of fine-tuning (or pretraining) runs over config axes"),
    "synthesize": (cmd_synthesize, "write the synthetic dataset as frame directories"),
    "selfcheck": (cmd_selfcheck, "fast invariant checks"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="vdim",
        description="Contrastive video pretraining and fine-tuning. Config values can be overridden with --section.key=value.",
    )
    parser.add_argument("--log-level", default=None, help="Log level (default VDIM_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    for name, (_, help_text) in COMMANDS.items():
        command = sub.add_parser(name, help=help_text)
        if name != "selfcheck":
            command.add_argument("--config", type=Path, default=None, help="YAML run config")
        if name == "pretrain":
            command.add_argument("--resume", type=Path, default=None, help="Checkpoint to resume from")
        if name in ("finetune", "ablate"):
            command.add_argument("--checkpoint", type=Path, default=None,
                                 help="Pretrained checkpoint (omit for a random-init encoder)")
        if name == "evaluate":
            command.add_argument("--checkpoint", type=Path, required=True, help="Fine-tuned checkpoint")
            command.add_argument("--split", choices=[s.value for s in SplitName], default=SplitName.TEST.value)
        if name == "ablate":
            command.add_argument("--axes", required=True, help="Axes as key=v1,v2;key2=v3,...")
        if name == "selfcheck":
            command.add_argument("--check", action="append", default=None, help="Run only this check")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = split_overrides(extra)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    configure_logging(args.log_level)
    handler, _ = COMMANDS[args.command]
    try:
        return handler(args, overrides)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except VDIMError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"❌ {args.command} failed with an unexpected error: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
