"""Command-line entry point: train, stylize, eval, gradcheck.

Exit codes: 0 success, 1 configuration/checkpoint error, 2 data error,
3 numeric abort, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .errors import FormatError, NumericError, ParameterError, StyleRLError
from .imageio import crop_to_multiple, fit_to_size, load_dir, load_image, save_image

log = logging.getLogger("stylerl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SNAPSHOT_NAME = "config.resolved"


class ConfigError(StyleRLError, ValueError):
    """Bad configuration file or value."""


class DataError(StyleRLError, OSError):
    """Missing, empty or unreadable input data."""


# -- run configuration -----------------------------------------------------------------

def _coerce(name: str, raw: str, kind):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from None


def read_run_config(path: str | os.PathLike, base=None):
    """Parse a flat ``key = value`` file over TrainConfig defaults; unknown keys are rejected."""
    from .trainer import TrainConfig

    cfg = base if base is not None else TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} ({path}:{lineno})")
        values[key] = _coerce(key, raw, fields[key].type)
    return dataclasses.replace(cfg, **values)


def write_run_config(cfg, path: str | os.PathLike) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


# -- commands ----------------------------------------------------------------------------

def _require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"directory not found: {p}")
    return p


def _load_images(directory, size: int | None):
    _require_dir(directory)
    _, images = load_dir(directory, size)
    if not images:
        raise DataError(f"no readable images in {directory}")
    return images


def cmd_train(args) -> int:
    from .trainer import backbone_from_spec, train

    cfg = read_run_config(args.config) if args.config else None
    if cfg is None:
        from .trainer import TrainConfig

        cfg = TrainConfig()
    overrides = {
        "content_dir": args.content_dir,
        "style_dir": args.style_dir,
        "seed": args.seed,
        "total_env_steps": args.steps,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    try:
        cfg.validate()
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.content_dir or not cfg.style_dir:
        raise ConfigError("content_dir and style_dir must be given (flag or config)")
    contents = _load_images(cfg.content_dir, cfg.image_size)
    styles = _load_images(cfg.style_dir, cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, out / SNAPSHOT_NAME)
    backbone = backbone_from_spec(cfg.backbone)
    log.info("training %d env steps on %d content / %d style images", cfg.total_env_steps, len(contents), len(styles))
    _, train_log = train(cfg, contents, styles, backbone, out_dir=out)
    log.info("wrote %s (%d update records)", out / "final.ckpt", len(train_log))
    return EXIT_OK


def _load_agent_or_config_error(path):
    from .trainer import load_agent

    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_agent(path)


def cmd_stylize(args) -> int:
    from .trainer import generate_sequence

    if args.steps < 1:
        raise ConfigError("steps must be ≥ 1")
    agent = _load_agent_or_config_error(args.ckpt)
    try:
        content = crop_to_multiple(load_image(args.content), 4, str(args.content))
        style = load_image(args.style)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image: {exc}") from None
    if style.shape != content.shape:
        style = fit_to_size(style, content.shape[1], content.shape[2])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(args.steps)))
    for t, img in enumerate(generate_sequence(agent, content, style, args.steps), 1):
        save_image(img.data, out / f"seq_{t:0{width}d}.png")
    log.info("wrote %d images to %s", args.steps, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .trainer import backbone_from_spec

    agent = _load_agent_or_config_error(args.ckpt)
    _require_dir(args.content_dir)
    _require_dir(args.style_dir)
    try:
        report = evaluate(agent, backbone_from_spec(args.backbone), args.content_dir, args.style_dir, args.steps,
                          indices=args.indices)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    report.write(args.report)
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import failing_ops, format_table, run_suite

    seeds = range(args.seed, args.seed + args.num_seeds)
    results = run_suite(seeds, args.ops or None)
    print(format_table(results))
    bad = failing_ops(results)
    if bad:
        print(f"gradient check failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stylerl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="joint control + generative training")
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--content-dir")
    p.add_argument("--style-dir")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_env_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stylize", help="emit the stylized sequence for one pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("eval", help="metrics over every content x style pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--content-dir", required=True)
    p.add_argument("--style-dir", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--indices", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--report", required=True)
    p.add_argument("--backbone", default="seed:0", help="seed:N or a backbone container path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--num-seeds", type=int, default=20)
    p.add_argument("--ops", nargs="*", help="restrict to these ops")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _configure_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("RLMS_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
