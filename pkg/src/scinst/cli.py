"""Command line: ``scinst train | stylize | grid | verify``.

Exit codes: 0 success, 1 internal failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .errors import CheckpointError, ConfigError, DimensionError, ImageDecodeError
from .scin import DEFAULT_EPS

CHECKPOINT_ENV = "SCINST_CHECKPOINT_DIR"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _default_checkpoint() -> str | None:
    d = os.environ.get(CHECKPOINT_ENV)
    return str(Path(d) / "latest.ckpt") if d else None


def _checkpoint_path(arg):
    path = arg or _default_checkpoint()
    if path is None:
        raise UsageError(f"no --checkpoint given and {CHECKPOINT_ENV} is not set")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _load_generator(path):
    from .training import load_checkpoint

    state = load_checkpoint(path)
    state.generator.eval()
    return state.generator


def cmd_train(args) -> int:
    from .training import load_config, run_training

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.steps = args.steps
    for d in (cfg.content_dir, cfg.style_dir):
        if not d or not Path(d).is_dir():
            raise UsageError(f"dataset directory does not exist: {d or '<unset>'}")
    _, records = run_training(cfg, resume=args.resume)
    if records:
        last = records[-1]
        print("step {step}: ".format(**last) + ", ".join(f"{k} {v:.4f}" for k, v in last.items() if k != "step"))
    print(f"checkpoint: {Path(cfg.out_dir) / 'latest.ckpt'}")
    return EXIT_OK


def cmd_stylize(args) -> int:
    from .imaging import check_divisible, load_image, resize, save_image

    content = load_image(args.content)
    check_divisible(content, 8, "content")
    style = load_image(args.style)
    H, W = content.shape[-2:]
    if style.shape[-2:] != (H, W):
        style = resize(style, (H, W))
    gen = _load_generator(_checkpoint_path(args.checkpoint))
    with torch.no_grad():
        out = gen.stylize(content, style)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_image(out, args.out)
    print(args.out)
    return EXIT_OK


def cmd_grid(args) -> int:
    from .imaging import check_divisible, list_images, load_image, resize, save_image, tile

    content_paths, style_paths = list_images(args.contents), list_images(args.styles)
    for what, paths, d in (("content", content_paths, args.contents), ("style", style_paths, args.styles)):
        if not paths:
            raise UsageError(f"no {what} images in {d}")
    contents = [load_image(p) for p in content_paths]
    size = tuple(contents[0].shape[-2:])
    contents = torch.cat([c if tuple(c.shape[-2:]) == size else resize(c, size) for c in contents])
    check_divisible(contents, 8, "content")
    styles = torch.cat([resize(load_image(p), size) for p in style_paths])
    gen = _load_generator(_checkpoint_path(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with torch.no_grad():
        for i in range(styles.shape[0]):
            row = gen.stylize(contents, styles[i:i + 1].expand(contents.shape[0], -1, -1, -1))
            for j in range(row.shape[0]):
                save_image(row[j:j + 1], out / f"s{i}_c{j}.png")
            rows.append(row)
    sheet = tile([[row[j:j + 1] for j in range(row.shape[0])] for row in rows])
    save_image(sheet, out / "contact_sheet.png")
    print(f"{len(rows) * contents.shape[0]} images and contact_sheet.png in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_table, run_checks

    results = run_checks(epsilon=args.epsilon, only=args.only)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scinst", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("stylize", help="stylize one content image")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--checkpoint", help=f"defaults to ${CHECKPOINT_ENV}/latest.ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stylize)

    p = sub.add_parser("grid", help="stylize every content with every style")
    p.add_argument("--contents", required=True)
    p.add_argument("--styles", required=True)
    p.add_argument("--checkpoint", help=f"defaults to ${CHECKPOINT_ENV}/latest.ckpt")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPS, help="normalization epsilon under test")
    p.add_argument("--only", nargs="*", help="subset of check groups")
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, CheckpointError, DimensionError, ImageDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
