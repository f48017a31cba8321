"""``matter`` command line: synth, pretrain, change, wordmap, eval, sweep, inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (including failed acceptance criteria).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_state, parse_config, serialize_config
from .datapipe import DataError, filter_catalog, read_catalog, read_raster, synth_generate, write_raster
from .numcore import NumericalError, conv2d_nhwc
from .selfsup import pretrain, write_loss_curve
from .tasks import detect_change, evaluate_pairs, format_grid, format_metrics, prf1, rf_sweep, word_map
from .tern import TernStack

log = logging.getLogger("matter")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value config file (defaults apply when omitted)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key; repeatable, applied after --config")
    p.add_argument("--threads", type=int, metavar="N",
                   help="upper bound on worker threads (falls back to $MATTER_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matter", description="Self-supervised material and texture descriptors for imagery.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic multi-temporal corpus")
    _common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")

    p = sub.add_parser("pretrain", help="self-supervised pre-training from a catalog")
    _common(p)
    p.add_argument("--catalog", metavar="TSV", help="catalog manifest (overrides config key 'catalog')")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides 'output_dir')")
    p.add_argument("--resume", metavar="CKPT", help="continue from this checkpoint")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")

    p = sub.add_parser("change", help="change map between two co-registered rasters")
    _common(p)
    p.add_argument("image1", help="first MSR1 raster")
    p.add_argument("image2", help="second MSR1 raster")
    p.add_argument("--checkpoint", metavar="CKPT", help="trained checkpoint (overrides 'checkpoint')")
    p.add_argument("--gt", metavar="MSR", help="ground-truth change raster; adds precision/recall/F1")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--png", action="store_true", help="also write PNG previews")
    p.add_argument("--dump-tern", action="store_true",
                   help="write stem features before and after texture refinement as PNG heatmaps")

    p = sub.add_parser("wordmap", help="per-pixel visual word map of one raster")
    _common(p)
    p.add_argument("image", help="MSR1 raster")
    p.add_argument("--checkpoint", metavar="CKPT", help="trained checkpoint (overrides 'checkpoint')")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--png", action="store_true", help="also write a colour-coded PNG")
    p.add_argument("--dump-tern", action="store_true",
                   help="write stem features before and after texture refinement as PNG heatmaps")

    p = sub.add_parser("eval", help="run the acceptance suite A1-A9")
    _common(p)
    p.add_argument("--only", metavar="A1,A2,...", help="comma-separated subset of criteria")
    p.add_argument("--workdir", metavar="DIR", default="matter-eval", help="scratch directory (default: %(default)s)")

    p = sub.add_parser("sweep", help="F1 grid over training and inference crop sizes")
    _common(p)
    p.add_argument("--catalog", metavar="TSV", help="catalog manifest (overrides 'catalog')")
    p.add_argument("--pair", nargs=3, action="append", metavar=("IMG1", "IMG2", "GT"), default=[],
                   help="evaluation pair; repeatable")
    p.add_argument("--heldout", metavar="DIR", help="use every heldout/pairNN_{a,b,gt}.msr under DIR")
    p.add_argument("--train-sizes", default="7,17", help="comma-separated odd sizes (default: %(default)s)")
    p.add_argument("--infer-sizes", default="9", help="comma-separated odd sizes (default: %(default)s)")
    p.add_argument("--out", metavar="FILE", help="write the grid here instead of stdout")

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    _common(p)
    p.add_argument("checkpoint", help="checkpoint file")
    return parser


def _threads(args) -> int | None:
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        return args.threads
    env = os.environ.get("MATTER_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"MATTER_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("MATTER_THREADS must be positive")
        return n
    return None


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _require(value, what: str) -> str:
    if not value:
        raise ConfigError(f"missing required setting: {what}")
    return value


def _write_tsv(path: Path, rows) -> None:
    path.write_text(format_metrics(rows), encoding="utf-8")


def _png(path: Path, array: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(array).save(path)


def _gray(score: np.ndarray) -> np.ndarray:
    lo, hi = float(score.min()), float(score.max())
    scaled = (score - lo) / (hi - lo) if hi > lo else np.zeros_like(score)
    return (scaled * 255).round().astype(np.uint8)


def word_palette(cfg: RunConfig, n: int) -> np.ndarray:
    return np.random.default_rng(cfg.substream("palette")).integers(0, 256, size=(n, 3), dtype=np.uint8)


def tern_heatmaps(model, pixels: np.ndarray) -> tuple:
    """Channel-mean stem activations of a whole raster before and after refinement."""
    x = np.ascontiguousarray(pixels.astype(model.params["stem"].dtype).transpose(1, 2, 0))[None]
    stem = np.maximum(conv2d_nhwc(x, model.params["stem"], padding="reflect"), 0)
    refined = TernStack(pixels[None].astype(stem.dtype), model.cfg.tern).forward_nhwc(stem)
    return stem[0].mean(axis=-1), refined[0].mean(axis=-1)


def _dump_tern(model, pixels: np.ndarray, out: Path) -> None:
    before, after = tern_heatmaps(model, pixels)
    write_raster(out / "tern_before.msr", before[None])
    write_raster(out / "tern_after.msr", after[None])
    _png(out / "tern_before.png", _gray(before))
    _png(out / "tern_after.png", _gray(after))


def _load_model(args, cfg: RunConfig):
    path = _require(args.checkpoint or cfg.checkpoint, "--checkpoint or config key 'checkpoint'")
    ck = load_checkpoint(path)
    return ck


# subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = synth_generate(cfg.synth_spec(), args.out)
    print(f"wrote {len(out.entries)} images, {len(out.pairs)} held-out pairs, "
          f"{len(out.mosaics)} mosaics; catalog {out.catalog_path}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    catalog_path = _require(args.catalog or cfg.catalog, "--catalog or config key 'catalog'")
    out = Path(_require(args.out or cfg.output_dir, "--out or config key 'output_dir'"))
    out.mkdir(parents=True, exist_ok=True)
    catalog = filter_catalog(read_catalog(catalog_path), cfg.max_per_region)
    if not catalog:
        raise DataError("no catalog entries survive the cloud and coverage filter")
    if args.resume:
        ck = load_checkpoint(args.resume, None if args.force else cfg.config_hash())
        state = ck.state
        log.info("resuming at iteration %d", state.iteration)
    else:
        state = build_state(cfg)
    ckpt = out / "checkpoint.mtck"

    def on_checkpoint(s):
        save_checkpoint(s, ckpt, cfg)
        save_checkpoint(s, out / f"checkpoint_{s.iteration:07d}.mtck", cfg)

    pretrain(catalog, cfg.train_config(), state, on_checkpoint=on_checkpoint)
    write_loss_curve(out / "loss.tsv", state.losses)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    print(f"trained to iteration {state.iteration}; final loss {state.losses[-1] if state.losses else float('nan'):.4f}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_change(args, cfg: RunConfig) -> int:
    ck = _load_model(args, cfg)
    model = ck.state.model
    a, b = read_raster(args.image1), read_raster(args.image2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cm = detect_change(a, b, model, cfg.window, cfg.otsu_bins)
    write_raster(out / "score.msr", cm.score[None])
    write_raster(out / "mask.msr", cm.mask[None].astype(np.float32))
    rows = [("threshold", cm.threshold), ("degenerate", int(cm.degenerate)),
            ("changed_pixels", int(cm.mask.sum())), ("total_pixels", int(cm.mask.size))]
    if args.gt:
        gt = read_raster(args.gt)
        if gt.shape[0] != 1:
            raise DataError("ground-truth raster must have a single band")
        rows += prf1(cm.mask, gt[0] > 0.5).as_rows()
    _write_tsv(out / "metrics.tsv", rows)
    if args.png:
        _png(out / "score.png", _gray(cm.score))
        _png(out / "mask.png", (cm.mask * 255).astype(np.uint8))
    if args.dump_tern:
        _dump_tern(model, a, out)
    sys.stdout.write(format_metrics(rows))
    return EXIT_OK


def cmd_wordmap(args, cfg: RunConfig) -> int:
    ck = _load_model(args, cfg)
    model = ck.state.model
    img = read_raster(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wm = word_map(img, model, cfg.window)
    write_raster(out / "words.msr", wm.words[None].astype(np.float32))
    if args.png:
        _png(out / "words.png", word_palette(ck.config, wm.n_clusters)[wm.words])
    if args.dump_tern:
        _dump_tern(model, img, out)
    used = np.unique(wm.words)
    print(f"{used.size} distinct words of {wm.n_clusters}; map {out / 'words.msr'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .acceptance import CRITERIA, Suite
    keys = CRITERIA if not args.only else tuple(k.strip().upper() for k in args.only.split(",") if k.strip())
    unknown = [k for k in keys if k not in CRITERIA]
    if unknown:
        raise UsageError(f"unknown criteria: {', '.join(unknown)}")
    results = Suite(args.workdir, cfg).run(keys, report=lambda line: print(line, flush=True))
    failed = [r.key for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_OK if not failed else EXIT_NUMERICAL


def _sizes(text: str) -> list:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad size list {text!r}") from None
    if not sizes or any(s < 1 or s % 2 == 0 for s in sizes):
        raise UsageError(f"sizes must be positive odd integers, got {text!r}")
    return sizes


def cmd_sweep(args, cfg: RunConfig) -> int:
    catalog_path = _require(args.catalog or cfg.catalog, "--catalog or config key 'catalog'")
    train_sizes, infer_sizes = _sizes(args.train_sizes), _sizes(args.infer_sizes)
    triples = [tuple(p) for p in args.pair]
    if args.heldout:
        for a in sorted(Path(args.heldout, "heldout").glob("pair*_a.msr")):
            stem = str(a)[:-len("_a.msr")]
            triples.append((a, f"{stem}_b.msr", f"{stem}_gt.msr"))
    if not triples:
        raise UsageError("sweep needs at least one --pair or --heldout directory with pairs")
    pairs = [(read_raster(a), read_raster(b), read_raster(g)[0] > 0.5) for a, b, g in triples]
    catalog = filter_catalog(read_catalog(catalog_path), cfg.max_per_region)

    def train(cat, size):
        c = cfg.replace(train_patch=size)
        state = build_state(c)
        return pretrain(cat, c.train_config(), state).model

    grid = rf_sweep(catalog, train_sizes, infer_sizes, pairs, train)
    text = format_grid(train_sizes, infer_sizes, grid)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(args.checkpoint)
    st = ck.state
    rows = [("config_hash", ck.meta["config_hash"]), ("iteration", st.iteration), ("tensors", ck.meta["tensors"]),
            ("use_tern", ck.config.use_tern), ("use_residual_encoder", ck.config.use_residual_encoder),
            ("clusters", st.model.n_clusters), ("descriptor_dim", ck.config.descriptor_dim)]
    if st.losses:
        rows.append(("last_loss", st.losses[-1]))
    for name, p in st.model.named_parameters():
        rows.append((f"shape.{name}", "x".join(str(s) for s in p.shape)))
    sys.stdout.write(format_metrics(rows))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "change": cmd_change, "wordmap": cmd_wordmap,
            "eval": cmd_eval, "sweep": cmd_sweep, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = _threads(args)
        cfg = parse_config(args.config, args.set)
        with _thread_limit(threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"matter: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"matter: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"matter: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
