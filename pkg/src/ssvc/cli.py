"""Command-line interface: ``ssvc {gen-data,train,convert,eval,ablate,plot}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .features import DomainPair, FeatureFileError, load_corpus, load_features, save_corpus, save_features, synth_dataset
from .metrics import mcd, msd, report_csv
from .trainer import (
    DEFAULT_GRID,
    EPOCH_HEADER,
    STABILITY_HEADER,
    CheckpointError,
    ablate,
    ablation_csv,
    conversion_pairs,
    convert,
    convert_array,
    epoch_row,
    epochs_csv_header,
    load_checkpoint,
    save_checkpoint,
    stability_row,
    train,
)

PROG = "ssvc"
log = logging.getLogger(PROG)


class CliError(Exception):
    pass


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_gen_data(args) -> None:
    run = cfgmod.load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synth_dataset(run.synth)
    manifests = save_corpus(corpus, out)
    (out / "config.txt").write_text(cfgmod.dump_config(run))
    print(f"wrote {len(corpus.train)} train / {len(corpus.eval)} eval utterances; manifests: "
          + ", ".join(str(p) for p in manifests.values()))


def cmd_train(args) -> None:
    run = cfgmod.with_weights(cfgmod.load_config(args.config), args.lambda1, args.lambda2)
    corpus = load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = corpus.train.n_domains
    timing = []
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(epochs_csv_header(n))

        def on_epoch(e):
            w.writerow(epoch_row(e, n))
            fh.flush()
            timing.append((e.epoch, f"{e.wall_ms:.3f}"))

        result = train(corpus, run.train, on_epoch)
    _write_csv(out / "timing.csv", ("epoch", "wall_ms"), timing)
    _write_csv(out / "stability.csv", STABILITY_HEADER, [stability_row(result)])
    save_checkpoint(out / "checkpoint.ckpt", result.state, result.config)
    (out / "config.txt").write_text(cfgmod.dump_config(cfgmod.RunConfig(result.config, run.synth)))
    print(f"trained {len(result.logs)} epochs; eval MCD {result.initial_mcd:.3f} -> {result.final_mcd:.3f} dB; "
          f"d_loss std (last {result.window}) {result.stability:.5f}")


def cmd_convert(args) -> None:
    state, _ = load_checkpoint(args.ckpt)
    fm = load_features(args.inp)
    y = convert(state.G, fm, DomainPair(args.src, args.trg))
    save_features(args.out, y)


def cmd_eval(args) -> None:
    state, _ = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data)
    rows = []
    for k, (s, t) in enumerate(conversion_pairs(corpus.eval.n_domains, args.identity), 1):
        xs = corpus.eval.of_domain(s)
        ys = convert_array(state.G, xs, s, t)
        proto = corpus.prototypes[t - 1]
        rows.append((k, s, t, float(np.mean([mcd(y, proto) for y in ys])), float(np.mean([msd(y, proto) for y in ys]))))
    text = report_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _parse_grid(spec: str | None) -> list[tuple[float, float]]:
    if spec is None:
        return list(DEFAULT_GRID)
    text = Path(spec).read_text() if Path(spec).is_file() else spec.replace(";", "\n")
    grid = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise CliError(f"grid entry {line!r} must hold two numbers")
        try:
            grid.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise CliError(f"grid entry {line!r} is not numeric") from exc
    if not grid:
        raise CliError("grid is empty")
    return grid


def cmd_ablate(args) -> None:
    run = cfgmod.load_config(args.config)
    corpus = load_corpus(args.data)
    rows = ablate(corpus, run.train, _parse_grid(args.grid))
    text = ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_epochs(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0][: len(EPOCH_HEADER)]) != EPOCH_HEADER:
        raise CliError(f"{path}: not an epochs.csv (header mismatch)")
    try:
        data = np.array([[float(v) for v in r[:2]] for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise CliError(f"{path}: malformed row") from exc
    if data.size == 0:
        raise CliError(f"{path}: no epochs")
    return data[:, 0], data[:, 1]


def cmd_plot(args) -> None:
    series = [(Path(p).parent.name or Path(p).stem, *_read_epochs(p)) for p in args.epochs_csv]
    out = Path(args.out)
    csv_path = out if out.suffix == ".csv" else out.with_suffix(".csv")
    n_max = max(len(s[1]) for s in series)
    stride = max(1, int(np.ceil(n_max / args.max_points)))
    rows = []
    for name, ep, loss in series:
        rows += [(name, int(e), repr(float(v))) for e, v in zip(ep[::stride], loss[::stride])]
    _write_csv(csv_path, ("series", "epoch", "d_loss"), rows)
    if out.suffix == ".csv":
        return
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; wrote %s only", csv_path)
        return
    fig, ax = plt.subplots(figsize=(6, 3.5))
    styles = ["-", "--", ":", "-."]
    for i, (name, ep, loss) in enumerate(series):
        ax.plot(ep, loss, styles[i % len(styles)], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("discriminator loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Contrastive-discriminator StarGAN conversion on feature maps")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic multi-speaker corpus")
    g.add_argument("--config")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train G and D; writes checkpoint, epochs.csv, stability.csv")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("convert", help="convert one feature file")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--src", type=int, required=True)
    c.add_argument("--trg", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)

    e = sub.add_parser("eval", help="MCD/MSD over every conversion pair of the eval set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--identity", action="store_true", help="also score source == target pairs")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train once per (lambda1, lambda2) grid point")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", help="file or 'l1,l2;l1,l2' list; default is the six-point table grid")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="discriminator-loss trace (PNG plus CSV)")
    pl.add_argument("--epochs-csv", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--max-points", type=int, default=500)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SSVC_LOG_LEVEL", "WARNING").upper(), format="%(name)s: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, cfgmod.ConfigError, FeatureFileError, CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
