"""Command-line front end.

    triplet-embed synth            write a synthetic PGM corpus
    triplet-embed split            build a train/val/test/unseen manifest
    triplet-embed train            train a model, write checkpoint + history
    triplet-embed embed            write an embeddings TSV
    triplet-embed evaluate         half-split evaluation on a seen split
    triplet-embed evaluate-unseen  half-split evaluation on unseen classes
    triplet-embed export-projector vectors.tsv / metadata.tsv for an embedding projector

``TRIPLET_EMBED_THREADS`` caps the number of worker threads.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint, plots
from .classify import DEFAULT_K, K_SWEEP, half_split_evaluate
from .dataset import (
    DEFAULT_PAD, DEFAULT_SIZE, FULL_SIZE, SplitSpec, generate_synthetic, load_corpus,
    load_manifest, make_splits, synthetic_class_names, write_corpus, write_manifest,
)
from .errors import EmbedError
from .metrics import fmt
from .network import Network, desk_layers
from .openset import evaluate_unseen
from .triplet import MarginSchedule, TrainConfig, train

log = logging.getLogger("triplet_embed")

THREADS_ENV = "TRIPLET_EMBED_THREADS"


class UsageError(Exception):
    """Bad flags or configuration values; exits with status 2."""


def worker_count():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return min(n, os.cpu_count() or 1)


def ensure_parent(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def write_text(path, text):
    ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def sibling(path, suffix):
    """``out/model.bin`` + ``.history.tsv`` -> ``out/model.history.tsv``"""
    root, _ = os.path.splitext(path)
    return root + suffix


# ---------------------------------------------------------------------------
# Embedding and projector files


def export_projector(embeddings, labels, out_dir):
    """Write ``vectors.tsv`` and ``metadata.tsv``; line i of both is sample i."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or len(embeddings) == 0 or len(labels) != len(embeddings):
        raise EmbedError("projector export needs N >= 1 vectors with one label each")
    os.makedirs(out_dir, exist_ok=True)
    vec = os.path.join(out_dir, "vectors.tsv")
    meta = os.path.join(out_dir, "metadata.tsv")
    write_text(vec, "".join("\t".join(fmt(v) for v in row) + "\n" for row in embeddings))
    write_text(meta, "".join(f"{lab}\n" for lab in labels))
    return vec, meta


def read_vectors(path):
    with open(path, encoding="utf-8") as fh:
        return np.array([[float(v) for v in line.rstrip("\n").split("\t")] for line in fh])


def embeddings_tsv(splits_col, classes_col, paths_col, emb):
    d = emb.shape[1]
    lines = ["\t".join(["split", "class", "path"] + [f"e{j}" for j in range(d)])]
    for s, c, p, row in zip(splits_col, classes_col, paths_col, emb):
        lines.append("\t".join([s, c, p] + [fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def read_embeddings(path):
    """Return (splits, class names, paths, (N, D) array) from an embeddings TSV."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["split", "class", "path"]:
            raise EmbedError(f"{path}: not an embeddings TSV")
        sp, cl, pa, rows = [], [], [], []
        for line in fh:
            v = line.rstrip("\n").split("\t")
            sp.append(v[0])
            cl.append(v[1])
            pa.append(v[2])
            rows.append([float(x) for x in v[3:]])
    return sp, cl, pa, np.array(rows)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    """Training run settings; config file values are overridden by flags."""

    manifest: str = ""
    out: str = ""
    history: str = ""
    size: int = DEFAULT_SIZE
    pad: float = DEFAULT_PAD
    embedding_dim: int = 128
    input_norm: str = "standardize"
    batch_size: int = 20
    batches_per_iteration: int = 100
    iterations: int = 40
    margins: str = str(MarginSchedule())
    lr: float = 0.01
    decay: float = 0.9
    momentum: float = 0.0
    seed: int = 0
    val_cap: int = 50
    negative_sampling: str = "sample"
    center_init: bool = True
    figures: bool = True

    def train_config(self):
        try:
            return TrainConfig(
                batch_size=self.batch_size, batches_per_iteration=self.batches_per_iteration,
                iterations=self.iterations, margins=MarginSchedule.parse(self.margins),
                learning_rate=self.lr, decay=self.decay, momentum=self.momentum, seed=self.seed,
                val_cap=self.val_cap, negative_sampling=self.negative_sampling,
                center_init=self.center_init)
        except ValueError as e:
            raise UsageError(f"invalid training configuration: {e}")

    def network(self):
        try:
            return Network(desk_layers(self.embedding_dim), self.size, self.input_norm)
        except EmbedError as e:
            raise UsageError(f"invalid network configuration: {e}")


def _coerce(name, typ, raw):
    if typ is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"{name}: cannot read {raw!r} as {typ.__name__}")


def read_config(path):
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes and underscores are equivalent."""
    types = {f.name: f.type for f in fields(RunConfig)}
    types = {k: {"int": int, "float": float, "str": str, "bool": bool}.get(v, v) if isinstance(v, str) else v
             for k, v in types.items()}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, types[key], raw)
    return values


def build_run_config(args):
    if args.config and not os.path.isfile(args.config):
        raise UsageError(f"config file {args.config} does not exist")
    values = read_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = RunConfig(**values)
    if not cfg.manifest or not cfg.out:
        raise UsageError("train needs --manifest and --out (flags or config file)")
    if not os.path.isfile(cfg.manifest):
        raise UsageError(f"manifest {cfg.manifest} does not exist")
    return cfg


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args):
    samples = generate_synthetic(args.classes, args.per_class, args.size, args.seed)
    names = synthetic_class_names(args.classes)
    write_corpus(args.out, samples, names, args.maxval)
    log.info("wrote %d images in %d classes under %s", len(samples), len(names), args.out)


def cmd_split(args):
    try:
        spec = SplitSpec(DEFAULT_SIZE, args.val, args.test, args.min_abundance, args.seed)
    except EmbedError as e:
        raise UsageError(str(e))
    samples, names = load_corpus(args.data)
    splits = make_splits(samples, spec, names)
    write_manifest(args.out, splits, samples)
    log.info("%d seen and %d unseen classes -> %s", len(splits.seen_classes),
             sum(1 for c in splits.unseen_classes if splits.unseen_test[c]), args.out)


def cmd_train(args):
    cfg = build_run_config(args)
    tc = cfg.train_config()
    net = cfg.network()
    data = load_manifest(cfg.manifest, cfg.size, cfg.pad)
    params, hist = train(tc, data.splits, data.images, net)
    ensure_parent(cfg.out)
    checkpoint.save(cfg.out, net, params)
    history = cfg.history or sibling(cfg.out, ".history.tsv")
    write_text(history, hist.to_tsv())
    if cfg.figures:
        plots.plot_history(hist, sibling(history, ".png"))
    log.info("model -> %s, history -> %s", cfg.out, history)


def _load_split_embeddings(args, split):
    net, params = checkpoint.load(args.model)
    data = load_manifest(args.manifest, net.input_size, args.pad)
    if split == "all":
        idx = np.arange(len(data.labels))
    else:
        idx = np.array([i for i, s in enumerate(data.split_of) if s == split], dtype=np.int64)
    if len(idx) == 0:
        raise EmbedError(f"manifest has no {split!r} samples")
    emb = net.embed(params, data.images[idx], threads=worker_count())
    return net, params, data, idx, emb


def cmd_embed(args):
    net, params, data, idx, emb = _load_split_embeddings(args, args.split)
    names = data.splits.class_names
    text = embeddings_tsv([data.split_of[i] for i in idx], [names[data.labels[i]] for i in idx],
                          [data.paths[i] for i in idx], emb)
    write_text(args.out, text)


def _report_figures(report, out, title):
    plots.plot_f1(report, sibling(out, ".f1.png"), title)
    plots.plot_confusion(report, sibling(out, ".confusion.png"))


def cmd_evaluate(args):
    if args.embeddings:
        sp, cl, _, emb = read_embeddings(args.embeddings)
        keep = np.array([s == args.split or args.split == "all" for s in sp])
        if not keep.any():
            raise EmbedError(f"no {args.split!r} rows in {args.embeddings}")
        names = sorted(set(cl))
        labels = np.array([names.index(c) for c in cl])[keep]
        emb = emb[keep]
    else:
        if not (args.model and args.manifest):
            raise UsageError("evaluate needs --embeddings or both --model and --manifest")
        _, _, data, idx, emb = _load_split_embeddings(args, args.split)
        names, labels = data.splits.class_names, data.labels[idx]
    res = half_split_evaluate(emb, labels, args.mode, args.k, args.seed, names)
    write_text(args.out, res.report.to_tsv())
    if args.figures:
        _report_figures(res.report, args.out, f"{args.split} split, {args.mode}"
                        + (f" k={args.k}" if args.mode == "knn" else ""))
    if args.sweep:
        ks = [k for k in K_SWEEP if k <= len(res.reference)]
        f1 = [half_split_evaluate(emb, labels, "knn", k, args.seed, names).report.macro_f1 for k in ks]
        cf1 = half_split_evaluate(emb, labels, "centroid", args.k, args.seed, names).report.macro_f1
        lines = ["k\tmacro_f1"] + [f"{k}\t{fmt(v)}" for k, v in zip(ks, f1)] + [f"centroid\t{fmt(cf1)}"]
        write_text(sibling(args.out, ".sweep.tsv"), "\n".join(lines) + "\n")
        if args.figures:
            plots.plot_k_sweep(ks, f1, sibling(args.out, ".sweep.png"), cf1)
    log.info("macro F1 %.4f, accuracy %.4f -> %s", res.report.macro_f1, res.report.accuracy, args.out)


def cmd_evaluate_unseen(args):
    net, params = checkpoint.load(args.model)
    data = load_manifest(args.manifest, net.input_size, args.pad)
    run = evaluate_unseen(net, params, data.images, data.splits, args.mode, args.k, args.seed)
    write_text(args.out, run.to_tsv())
    if args.figures:
        _report_figures(run.report, args.out, f"unseen classes, {args.mode}")
    log.info("unseen macro F1 %.4f over %d classes -> %s", run.report.macro_f1,
             len(run.class_names), args.out)


def cmd_export_projector(args):
    sp, cl, _, emb = read_embeddings(args.embeddings)
    keep = [i for i, s in enumerate(sp) if args.split in ("all", s)]
    if not keep:
        raise EmbedError(f"no {args.split!r} rows in {args.embeddings}")
    export_projector(emb[keep], [cl[i] for i in keep], args.out_dir)


# ---------------------------------------------------------------------------
# Parser


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    fmt_cls = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="triplet-embed", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="write a synthetic PGM corpus", formatter_class=fmt_cls)
    s.add_argument("--out", required=True, help="corpus root directory")
    s.add_argument("--classes", type=int, default=8, help="number of shape classes")
    s.add_argument("--per-class", type=int, default=200, help="images per class")
    s.add_argument("--size", type=int, default=DEFAULT_SIZE, help="image side in pixels")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--maxval", type=int, default=255, help="PGM maxval (255 or up to 65535)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="build a split manifest from a corpus", formatter_class=fmt_cls)
    s.add_argument("--data", required=True, help="corpus root, one subdirectory per class")
    s.add_argument("--val", type=int, default=100, help="validation images per seen class")
    s.add_argument("--test", type=int, default=100, help="test images per seen class (cap for unseen)")
    s.add_argument("--min-abundance", type=int, default=500, help="classes at or above this count are trained on")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="manifest TSV path")
    s.set_defaults(func=cmd_split)

    d = RunConfig()
    s = sub.add_parser("train", help="train the embedding network")
    s.add_argument("--manifest", help="split manifest")
    s.add_argument("--config", help="key = value file; flags override it")
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--history", help="history TSV path (default: next to the checkpoint)")
    s.add_argument("--size", type=int, help=f"input side S (default {d.size}; full size {FULL_SIZE})")
    s.add_argument("--pad", type=float, help=f"padding intensity (default {d.pad})")
    s.add_argument("--embedding-dim", type=_positive, help=f"embedding dimension D (default {d.embedding_dim})")
    s.add_argument("--input-norm", choices=("none", "standardize"),
                   help=f"per-image input normalization (default {d.input_norm})")
    s.add_argument("--batch-size", type=_positive, help=f"triplets per batch (default {d.batch_size})")
    s.add_argument("--batches-per-iteration", type=_positive,
                   help=f"batches per iteration (default {d.batches_per_iteration})")
    s.add_argument("--iterations", type=int, help=f"training iterations (default {d.iterations})")
    s.add_argument("--margins", help=f"margin schedule iteration:alpha,... (default {d.margins})")
    s.add_argument("--lr", type=float, help=f"initial learning rate (default {d.lr})")
    s.add_argument("--decay", type=float, help=f"learning-rate decay per iteration (default {d.decay})")
    s.add_argument("--momentum", type=float, help=f"SGD momentum (default {d.momentum})")
    s.add_argument("--seed", type=int, help=f"random seed (default {d.seed})")
    s.add_argument("--val-cap", type=_positive,
                   help=f"validation samples per class for diagnostics (default {d.val_cap})")
    s.add_argument("--negative-sampling", choices=("sample", "class"),
                   help=f"negative drawn uniformly over samples or over classes (default {d.negative_sampling})")
    s.add_argument("--center-init", dest="center_init", action="store_const", const=True,
                   help="center the output bias on initial features (default on)")
    s.add_argument("--no-center-init", dest="center_init", action="store_const", const=False)
    s.add_argument("--no-figures", dest="figures", action="store_const", const=False,
                   help="skip the history figure")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="embed manifest images into a TSV", formatter_class=fmt_cls)
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="all", choices=("all", "train", "val", "test", "unseen"))
    s.add_argument("--pad", type=float, default=DEFAULT_PAD)
    s.add_argument("--out", required=True, help="embeddings TSV path")
    s.set_defaults(func=cmd_embed)

    for name, func, helptext in (("evaluate", cmd_evaluate, "half-split evaluation on a seen split"),
                                 ("evaluate-unseen", cmd_evaluate_unseen, "half-split evaluation on unseen classes")):
        s = sub.add_parser(name, help=helptext, formatter_class=fmt_cls)
        s.add_argument("--model", required=name == "evaluate-unseen")
        s.add_argument("--manifest", required=name == "evaluate-unseen")
        if name == "evaluate":
            s.add_argument("--embeddings", help="embeddings TSV instead of --model/--manifest")
            s.add_argument("--split", default="test", choices=("all", "train", "val", "test", "unseen"))
            s.add_argument("--sweep", action="store_true",
                           help=f"also score kNN for k in {list(K_SWEEP)}")
        s.add_argument("--mode", default="centroid", choices=("centroid", "knn"))
        s.add_argument("--k", type=_positive, default=DEFAULT_K, help="neighbors for kNN")
        s.add_argument("--seed", type=int, default=0, help="half-split seed")
        s.add_argument("--pad", type=float, default=DEFAULT_PAD)
        s.add_argument("--out", required=True, help="report TSV path")
        s.add_argument("--no-figures", dest="figures", action="store_false")
        s.set_defaults(func=func)

    s = sub.add_parser("export-projector", help="projector vectors.tsv and metadata.tsv",
                       formatter_class=fmt_cls)
    s.add_argument("--embeddings", required=True, help="embeddings TSV from `embed`")
    s.add_argument("--split", default="all", choices=("all", "train", "val", "test", "unseen"))
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_export_projector)
    return p


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"triplet-embed: error: {e}", file=sys.stderr)
        return 2
    except (EmbedError, OSError) as e:
        print(f"triplet-embed: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
