"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The two training runs take a few minutes of CPU between them.
"""

import os
import time

import numpy as np

from triplet_embed.classify import half_split_evaluate
from triplet_embed.cli import read_embeddings, read_vectors, run
from triplet_embed.dataset import SplitSpec, generate_synthetic, make_splits, synthetic_class_names
from triplet_embed.index import BallTree, brute_force
from triplet_embed.network import Network, center_output_bias, desk_layers, network_gradient_check
from triplet_embed.openset import evaluate_unseen
from triplet_embed.triplet import TrainConfig, train, triplet_grads, triplet_loss


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_gradient_correctness(criterion):
    t0 = time.process_time()
    samples = generate_synthetic(8, 10, 32, 5)
    images = np.stack([s.image.pixels for s in samples])
    labels = np.array([s.class_id for s in samples])
    alpha = 5.0  # above the squared diameter of the sphere: the hinge is active everywhere
    worst, raw, kinked, checked, min_loss = 0.0, 0.0, 0, 0, np.inf
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c, d = rng.choice(8, 2, replace=False)
        a, p = rng.choice(np.flatnonzero(labels == c), 2, replace=False)
        n = rng.choice(np.flatnonzero(labels == d))
        x = images[[a, p, n]]
        net = Network(desk_layers(128), 32, "standardize")
        params = center_output_bias(net, net.init_params(seed), images)
        y, cache = net.forward(params, x)
        min_loss = min(min_loss, float(triplet_loss(y[0], y[1], y[2], alpha)))
        ana = net.backward(params, cache, np.stack(triplet_grads(y[0], y[1], y[2], alpha)))
        res = network_gradient_check(
            net, params, x, lambda v: triplet_loss(v[:, 0], v[:, 1], v[:, 2], alpha), ana, 1e-5)
        worst = max(worst, res.max_error)
        raw = max(raw, res.raw_max_error)
        kinked += res.kinked
        checked += res.checked
    elapsed = time.process_time() - t0
    ok = worst < 1e-3 and min_loss > 0 and kinked < 0.01 * (checked + kinked) and elapsed < 120
    criterion(ok, f"max rel err {worst:.2e} over 20 seeds, {checked} entries compared, "
                  f"{kinked} straddling a ReLU/max-pool kink excluded (max {raw:.2e} with them), "
                  f"min loss {min_loss:.3f}, {elapsed:.0f}s CPU")
    assert ok


def test_ball_tree_exactness(criterion):
    mismatches, total = 0, 0
    for d in (16, 128):
        rng = np.random.default_rng(d)
        pts, qs = unit_rows(rng, 1000, d), unit_rows(rng, 100, d)
        tree = BallTree(pts)
        tree.check_invariants()
        for k in (1, 5, 10):
            for q in qs:
                a, b = tree.query(q, k), brute_force(pts, q, k)
                total += 1
                if not (np.array_equal(a.indices, b.indices) and np.array_equal(a.distances, b.distances)):
                    mismatches += 1
    criterion(mismatches == 0, f"{mismatches} mismatches in {total} queries")
    assert mismatches == 0


def test_triplet_loss_algebra(criterion):
    rng = np.random.default_rng(0)
    n, dim, h = 2000, 8, 1e-6
    a, p, neg = (unit_rows(rng, n, dim) for _ in range(3))
    alpha = rng.uniform(0.1, 2.0, n)
    loss = np.array([triplet_loss(a[i], p[i], neg[i], alpha[i]) for i in range(n)])
    dp, dn = ((a - p) ** 2).sum(1), ((a - neg) ** 2).sum(1)
    nonneg = bool(np.all(loss >= 0))
    clamp = bool(np.all(loss[dn >= dp + alpha] == 0))
    ident = float(np.max(np.abs(dp - (2 - 2 * (a * p).sum(1)))))
    fd_worst, n_fd = 0.0, 0
    for i in np.flatnonzero(loss > 1e-3)[:300]:
        grads = triplet_grads(a[i], p[i], neg[i], alpha[i])
        scale = max(np.max(np.abs(g)) for g in grads)
        for which, g in enumerate(grads):
            for j in range(dim):
                args_p, args_m = [a[i], p[i], neg[i]], [a[i], p[i], neg[i]]
                e = np.zeros(dim)
                e[j] = h
                args_p[which] = args_p[which] + e
                args_m[which] = args_m[which] - e
                num = (triplet_loss(*args_p, alpha[i]) - triplet_loss(*args_m, alpha[i])) / (2 * h)
                fd_worst = max(fd_worst, abs(num - g[j]) / scale)
        n_fd += 1
    ok = nonneg and clamp and fd_worst < 1e-6 and ident < 1e-9
    criterion(ok, f"nonnegative {nonneg}, clamp {clamp}, gradient vs FD {fd_worst:.1e} on {n_fd} "
                  f"active triplets, chord identity {ident:.1e}")
    assert ok


def test_end_to_end_desk_training(criterion):
    t0 = time.process_time()
    samples = generate_synthetic(8, 200, 32, 7)
    sp = make_splits(samples, SplitSpec(32, 50, 50, 100, 1), synthetic_class_names(8))
    images = np.stack([s.image.pixels for s in samples])
    net = Network(desk_layers(16), 32, "standardize")
    params, hist = train(TrainConfig(iterations=40, seed=0), sp, images, net)
    idx = np.concatenate([sp.test[c] for c in sorted(sp.test)])
    labels = np.array([samples[i].class_id for i in idx])
    report = half_split_evaluate(net.embed(params, images[idx]), labels, "centroid", seed=0,
                                 class_names=sp.class_names).report
    first, last = hist.records[0], hist.records[-1]
    shrunk = float(np.mean(last.radius < first.radius))
    elapsed = time.process_time() - t0
    ok = report.macro_f1 >= 0.90 and shrunk >= 0.75 and last.iteration == 40 and elapsed < 900
    criterion(ok, f"test-half centroid macro-F1 {report.macro_f1:.3f}, radius shrank for "
                  f"{shrunk:.0%} of classes (mean {first.radius.mean():.3f} -> {last.radius.mean():.3f}), "
                  f"{elapsed:.0f}s CPU")
    assert ok


def test_open_set_desk_experiment(criterion):
    t0 = time.process_time()
    full = generate_synthetic(10, 200, 32, 7)
    # classes 6..9 keep 100 images, below the abundance threshold: never trained on
    samples = [s for s in full if s.class_id < 6 or int(s.source_path[-9:-4]) < 100]
    sp = make_splits(samples, SplitSpec(32, 50, 50, 150, 1), synthetic_class_names(10))
    assert sp.seen_classes == [0, 1, 2, 3, 4, 5] and sp.unseen_classes == [6, 7, 8, 9]
    images = np.stack([s.image.pixels for s in samples])
    net = Network(desk_layers(16), 32, "standardize")
    params, _ = train(TrainConfig(iterations=40, seed=0), sp, images, net)
    run_ = evaluate_unseen(net, params, images, sp, "knn", 10, seed=0)
    f1 = run_.report.macro_f1
    elapsed = time.process_time() - t0
    ok = f1 >= 0.50 and elapsed < 1200
    criterion(ok, f"unseen 4-class kNN (k=10) macro-F1 {f1:.3f} vs chance 0.25, {elapsed:.0f}s CPU")
    assert ok


def test_protocol_fidelity(criterion):
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(4), 100)
    emb = np.eye(4)[labels] + rng.standard_normal((400, 4)) * 0.6
    res = half_split_evaluate(emb, labels, "centroid", seed=0, class_names=list("ABCD"))
    ref_counts = np.bincount(labels[res.reference]).tolist()
    ev_counts = np.bincount(labels[res.evaluation]).tolist()
    rows = res.report.to_tsv().split("#confoundings\n")[1].splitlines()
    header_ok = rows[0] == "true\tpredicted\trate"
    granular = True
    for t, p, rate in res.report.confoundings:
        granular &= abs(rate * 50 - round(rate * 50)) < 1e-9
    for line in rows[1:]:
        t, p, r = line.split("\t")
        granular &= len(r.split(".")[1]) == 3 and abs(float(r) * 50 - round(float(r) * 50)) < 1e-9
    ok = ref_counts == ev_counts == [50] * 4 and header_ok and granular and len(rows) > 1
    criterion(ok, f"reference {ref_counts}, evaluation {ev_counts}, {len(rows) - 1} confoundings "
                  f"at 1/50 granularity, e.g. {rows[1].replace(chr(9), ' ') if len(rows) > 1 else '-'}")
    assert ok


def _pipeline(root, threads=None):
    steps = [
        ["synth", "--out", "data", "--classes", "5", "--per-class", "24", "--seed", "4"],
        ["split", "--data", "data", "--val", "4", "--test", "8", "--min-abundance", "20",
         "--seed", "2", "--out", "m.tsv"],
        ["train", "--manifest", "m.tsv", "--iterations", "3", "--batches-per-iteration", "5",
         "--embedding-dim", "8", "--out", "out/model.bin"],
        ["embed", "--model", "out/model.bin", "--manifest", "m.tsv", "--out", "out/emb.tsv"],
        ["evaluate", "--model", "out/model.bin", "--manifest", "m.tsv", "--mode", "knn", "--k", "3",
         "--sweep", "--out", "out/eval.tsv"],
        ["evaluate-unseen", "--model", "out/model.bin", "--manifest", "m.tsv", "--out", "out/unseen.tsv"],
        ["export-projector", "--embeddings", "out/emb.tsv", "--out-dir", "proj"],
    ]
    cwd, env = os.getcwd(), os.environ.get("TRIPLET_EMBED_THREADS")
    os.makedirs(root)
    os.chdir(root)
    if threads:
        os.environ["TRIPLET_EMBED_THREADS"] = threads
    try:
        codes = [run(steps[0])]
        for cls in ("03_bar", "04_triad"):  # make two classes rare enough to be unseen
            for f in sorted(os.listdir(os.path.join("data", cls)))[10:]:
                os.remove(os.path.join("data", cls, f))
        codes += [run(s) for s in steps[1:]]
    finally:
        os.chdir(cwd)
        if env is None:
            os.environ.pop("TRIPLET_EMBED_THREADS", None)
        else:
            os.environ["TRIPLET_EMBED_THREADS"] = env
    files = {}
    for d, _, names in os.walk(root):
        for name in names:
            path = os.path.join(d, name)
            with open(path, "rb") as fh:
                files[os.path.relpath(path, root)] = fh.read()
    return codes, files


def test_cli_determinism(criterion, tmp_path):
    codes_a, a = _pipeline(str(tmp_path / "a"))
    codes_b, b = _pipeline(str(tmp_path / "b"))
    codes_c, c = _pipeline(str(tmp_path / "c"), threads="4")
    differ = sorted(k for k in a if a[k] != b.get(k)) + sorted(set(b) - set(a))
    differ_threads = sorted(k for k in a if a[k] != c.get(k))
    outputs = [k for k in a if k.startswith(("out", "proj")) or k == "m.tsv"]
    ok = (codes_a == codes_b == codes_c == [0] * 7 and not differ and not differ_threads
          and any(k.endswith(".png") for k in outputs))
    criterion(ok, f"{len(a)} files from 7 subcommands ({len(outputs)} outputs incl. "
                  f"{sum(k.endswith('.png') for k in outputs)} PNGs); differing on rerun: {differ or 'none'}, "
                  f"with 4 threads: {differ_threads or 'none'}")
    assert ok


def test_projector_export(criterion, tmp_path):
    codes, files = _pipeline(str(tmp_path / "p"))
    root = tmp_path / "p"
    _, names, _, emb = read_embeddings(str(root / "out" / "emb.tsv"))
    vec_text = (root / "proj" / "vectors.tsv").read_text(encoding="utf-8")
    meta_lines = (root / "proj" / "metadata.tsv").read_text(encoding="utf-8").split("\n")
    vec_lines = vec_text.split("\n")
    shape_ok = vec_lines[-1] == "" and meta_lines[-1] == "" and len(vec_lines) == len(meta_lines)
    fields_ok = all(len(line.split("\t")) == emb.shape[1] for line in vec_lines[:-1])
    back = read_vectors(str(root / "proj" / "vectors.tsv"))
    err = float(np.max(np.abs(back - emb)))
    ok = codes == [0] * 7 and shape_ok and fields_ok and err <= 1e-9 and meta_lines[:-1] == names
    criterion(ok, f"{len(vec_lines) - 1} vectors x {emb.shape[1]} tab-separated floats, "
                  f"{len(meta_lines) - 1} labels, round-trip error {err:.1e}")
    assert ok
