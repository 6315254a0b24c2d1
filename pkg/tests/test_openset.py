import numpy as np
import pytest

from triplet_embed.dataset import SplitSpec, Splits, generate_synthetic, make_splits, synthetic_class_names
from triplet_embed.errors import ProtocolError
from triplet_embed.network import GAP, L2NORM, RELU, Network, conv, dense
from triplet_embed.openset import evaluate_unseen


@pytest.fixture(scope="module")
def problem():
    full = generate_synthetic(6, 30, 16, 3)
    # classes 3..5 fall below the abundance threshold and become unseen
    samples = [s for s in full if s.class_id < 3 or int(s.source_path[-9:-4]) < 8]
    samples[-1:] = []  # leave the last unseen class with 7
    sp = make_splits(samples, SplitSpec(16, 4, 10, 20, 0), synthetic_class_names(6))
    images = np.stack([s.image.pixels for s in samples])
    net = Network([conv(4, 3), RELU, GAP, dense(6), L2NORM], 16, "standardize")
    return sp, images, net, net.init_params(1)


def test_disjoint_and_counts(problem):
    sp, images, net, params = problem
    run = evaluate_unseen(net, params, images, sp)
    assert run.class_names == ["03_bar", "04_triad", "05_crescent"]
    assert not set(run.labels.tolist()) & set(sp.train)
    assert run.counts == {"03_bar": 8, "04_triad": 8, "05_crescent": 7}
    np.testing.assert_allclose(np.linalg.norm(run.embeddings, axis=1), 1.0, atol=1e-12)
    assert run.report.confusion.sum() == 4 + 4 + 4


def test_params_untouched(problem):
    sp, images, net, params = problem
    before = [p.copy() for p in params]
    evaluate_unseen(net, params, images, sp, "knn", 3)
    assert all(np.array_equal(a, b) for a, b in zip(before, params))


def test_deterministic(problem):
    sp, images, net, params = problem
    a = evaluate_unseen(net, params, images, sp, "knn", 3, seed=4).to_tsv()
    assert a == evaluate_unseen(net, params, images, sp, "knn", 3, seed=4).to_tsv()
    assert a.startswith("#unseen_classes\nclass\tsamples\tscored\n03_bar\t8\tyes\n")


def test_tiny_classes_skipped(problem):
    sp, images, net, params = problem
    unseen = dict(sp.unseen_test)
    unseen[3] = unseen[3][:1]
    sp2 = Splits(sp.train, sp.val, sp.test, unseen, sp.class_names)
    run = evaluate_unseen(net, params, images, sp2)
    assert run.skipped == ["03_bar"] and "03_bar\t1\tno" in run.to_tsv()
    assert run.class_names == ["04_triad", "05_crescent"]


def test_no_scorable_class(problem):
    sp, images, net, params = problem
    unseen = {c: v[:1] for c, v in sp.unseen_test.items()}
    with pytest.raises(ProtocolError):
        evaluate_unseen(net, params, images, Splits(sp.train, sp.val, sp.test, unseen, sp.class_names))


def test_overlap_rejected(problem):
    sp, images, net, params = problem
    unseen = dict(sp.unseen_test)
    unseen[0] = sp.test[0]
    with pytest.raises(ProtocolError):
        evaluate_unseen(net, params, images, Splits(sp.train, sp.val, sp.test, unseen, sp.class_names))
