import math

import numpy as np
import pytest
from scipy import stats

from earlytls.classifier import (Dataset, DecisionTree, EmptyCounts, EmptyDataset, FormatError,
                                 Leaf, Split, TrainParams, best_split, deserialize, entropy,
                                 normal_ppf, pessimistic_error, predict, serialize, train)

from oracles import exhaustive_best_split


def random_data(rng, n, m=5, k=3, levels=6):
    X = rng.integers(0, levels, size=(n, m)).astype(float)
    y = rng.integers(0, k, size=n)
    return X, y


def test_entropy_matches_formula():
    assert entropy([5, 5]) == 1.0
    assert entropy({"a": 4}) == 0.0
    assert math.isclose(entropy([1, 2, 1]), 1.5, abs_tol=1e-12)
    assert entropy([3, 0, 3]) == 1.0
    with pytest.raises(EmptyCounts):
        entropy([0, 0])


@pytest.mark.parametrize("seed", range(8))
def test_best_split_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    found = 0
    for _ in range(25):
        X, y = random_data(rng, int(rng.integers(2, 30)), k=int(rng.integers(2, 5)))
        k = int(y.max()) + 1
        for f in range(X.shape[1]):
            for cat in (False, True):
                for min_leaf in (1, 2, 3):
                    got = best_split(X, y, f, cat, min_leaf, k)
                    want = exhaustive_best_split(X[:, f], y, cat, min_leaf, k)
                    assert (got is None) == (want is None)
                    if got is not None:
                        found += 1
                        assert got[0] == want[0]
                        assert math.isclose(got[1], want[1], abs_tol=1e-12)
                        assert math.isclose(got[2], want[2], abs_tol=1e-12)
    assert found > 100  # the oracle is not comparing Nones only


def test_best_split_ties_pick_smallest_threshold():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 1, 1, 0])
    # x<=1.5 and x<=3.5 score the same
    (kind, value), _, _ = best_split(X, y, 0, False, 1)
    assert (kind, value) == ("le", 1.5)


def test_best_split_degenerate():
    X = np.array([[1.0], [1.0], [1.0]])
    assert best_split(X, np.array([0, 1, 0]), 0, False, 1) is None  # constant feature
    assert best_split(np.array([[1.0], [2.0]]), np.array([1, 1]), 0, False, 1) is None  # pure
    assert best_split(np.array([[1.0], [2.0], [3.0]]), np.array([0, 1, 1]), 0, False, 2) is None


def test_threshold_midpoint_handles_close_floats():
    a = 1.0
    b = np.nextafter(a, 2.0)
    X = np.array([[a], [a], [b], [b]])
    (kind, value), _, _ = best_split(X, np.array([0, 0, 1, 1]), 0, False, 1)
    assert a <= value < b


def test_train_separable_and_predict():
    X = np.array([[0, 1], [1, 1], [2, 1], [10, 2], [11, 2], [12, 2]], dtype=float)
    tree = train(Dataset(X, ["a"] * 3 + ["b"] * 3), TrainParams(prune=False, min_leaf=1))
    assert tree.leaf_count == 2 and tree.depth == 1
    label, conf, dist = predict(tree, np.array([5.0, 1.0]))
    assert label == "a" and conf == 1.0 and dist == {"a": 3}
    assert tree.predict_labels(X) == ["a"] * 3 + ["b"] * 3


def test_categorical_feature_uses_equality():
    X = np.array([[0x1301], [0x1301], [0xC02F], [0xC02F], [0x009C], [0x009C]], dtype=float)
    y = ["x", "x", "y", "y", "x", "x"]
    tree = train(Dataset(X, y), TrainParams(prune=False, min_leaf=1,
                                             categorical_features={0}))
    assert isinstance(tree.root, Split) and tree.root.kind == "eq"
    assert tree.root.value == 0xC02F
    assert tree.predict(np.array([0xFFFF]))[0] == "x"  # unseen code still classified


def test_single_label_gives_one_leaf():
    tree = train(Dataset(np.ones((4, 3)), ["only"] * 4))
    assert tree.node_count == 1 and tree.predict(np.zeros(3))[0] == "only"


def test_empty_dataset_rejected():
    with pytest.raises(EmptyDataset):
        train(Dataset(np.zeros((0, 3)), []))
    with pytest.raises(ValueError):
        TrainParams(min_leaf=0)
    with pytest.raises(ValueError):
        TrainParams(confidence=1.0)


def test_leaf_stopping_rule():
    rng = np.random.default_rng(5)
    X, y = random_data(rng, 60)
    for min_leaf in (1, 2, 4, 7):
        tree = train(Dataset(X, [str(v) for v in y]), TrainParams(min_leaf=min_leaf, prune=False))
        for node in tree.nodes():
            assert node.counts.sum() >= min_leaf
            if isinstance(node, Split):
                assert node.counts.sum() >= 2 * min_leaf


@pytest.mark.parametrize("seed", range(10))
def test_pruned_never_larger(seed):
    rng = np.random.default_rng(100 + seed)
    X, y = random_data(rng, int(rng.integers(20, 200)), k=4)
    labels = [f"l{v}" for v in y]
    for conf in (0.05, 0.25, 0.5):
        full = train(Dataset(X, labels), TrainParams(prune=False))
        pruned = train(Dataset(X, labels), TrainParams(confidence=conf))
        assert pruned.node_count <= full.node_count
        assert pruned.depth <= full.depth


def test_pruning_shrinks_noise_tree():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 4))
    y = rng.integers(0, 2, size=300)
    full = train(Dataset(X, [str(v) for v in y]), TrainParams(prune=False))
    pruned = train(Dataset(X, [str(v) for v in y]), TrainParams(confidence=0.25))
    assert pruned.node_count < full.node_count


def test_subtree_replaced_when_children_agree():
    from earlytls.classifier import _prune
    z = normal_ppf(0.75)
    same = Split(0, "le", 1.0, Leaf(0, np.array([5.0, 1.0])), Leaf(0, np.array([4.0, 1.0])),
                 np.array([9.0, 2.0]))
    assert isinstance(_prune(same, z), Leaf)
    useful = Split(0, "le", 1.0, Leaf(0, np.array([6.0, 0.0])), Leaf(1, np.array([0.0, 6.0])),
                   np.array([6.0, 6.0]))
    assert isinstance(_prune(useful, z), Split)


def test_pessimistic_error_bound():
    z = normal_ppf(0.75)
    for n in (1, 5, 40):
        for e in range(n + 1):
            u = pessimistic_error(e, n, z)
            assert e / n <= u <= 1.0 + 1e-12
    assert pessimistic_error(0, 10, z) > 0


@pytest.mark.parametrize("p", [1e-10, 1e-4, 0.01, 0.02425, 0.1, 0.25, 0.5, 0.75, 0.975,
                               0.99, 0.999999])
def test_normal_ppf_matches_scipy(p):
    assert math.isclose(normal_ppf(p), stats.norm.ppf(p), rel_tol=1e-12, abs_tol=1e-12)


def test_normal_ppf_domain():
    for p in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            normal_ppf(p)


@pytest.mark.parametrize("seed", range(5))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    X, y = random_data(rng, 80, k=4)
    X[:, 4] = rng.choice([1.0, 7.0, 9.0], size=80)
    labels = [f"s{v}" for v in y]
    params = TrainParams(categorical_features={4})
    a = train(Dataset(X, labels), params)
    perm = rng.permutation(80)
    b = train(Dataset(X[perm], [labels[i] for i in perm]), params)
    assert serialize(a) == serialize(b)


def test_serialize_roundtrip():
    rng = np.random.default_rng(3)
    X, y = random_data(rng, 120, k=5)
    X[:, 0] += rng.random(120) / 3
    tree = train(Dataset(X, [f"host{v}.example" for v in y]),
                 TrainParams(prune=False, categorical_features={2}))
    text = serialize(tree)
    back = deserialize(text)
    assert serialize(back) == text
    probe = rng.integers(-1, 7, size=(200, 5)).astype(float)
    assert back.predict_labels(probe) == tree.predict_labels(probe)
    for row in probe[:20]:
        assert predict(back, row) == predict(tree, row)
    assert deserialize(text.decode()).node_count == tree.node_count


def test_model_text_shape():
    leaf_a = Leaf(0, np.array([3.0, 0.0]))
    leaf_b = Leaf(1, np.array([1.0, 4.0]))
    tree = DecisionTree(Split(1, "le", 2.5, leaf_a, leaf_b, np.array([4.0, 4.0])), ["a", "b"], 3)
    assert serialize(tree).decode().splitlines() == [
        "c45-model v1 features=3 labels=2",
        "label 0 a",
        "label 1 b",
        "node 0 split f=1 kind=le v=2.5 l=1 r=2",
        "node 1 leaf label=0 counts=0:3",
        "node 2 leaf label=1 counts=0:1,1:4",
    ]


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("c45-model v2 features=3 labels=1\n", 1),
    ("c45-model v1 features=3 labels=1\nlabel 1 a\n", 2),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\n", 3),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\nnode 0 leaf label=0 counts=0:0\n", 3),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\nnode 0 leaf label=2 counts=0:1\n", 3),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\nnode 1 leaf label=0 counts=0:1\n", 3),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\n"
     "node 0 split f=9 kind=le v=1.0 l=1 r=2\n", 3),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\n"
     "node 0 split f=0 kind=le v=nan l=1 r=2\n", 3),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\n"
     "node 0 split f=0 kind=le v=1.0 l=1 r=1\nnode 1 leaf label=0 counts=0:1\n", 3),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\n"
     "node 0 leaf label=0 counts=0:1\nnode 1 leaf label=0 counts=0:1\n", 4),
    ("c45-model v1 features=3 labels=1\nlabel 0 a\nnode 0 frob\n", 3),
])
def test_deserialize_errors_have_positions(text, line):
    with pytest.raises(FormatError) as info:
        deserialize(text)
    assert info.value.line == line


def test_deserialize_rejects_bad_utf8():
    with pytest.raises(FormatError):
        deserialize(b"\xff\xfe")
