import numpy as np
import pytest

from ntldfkd.domains import (
    LabeledSet,
    ToySpec,
    export_labeled_set,
    make_toy_domains,
    mixed_batch,
    noise_batch,
)


def test_identity_transform_matches_id_distribution():
    spec = ToySpec(translation=(0.0, 0.0), rotation=0.0, seed=4)
    pair = make_toy_domains(spec)
    centers = np.asarray(spec.centers)
    for c in range(3):
        ood_mean = pair.ood_train.points[pair.ood_train.labels == c].mean(axis=0)
        # 300 samples at std 0.45: the class mean is within ~5 sigma/sqrt(n)
        assert np.linalg.norm(ood_mean - centers[c]) < 0.15


def test_same_seed_is_bit_identical():
    a = make_toy_domains(ToySpec(seed=123))
    b = make_toy_domains(ToySpec(seed=123))
    np.testing.assert_array_equal(a.id_train.points, b.id_train.points)
    np.testing.assert_array_equal(a.ood_test.points, b.ood_test.points)
    np.testing.assert_array_equal(a.id_test.labels, b.id_test.labels)
    assert a.bounding_box == b.bounding_box


def test_point_reflection_permutes_symmetric_centers():
    # centers symmetric about the origin: reflection maps each center onto
    # the opposite one, carrying the class label with it
    spec = ToySpec(
        centers=((1.0, 0.0), (-1.0, 0.0), (0.0, 2.0)),
        rotation=np.pi,
        translation=(0.0, 0.0),
        seed=5,
    )
    pair = make_toy_domains(spec)
    expected = -np.asarray(spec.centers)  # hand-applied point reflection
    for c in range(3):
        ood_mean = pair.ood_train.points[pair.ood_train.labels == c].mean(axis=0)
        assert np.linalg.norm(ood_mean - expected[c]) < 0.15


def test_class_balance_exact():
    pair = make_toy_domains(ToySpec(train_per_class=50, test_per_class=40, seed=6))
    for split, n in [
        (pair.id_train, 50),
        (pair.id_test, 40),
        (pair.ood_train, 50),
        (pair.ood_test, 40),
    ]:
        assert np.bincount(split.labels, minlength=3).tolist() == [n, n, n]


def test_bounding_box_contains_everything():
    pair = make_toy_domains(ToySpec(seed=7))
    min_x, min_y, max_x, max_y = pair.bounding_box
    for split in (pair.id_train, pair.id_test, pair.ood_train, pair.ood_test):
        assert split.points[:, 0].min() >= min_x
        assert split.points[:, 0].max() <= max_x
        assert split.points[:, 1].min() >= min_y
        assert split.points[:, 1].max() <= max_y


def test_degenerate_spec_rejected():
    with pytest.raises(ValueError):
        ToySpec(std=0.0)
    with pytest.raises(ValueError):
        ToySpec(centers=((0.0, 0.0), (0.0, 0.0), (1.0, 1.0)))
    with pytest.raises(ValueError):
        ToySpec(train_per_class=0)


def test_mixed_batch_smallest():
    pair = make_toy_domains(ToySpec(seed=8))
    id_half, ood_half = mixed_batch(pair, 2, np.random.default_rng(0))
    assert len(id_half) == 1 and len(ood_half) == 1


def test_mixed_batch_full_split_is_permutation():
    pair = make_toy_domains(ToySpec(train_per_class=10, seed=9))
    id_half, _ = mixed_batch(pair, 60, np.random.default_rng(1))
    assert len(id_half) == 30
    # every training point drawn exactly once
    got = np.sort(id_half.points.view([("x", float), ("y", float)]).ravel())
    want = np.sort(pair.id_train.points.view([("x", float), ("y", float)]).ravel())
    np.testing.assert_array_equal(got, want)


def test_mixed_batch_seed_reproducible():
    pair = make_toy_domains(ToySpec(seed=10))
    a = mixed_batch(pair, 8, np.random.default_rng(42))
    b = mixed_batch(pair, 8, np.random.default_rng(42))
    np.testing.assert_array_equal(a[0].points, b[0].points)
    np.testing.assert_array_equal(a[1].points, b[1].points)


def test_mixed_batch_rejects_odd_or_oversized():
    pair = make_toy_domains(ToySpec(train_per_class=5, seed=11))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        mixed_batch(pair, 3, rng)
    with pytest.raises(ValueError):
        mixed_batch(pair, 40, rng)


def test_ood_labels_preserved_through_transform():
    pair = make_toy_domains(ToySpec(seed=12))
    # same per-class counts as the in-distribution splits, same label values
    assert set(pair.ood_train.labels) == {0, 1, 2}
    assert np.bincount(pair.ood_train.labels).tolist() == np.bincount(
        pair.id_train.labels
    ).tolist()


def test_noise_batch_moments_and_determinism():
    rng = np.random.default_rng(13)
    big = noise_batch(100_000, 1, rng)
    assert abs(big.mean()) < 0.02
    assert abs(big.var() - 1.0) < 0.05
    a = noise_batch(16, 4, np.random.default_rng(99))
    b = noise_batch(16, 4, np.random.default_rng(99))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        noise_batch(0, 2, rng)


def test_export_labeled_set_roundtrip(tmp_path):
    labeled = LabeledSet(
        np.array([[1.25, -0.5], [0.0, 3.5]]), np.array([2, 0])
    )
    path = tmp_path / "set.csv"
    export_labeled_set(labeled, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y,label"
    parsed = [line.split(",") for line in lines[1:]]
    assert [float(p[0]) for p in parsed] == [1.25, 0.0]
    assert [int(p[2]) for p in parsed] == [2, 0]
