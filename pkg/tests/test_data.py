import csv
import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from hybridvfl.data import (
    HAM_CLASSES,
    DataConfigurationError,
    IngestionError,
    MetadataRecords,
    SyntheticSpec,
    TabularPreprocessor,
    VerticalDataset,
    blob_templates,
    export_ham_style,
    generate_synthetic,
    load_ham_style,
    one_hot,
    partner,
    split,
)

N_PROBE, N_FIT = 2000, 1400


def probe_accuracy(features, y, k):
    """Least-squares one-hot regression with a bias column; (train acc, held-out acc)."""
    x = np.hstack([features, np.ones((len(features), 1))])
    w, *_ = np.linalg.lstsq(x[:N_FIT], np.eye(k)[y[:N_FIT]], rcond=None)
    pred = (x @ w).argmax(axis=1)
    return float(np.mean(pred[:N_FIT] == y[:N_FIT])), float(np.mean(pred[N_FIT:] == y[N_FIT:]))


def joint_features(ds, k):
    """Outer product of the detected blob position (one-hot) with the tabular row plus bias.

    The blob position is the template with the largest |correlation| against
    the centred channel-mean image; the sign is ignored on purpose.
    """
    size = ds.image_view.shape[-1]
    flat = (ds.image_view.mean(axis=1) - 0.5).reshape(len(ds), -1)
    scores = np.abs(flat @ blob_templates(k, size).reshape(k, -1).T)
    pos = np.eye(k)[scores.argmax(axis=1)]
    tab = np.hstack([ds.tabular_view, np.ones((len(ds), 1))])
    return (pos[:, :, None] * tab[:, None, :]).reshape(len(ds), -1)


@pytest.fixture(scope="module")
def separable():
    return generate_synthetic(SyntheticSpec(n=N_PROBE, interaction_strength=0.0, noise=0.0, seed=0))


@pytest.fixture(scope="module")
def interacting():
    return generate_synthetic(SyntheticSpec(n=N_PROBE, interaction_strength=1.0, seed=0))


@pytest.mark.parametrize("view", ["image_view", "tabular_view"])
def test_no_interaction_is_linearly_separable_per_modality(separable, view):
    x = getattr(separable, view).reshape(N_PROBE, -1)
    train, held_out = probe_accuracy(x, separable.class_index, 7)
    assert train >= 0.99
    assert held_out >= 0.99


@pytest.mark.parametrize("view", ["image_view", "tabular_view"])
def test_full_interaction_defeats_single_modality_probes(interacting, view):
    x = getattr(interacting, view).reshape(N_PROBE, -1)
    _, held_out = probe_accuracy(x, interacting.class_index, 7)
    assert held_out <= 1 / 7 + 0.15


def test_full_interaction_is_solved_by_joint_probe(interacting):
    _, held_out = probe_accuracy(joint_features(interacting, 7), interacting.class_index, 7)
    assert held_out >= 0.90


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6, 7])
def test_partner_is_a_fixed_point_free_permutation(k):
    images = [partner(c, k) for c in range(k)]
    assert sorted(images) == list(range(k))
    assert all(partner(c, k) != c for c in range(k))


def test_same_seed_is_bitwise_identical():
    a = generate_synthetic(SyntheticSpec(n=200, seed=3))
    b = generate_synthetic(SyntheticSpec(n=200, seed=3))
    assert a.image_view.tobytes() == b.image_view.tobytes()
    assert a.tabular_view.tobytes() == b.tabular_view.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = generate_synthetic(SyntheticSpec(n=200, seed=4))
    assert a.image_view.tobytes() != c.image_view.tobytes()


@pytest.mark.parametrize(
    "kwargs",
    [dict(n=5, num_classes=7), dict(interaction_strength=1.5), dict(interaction_strength=-0.1), dict(noise=-1.0), dict(image_size=30)],
)
def test_infeasible_spec_is_a_configuration_error(kwargs):
    with pytest.raises(DataConfigurationError):
        SyntheticSpec(**kwargs)


def test_views_have_expected_shapes_and_ranges():
    ds = generate_synthetic(SyntheticSpec(n=70, seed=1))
    assert ds.image_view.shape == (70, 3, 28, 28)
    assert ds.image_view.min() >= 0.0 and ds.image_view.max() <= 1.0
    assert ds.tabular_view.shape[0] == 70
    assert np.bincount(ds.class_index, minlength=7).tolist() == [10] * 7


def test_labels_are_exact_one_hot():
    ds = generate_synthetic(SyntheticSpec(n=300, seed=2))
    assert set(np.unique(ds.labels)) <= {0.0, 1.0}
    np.testing.assert_array_equal(ds.labels.sum(axis=1), np.ones(300))


def test_party_objects_hold_only_their_own_view():
    ds = generate_synthetic(SyntheticSpec(n=50, seed=0))
    img, tab, lab = ds.image_party(), ds.tabular_party(), ds.label_party()
    assert set(vars(img)) == {"ids", "image_view"}
    assert set(vars(tab)) == {"ids", "tabular_view"}
    assert set(vars(lab)) == {"ids", "labels"}
    np.testing.assert_array_equal(img.ids, tab.ids)
    np.testing.assert_array_equal(img.ids, lab.ids)


def test_misaligned_views_are_rejected():
    with pytest.raises(DataConfigurationError):
        VerticalDataset(ids=np.arange(3), image_view=np.zeros((3, 3, 4, 4)), tabular_view=np.zeros((2, 5)), labels=np.eye(3))


# ----------------------------------------------------------------------------
# splitting


@pytest.fixture(scope="module")
def base():
    return generate_synthetic(SyntheticSpec(n=503, seed=5))


def test_all_train_split(base):
    ds = split(base, (1.0, 0.0, 0.0), seed=0)
    np.testing.assert_array_equal(ds.splits["train"], np.arange(503))
    assert ds.splits["val"].size == 0 and ds.splits["test"].size == 0


def test_split_masks_are_disjoint_and_cover_all_ids(base):
    ds = split(base, seed=1)
    joined = np.concatenate([ds.splits[s] for s in ("train", "val", "test")])
    assert sorted(joined.tolist()) == list(range(503))


@pytest.mark.parametrize("fractions", [(0.7, 0.15, 0.15), (0.5, 0.25, 0.25), (0.8, 0.2, 0.0)])
def test_per_class_counts_within_one_of_ideal(base, fractions):
    ds = split(base, fractions, seed=2)
    cls = base.class_index
    for k in range(7):
        n_k = int(np.sum(cls == k))
        for name, f in zip(("train", "val", "test"), fractions):
            got = int(np.sum(cls[ds.splits[name]] == k))
            assert abs(got - n_k * f) <= 1


def test_split_is_deterministic_per_seed(base):
    a, b, c = split(base, seed=9), split(base, seed=9), split(base, seed=10)
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(a.splits[name], b.splits[name])
    assert not np.array_equal(a.splits["train"], c.splits["train"])


@pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.6, 0.3, 0.3), (1.2, -0.1, -0.1)])
def test_bad_fractions_rejected(base, fractions):
    with pytest.raises(DataConfigurationError):
        split(base, fractions)


def test_tiny_class_warns_and_still_splits(caplog):
    y = np.array([0] * 20 + [1] * 20 + [2])
    ds = VerticalDataset(ids=np.arange(41), image_view=np.zeros((41, 3, 4, 4)), tabular_view=np.zeros((41, 2)), labels=one_hot(y, 3))
    with caplog.at_level(logging.WARNING, logger="hybridvfl.data"):
        out = split(ds, seed=0)
    assert any("without stratification" in r.message for r in caplog.records)
    joined = np.concatenate([out.splits[s] for s in ("train", "val", "test")])
    assert sorted(joined.tolist()) == list(range(41))


def test_preprocessing_is_fitted_on_train_only(base):
    ds = split(base, seed=3)
    refit = TabularPreprocessor.fit(base.metadata.subset(ds.splits["train"]))
    assert refit == ds.preprocessor
    # scrambling every held-out record leaves the fitted statistics untouched
    held = np.concatenate([ds.splits["val"], ds.splits["test"]])
    age = base.metadata.age.copy()
    age[held] = 999.0
    perturbed = replace(base, metadata=MetadataRecords(age, base.metadata.sex, base.metadata.localization))
    assert split(perturbed, seed=3).preprocessor == ds.preprocessor


# ----------------------------------------------------------------------------
# HAM-style files


def write_fixture(root, rows, make_images=True):
    img_dir = root / "images"
    img_dir.mkdir(exist_ok=True)
    meta = root / "metadata.csv"
    with open(meta, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization"])
        for r in rows:
            w.writerow([f"L{r[0]}", r[0], r[1], "histo", r[2], r[3], r[4]])
    if make_images:
        for i, r in enumerate(rows):
            pix = np.full((10, 12, 3), (40 * i) % 256, dtype=np.uint8)
            Image.fromarray(pix, mode="RGB").save(img_dir / f"{r[0]}.png")
    return meta, img_dir


THREE_ROWS = [
    ("ISIC_0000001", "mel", "20", "male", "back"),
    ("ISIC_0000002", "nv", "", "female", "face"),
    ("ISIC_0000003", "bcc", "40", "male", "back"),
]


def test_three_row_fixture_ages(tmp_path):
    meta, img_dir = write_fixture(tmp_path, THREE_ROWS)
    ds = load_ham_style(meta, img_dir, target_size=8, fractions=(1.0, 0.0, 0.0))
    # filled ages 20, 30, 40: mean 30, population std sqrt(200/3)
    z = math.sqrt(1.5)
    np.testing.assert_allclose(ds.tabular_view[:, 0], [-z, 0.0, z], atol=1e-12)
    np.testing.assert_array_equal(ds.tabular_view[:, 1], [0.0, 1.0, 0.0])
    assert ds.preprocessor.age_median == 30.0
    assert ds.preprocessor.columns == ["age", "age_missing", "sex=female", "sex=male", "site=back", "site=face"]
    np.testing.assert_array_equal(ds.tabular_view[:, 2:], [[0, 1, 1, 0], [1, 0, 0, 1], [0, 1, 1, 0]])


def test_loader_images_and_labels(tmp_path):
    meta, img_dir = write_fixture(tmp_path, THREE_ROWS)
    ds = load_ham_style(meta, img_dir, target_size=8, fractions=(1.0, 0.0, 0.0))
    assert ds.num_classes == 7 == len(HAM_CLASSES)
    assert ds.class_index.tolist() == [HAM_CLASSES.index(d) for d in ("mel", "nv", "bcc")]
    assert ds.image_view.shape == (3, 3, 8, 8)
    np.testing.assert_allclose(ds.image_view[1], np.full((3, 8, 8), 40 / 255), atol=1e-12)


def test_metadata_row_order_does_not_matter(tmp_path):
    a_root, b_root = tmp_path / "a", tmp_path / "b"
    a_root.mkdir()
    b_root.mkdir()
    rows = [(f"ISIC_{i:07d}", HAM_CLASSES[i % 7], str(20 + i), "male" if i % 2 else "female", "trunk") for i in range(14)]
    a = load_ham_style(*write_fixture(a_root, rows), target_size=8)
    shuffled = [rows[i] for i in np.random.default_rng(0).permutation(len(rows))]
    # write the images in the original order so each id keeps its pixels
    write_fixture(b_root, rows)
    b = load_ham_style(*write_fixture(b_root, shuffled, make_images=False), target_size=8)
    assert a.image_names == b.image_names
    for field_name in ("image_view", "tabular_view", "labels"):
        np.testing.assert_array_equal(getattr(a, field_name), getattr(b, field_name))
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(a.splits[name], b.splits[name])


def test_unknown_dx_names_the_row(tmp_path):
    rows = THREE_ROWS[:2] + [("ISIC_0000009", "melanoma", "50", "male", "back")]
    meta, img_dir = write_fixture(tmp_path, rows)
    with pytest.raises(IngestionError) as err:
        load_ham_style(meta, img_dir)
    assert "melanoma" in str(err.value) and "line 4" in str(err.value)


def test_missing_image_reports_path(tmp_path):
    meta, img_dir = write_fixture(tmp_path, THREE_ROWS)
    (img_dir / "ISIC_0000002.png").unlink()
    with pytest.raises(IngestionError) as err:
        load_ham_style(meta, img_dir)
    assert "ISIC_0000002" in str(err.value) and str(img_dir) in str(err.value)


def test_unreadable_image_reports_path(tmp_path):
    meta, img_dir = write_fixture(tmp_path, THREE_ROWS)
    bad = img_dir / "ISIC_0000003.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(IngestionError) as err:
        load_ham_style(meta, img_dir)
    assert str(bad) in str(err.value)


def test_missing_columns_rejected(tmp_path):
    meta = tmp_path / "m.csv"
    meta.write_text("image_id,dx\nA,mel\n")
    with pytest.raises(IngestionError):
        load_ham_style(meta, tmp_path)


def test_export_then_load_round_trip(tmp_path):
    ds = split(generate_synthetic(SyntheticSpec(n=42, seed=6)), seed=0)
    back = load_ham_style(*export_ham_style(ds, tmp_path), target_size=28, seed=0)
    np.testing.assert_array_equal(back.class_index, ds.class_index)
    # images pass through 8-bit PNG, so they agree to half a quantisation step
    assert np.max(np.abs(back.image_view - ds.image_view)) <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(np.isnan(back.metadata.age), np.isnan(ds.metadata.age))
    np.testing.assert_array_equal(back.metadata.sex, ds.metadata.sex)
    np.testing.assert_array_equal(back.tabular_view, ds.tabular_view)
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(back.splits[name], ds.splits[name])
