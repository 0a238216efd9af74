import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr

from cmrcnet.data import (
    SampleDataset,
    SpotRecord,
    SyntheticSpec,
    augment,
    augment_batch,
    check_shared_genes,
    generate_synthetic,
    hvg_union,
    load_dataset,
    log_transform,
    make_folds,
    normalize_total_counts,
    preprocess_sample,
    save_dataset,
    select_hegs,
    select_hvgs,
)
from cmrcnet.data.io import read_patches, write_patches
from cmrcnet.errors import ConfigError, ContractError, DataError, DegenerateInputError


def _tiny(n_samples=2, spots=12, d=5, seed=0):
    return generate_synthetic(SyntheticSpec(n_samples=n_samples, spots_per_sample=spots, d=d,
                                            patch_size=4, marker_count=2, seed=seed))


# ---------------------------------------------------------------- preprocessing


def test_normalize_example():
    out = normalize_total_counts(np.array([[1.0, 1.0, 2.0]]))
    assert np.array_equal(out, [[2500.0, 2500.0, 5000.0]])


@given(seed=st.integers(0, 10**6))
def test_normalize_row_sums(seed):
    x = np.random.default_rng(seed).poisson(5.0, (6, 9)).astype(float) + 0.5
    out = normalize_total_counts(x, 1e4)
    assert np.allclose(out.sum(axis=1), 1e4, rtol=1e-6, atol=0)
    assert np.allclose(normalize_total_counts(out, 1e4), out, rtol=0, atol=1e-9)


def test_normalize_zero_row_names_spot():
    with pytest.raises(DegenerateInputError, match="S1_b"):
        normalize_total_counts(np.array([[1.0, 2.0], [0.0, 0.0]]), spot_ids=["S1_a", "S1_b"])


def test_normalize_rejects_negative():
    with pytest.raises(ContractError):
        normalize_total_counts(np.array([[1.0, -1.0]]))


def test_log_transform_examples():
    out = log_transform(np.array([0.0, math.e - 1, 5.0, 2.0]))
    assert out[0] == 0.0 and abs(out[1] - 1.0) < 1e-15
    assert out[2] > out[3]
    with pytest.raises(ContractError):
        log_transform(np.array([-1.0]))


def test_preprocess_sets_flag_and_warns_on_repeat(caplog):
    ds = _tiny()[0]
    p = preprocess_sample(ds)
    assert p.processed and not ds.processed
    assert np.allclose(np.expm1(p.expr).sum(axis=1), 1e4)
    with caplog.at_level("WARNING"):
        preprocess_sample(p)
    assert "already processed" in caplog.text


def test_hvg_examples():
    # sample variances of the columns: 4 > 1 > 0
    x = np.array([[0.0, 1.0, 3.0], [2.0, 3.0, 3.0], [4.0, 2.0, 3.0]])
    assert select_hvgs(x, 2) == [0, 1]
    assert select_hvgs(x, 3)[-1] == 2
    assert sorted(select_hvgs(x, 10)) == [0, 1, 2]


def test_hvg_ties_by_index():
    x = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
    assert select_hvgs(x, 3) == [0, 1, 2]


def test_heg_examples():
    x = np.array([[1.0, 5.0, 3.0, 9.0], [1.0, 5.0, 3.0, 9.0]])
    assert select_hegs(x, [0, 1, 2], 2) == [1, 2]
    assert select_hegs(np.ones((2, 4)), [3, 1, 2], 2) == [1, 2]
    assert sorted(select_hegs(x, [2, 0], 5)) == [0, 2]
    with pytest.raises(ContractError):
        select_hegs(x, [], 1)


def test_hvg_union_first_appearance():
    a, b = _tiny(d=6)
    a = a.with_expr(np.array([[0, 0, 0, 0, 1, 5]] * 6 + [[0, 0, 0, 0, 0, 0]] * 6, float), False)
    b = b.with_expr(np.array([[3, 0, 0, 0, 0, 0]] * 6 + [[0, 0, 1, 0, 0, 0]] * 6, float), False)
    assert hvg_union([a, b], 2) == [5, 4, 0, 2]


def test_augment_identity_and_flip():
    p = np.arange(2 * 2 * 3).reshape(2, 2, 3)

    class Fixed:
        def __init__(self, flips, quarter):
            self.flips, self.quarter = flips, quarter

        def random(self, n):
            return np.array(self.flips)

        def integers(self, n):
            return self.quarter

    assert np.array_equal(augment(p, Fixed([0.9, 0.9], 0)), p)
    assert np.array_equal(augment(p, Fixed([0.1, 0.9], 0)), p[:, ::-1])


@given(seed=st.integers(0, 10**6), h=st.integers(1, 5))
def test_augment_preserves_multiset(seed, h):
    p = np.random.default_rng(seed).integers(0, 256, (h, h, 3), dtype=np.uint8)
    out = augment(p, np.random.default_rng(seed))
    assert out.shape == p.shape
    assert np.array_equal(np.sort(out, axis=None), np.sort(p, axis=None))


def test_augment_batch_shape():
    x = np.zeros((5, 4, 4, 3), np.uint8)
    assert augment_batch(x, np.random.default_rng(0)).shape == x.shape


# ---------------------------------------------------------------- folds


def test_folds_four_samples():
    plan = make_folds(_tiny(n_samples=4, spots=4))
    assert len(plan) == 4
    tests = [t for _, t in plan]
    assert sorted(tests) == ["S01", "S02", "S03", "S04"]
    for train, test in plan:
        assert test not in train and len(train) == 3


def test_folds_two_samples_and_errors():
    plan = make_folds(["a", "b"])
    assert list(plan) == [(("b",), "a"), (("a",), "b")]
    with pytest.raises(ConfigError):
        make_folds(["a"])
    with pytest.raises(ConfigError):
        make_folds(["a", "a"])


def test_shared_genes_check():
    a, b = _tiny()
    assert check_shared_genes([a, b]) == a.gene_names
    with pytest.raises(ConfigError):
        check_shared_genes([a, b.subset_genes([1, 0, 2, 3, 4])])


def test_dataset_validation():
    ds = _tiny()[0]
    with pytest.raises(DataError, match="patch_index"):
        SampleDataset("X", [SpotRecord("a", 0, 0, 5)], np.zeros((1, 1)), ["g"], np.zeros(1, bool),
                      np.zeros((1, 4, 4, 3), np.uint8))
    with pytest.raises(DataError, match="expression"):
        SampleDataset("X", ds.spots, ds.expr[:-1], ds.gene_names, ds.marker_flags, ds.patches)
    with pytest.raises(DataError, match="duplicate"):
        SampleDataset("X", ds.spots, ds.expr[:, :2], ["g", "g"], ds.marker_flags[:2], ds.patches)


def test_spot_patches_scaling():
    ds = _tiny()[0]
    p = ds.spot_patches([0])
    assert p.dtype == np.float32
    assert np.array_equal(p[0], ds.patches[0].astype(np.float32) / np.float32(255))


# ---------------------------------------------------------------- io


def test_round_trip(tmp_path):
    data = _tiny(n_samples=3)
    save_dataset(data, tmp_path)
    back = load_dataset(tmp_path)
    assert [d.sample_id for d in back] == ["S01", "S02", "S03"]
    for a, b in zip(data, back):
        assert np.array_equal(a.expr, b.expr)
        assert np.array_equal(a.patches, b.patches)
        assert a.spots == b.spots and a.gene_names == b.gene_names
        assert np.array_equal(a.marker_flags, b.marker_flags)


def test_round_trip_processed_floats(tmp_path):
    data = [preprocess_sample(d) for d in _tiny()]
    save_dataset(data, tmp_path)
    for a, b in zip(data, load_dataset(tmp_path)):
        assert np.array_equal(a.expr, b.expr)


def test_expr_extra_column_names_row(tmp_path):
    save_dataset(_tiny(), tmp_path)
    path = tmp_path / "S01" / "expr.csv"
    lines = path.read_text().splitlines()
    lines[3] = lines[3] + ",7"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"expr\.csv.*line 4"):
        load_dataset(tmp_path)


def test_missing_patch_pack(tmp_path):
    save_dataset(_tiny(), tmp_path)
    (tmp_path / "S02" / "patches.bin").unlink()
    with pytest.raises(DataError, match="missing patch pack"):
        load_dataset(tmp_path)


def test_bad_spot_header(tmp_path):
    save_dataset(_tiny(), tmp_path)
    path = tmp_path / "S01" / "spots.csv"
    path.write_text(path.read_text().replace("spot_id,x,y", "id,x,y", 1))
    with pytest.raises(DataError, match="spots.csv"):
        load_dataset(tmp_path)


def test_empty_dir(tmp_path):
    with pytest.raises(DataError, match="no samples found"):
        load_dataset(tmp_path)


def test_patch_pack_errors(tmp_path):
    p = np.zeros((2, 3, 3, 3), np.uint8)
    write_patches(tmp_path / "p.bin", p)
    blob = (tmp_path / "p.bin").read_bytes()
    assert len(blob) == 24 + p.size
    (tmp_path / "q.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError, match="offset 0"):
        read_patches(tmp_path / "q.bin")
    (tmp_path / "r.bin").write_bytes(blob[:-1])
    with pytest.raises(DataError, match="payload"):
        read_patches(tmp_path / "r.bin")


# ---------------------------------------------------------------- synthetic


def test_synthetic_deterministic_and_shaped():
    spec = SyntheticSpec(n_samples=2, spots_per_sample=9, d=7, patch_size=8, marker_count=3, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for x, y in zip(a, b):
        assert np.array_equal(x.expr, y.expr) and np.array_equal(x.patches, y.patches)
    assert a[0].patches.shape == (9, 8, 8, 3) and a[0].expr.shape == (9, 7)
    assert a[0].marker_flags.tolist() == [True] * 3 + [False] * 4
    assert np.all(a[0].expr.sum(axis=1) > 0)
    other = generate_synthetic(SyntheticSpec(n_samples=2, spots_per_sample=9, d=7, patch_size=8, marker_count=3, seed=5))
    assert not np.array_equal(a[0].expr, other[0].expr)


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(d=4, marker_count=5)
    with pytest.raises(ConfigError):
        SyntheticSpec(latent_dim=0)
    with pytest.raises(ConfigError):
        SyntheticSpec.from_dict({"bogus": 1})
    assert SyntheticSpec.from_dict(SyntheticSpec(seed=3).to_dict()) == SyntheticSpec(seed=3)


def _intensity_vs_marker(shuffle: bool):
    spec = SyntheticSpec(n_samples=1, spots_per_sample=600, d=16, latent_dim=1, patch_size=8,
                         noise_sd=0.0, marker_count=1, seed=0)
    ds = generate_synthetic(spec)[0]
    intensity = ds.patches.reshape(len(ds.patches), -1).mean(axis=1)
    counts = ds.expr[:, 0]
    if shuffle:
        counts = counts[np.random.default_rng(1).permutation(len(counts))]
    return spearmanr(intensity, counts)[0]


def test_synthetic_marker_tracks_image():
    assert abs(_intensity_vs_marker(False)) > 0.9


def test_synthetic_shuffled_pairing_has_no_signal():
    assert abs(_intensity_vs_marker(True)) < 0.1
