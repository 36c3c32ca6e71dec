import numpy as np
import pytest

from bimodalnet.bilinear import FACTORED, FACTORED_SHARED, FULL, LabelTree
from bimodalnet.data import (
    Dataset,
    FormatError,
    SynthSpec,
    VersionError,
    generate_synthetic,
    generate_with_planted,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from bimodalnet.training import TrainConfig, build_model


class TestSynthSpec:
    def test_rejects_indivisible_groups(self):
        with pytest.raises(ValueError):
            SynthSpec(4, 4, 6, 4, 10, 10, 0.1, 1, 0)

    def test_rejects_rank_above_dims(self):
        with pytest.raises(ValueError):
            SynthSpec(4, 4, 4, 2, 10, 10, 0.1, 5, 0)

    def test_rejects_negative_noise(self):
        with pytest.raises(ValueError):
            SynthSpec(4, 4, 4, 2, 10, 10, -0.1, 1, 0)


class TestGenerator:
    def test_seed_determinism(self):
        spec = SynthSpec(5, 6, 4, 2, 50, 20, 0.2, 2, 13)
        a_train, a_test = generate_synthetic(spec)
        b_train, b_test = generate_synthetic(spec)
        assert a_train == b_train
        assert a_test == b_test

    def test_sign_product_labels_for_two_classes(self):
        # two antipodal groups, rank 1, slot terms inert: the label is the
        # sign of a single projection product
        spec = SynthSpec(6, 6, 2, 2, 400, 100, 0.0, 1, 11)
        train, _, planted = generate_with_planted(spec)
        prods = (train.x1 @ planted.proj1[:, 0]) * (train.x2 @ planted.proj2[:, 0])
        assert np.array_equal(train.y, (prods < 0).astype(np.int64))

    def test_flip_symmetry_for_two_classes(self):
        # flipping one modality's sign flips every label: a linear decoder on
        # [x1; x2] cannot beat chance in expectation
        spec = SynthSpec(6, 6, 2, 2, 400, 100, 0.0, 1, 11)
        train, _, planted = generate_with_planted(spec)
        assert np.array_equal(planted.predict(-train.x1, train.x2), 1 - train.y)
        assert np.array_equal(planted.predict(train.x1, -train.x2), 1 - train.y)

    def test_linear_probe_is_chance_on_sign_task(self):
        spec = SynthSpec(6, 6, 2, 2, 4000, 2000, 0.0, 1, 11)
        train, test, _ = generate_with_planted(spec)
        x = np.concatenate([train.x1, train.x2, np.ones((train.n, 1))], axis=1)
        targets = np.eye(2)[train.y]
        coef, *_ = np.linalg.lstsq(x, targets, rcond=None)
        xt = np.concatenate([test.x1, test.x2, np.ones((test.n, 1))], axis=1)
        acc = np.mean(np.argmax(xt @ coef, axis=1) == test.y)
        assert 0.45 <= acc <= 0.55

    def test_balanced_histogram_at_benchmark_scale(self):
        spec = SynthSpec(20, 20, 8, 4, 10000, 2000, 0.1, 2, 7)
        train, _ = generate_synthetic(spec)
        counts = np.bincount(train.y, minlength=8)
        sigma = np.sqrt(10000 * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - 10000 / 8) <= 3 * sigma)

    def test_planted_model_is_exact_on_stored_features(self):
        for noise in (0.0, 0.3):
            spec = SynthSpec(8, 9, 6, 3, 300, 100, noise, 2, 5)
            train, test, planted = generate_with_planted(spec)
            assert np.array_equal(planted.predict(test.x1, test.x2), test.y)
            assert np.array_equal(planted.predict(train.x1, train.x2), train.y)

    def test_odd_group_count(self):
        spec = SynthSpec(8, 8, 6, 3, 200, 50, 0.1, 2, 5)
        train, _ = generate_synthetic(spec)
        assert train.tree.num_groups == 3
        assert set(np.unique(train.y)) <= set(range(6))


class TestDatasetRoundTrip:
    def test_bit_identical(self, tmp_path):
        spec = SynthSpec(5, 6, 4, 2, 60, 20, 0.2, 2, 13)
        train, test = generate_synthetic(spec)
        for ds in (train, test):
            path = tmp_path / f"{ds.split}.bin"
            save_dataset(ds, path)
            again = load_dataset(path)
            assert again == ds
            assert again.split == ds.split

    def test_truncated_file_reports_offset(self, tmp_path):
        spec = SynthSpec(5, 6, 4, 2, 60, 20, 0.2, 2, 13)
        train, _ = generate_synthetic(spec)
        path = tmp_path / "ds.bin"
        save_dataset(train, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="offset"):
            load_dataset(path)

    def test_zero_class_header_rejected(self, tmp_path):
        spec = SynthSpec(5, 6, 4, 2, 10, 5, 0.2, 2, 13)
        train, _ = generate_synthetic(spec)
        path = tmp_path / "ds.bin"
        save_dataset(train, path)
        blob = bytearray(path.read_bytes())
        blob[29:33] = (0).to_bytes(4, "little")  # classes field
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="class count"):
            load_dataset(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "ds.bin"
        path.write_bytes(b"NOTADATA" + bytes(100))
        with pytest.raises(FormatError, match="magic"):
            load_dataset(path)

    def test_version_mismatch(self, tmp_path):
        spec = SynthSpec(5, 6, 4, 2, 10, 5, 0.2, 2, 13)
        train, _ = generate_synthetic(spec)
        path = tmp_path / "ds.bin"
        save_dataset(train, path)
        blob = bytearray(path.read_bytes())
        blob[8:12] = (9).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_dataset(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        spec = SynthSpec(5, 6, 4, 2, 10, 5, 0.2, 2, 13)
        train, _ = generate_synthetic(spec)
        path = tmp_path / "ds.bin"
        save_dataset(train, path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(FormatError, match="trailing"):
            load_dataset(path)


def _model_zoo(tree):
    zoo = []
    zoo.append(("unimodal", build_model(
        TrainConfig(mode="audio", dims_a=(5, 4, 3), dims_v=(6, 4, 3), epochs=0, seed=1),
        5, 6, 4, tree)))
    zoo.append(("fused-softmax", build_model(
        TrainConfig(mode="fused", dims_a=(5, 4), dims_v=(6, 4), epochs=0, seed=2),
        5, 6, 4, tree)))
    zoo.append(("fused-deep", build_model(
        TrainConfig(mode="fused", dims_a=(5, 4), dims_v=(6, 4), fusion_top=(7, 5),
                    epochs=0, seed=3), 5, 6, 4, tree)))
    for variant in (FULL, FACTORED, FACTORED_SHARED):
        zoo.append((variant, build_model(
            TrainConfig(mode="bilinear", variant=variant, dims_a=(5, 4), dims_v=(6, 4),
                        fused_dim=2, epochs=0, seed=4), 5, 6, 4, tree)))
    return zoo


class TestModelRoundTrip:
    def test_all_kinds_bitwise(self, tmp_path, rng):
        tree = LabelTree.balanced(4, 2)
        x1 = rng.standard_normal((3, 5))
        x2 = rng.standard_normal((3, 6))
        for tag, model in _model_zoo(tree):
            path = tmp_path / f"{tag}.model"
            save_model(model, path)
            again = load_model(path)
            for name, arr in model.params().items():
                assert np.array_equal(arr, again.params()[name]), (tag, name)
            assert np.array_equal(model.posterior_batch(x1, x2),
                                  again.posterior_batch(x1, x2)), tag

    def test_large_bilinear_round_trip(self, tmp_path):
        tree = LabelTree.balanced(1328, 83)
        cfg = TrainConfig(mode="bilinear", variant=FACTORED_SHARED,
                          dims_a=(360, 500, 500, 200), dims_v=(540, 500, 500, 200),
                          fused_dim=200, epochs=0, seed=6,
                          arch="[360,500,500,200,1328 | 540,500,500,200,1328 | F=200]")
        model = build_model(cfg, 360, 540, 1328, tree)
        path = tmp_path / "large.model"
        save_model(model, path)
        again = load_model(path)
        assert again.arch == cfg.arch
        assert again.head.tree == tree
        for name, arr in model.params().items():
            assert np.array_equal(arr, again.params()[name])

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.model"
        path.write_bytes(b"something else\nbinary\n")
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "bad.model"
        path.write_bytes(b"bimodalnet-model v9\nbinary\n")
        with pytest.raises(VersionError):
            load_model(path)

    def test_truncated_payload(self, tmp_path):
        tree = LabelTree.balanced(4, 2)
        model = _model_zoo(tree)[0][1]
        path = tmp_path / "trunc.model"
        save_model(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(FormatError, match="offset"):
            load_model(path)


class TestDatasetValidation:
    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), np.zeros((2, 3)), np.array([0, 7]),
                    LabelTree.balanced(4, 2))

    def test_nonfinite_features(self):
        x = np.zeros((2, 3))
        x[0, 0] = np.inf
        with pytest.raises(ValueError):
            Dataset(x, np.zeros((2, 3)), np.array([0, 1]), LabelTree.balanced(4, 2))

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), np.zeros((3, 3)), np.array([0, 1]),
                    LabelTree.balanced(4, 2))
