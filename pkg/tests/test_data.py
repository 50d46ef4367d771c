import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtp import autodiff as ad
from fedtp.checkpoint import CheckpointError, load_arrays, save_arrays
from fedtp.datagen import (
    DatasetFormatError,
    LabeledDataset,
    load_cifar,
    read_cifar_file,
    style_transitions,
    synth_char_task,
    synth_image_task,
)
from fedtp.models import ModelConfig, init_model, loss_fn, predict
from fedtp.partition import (
    PartitionError,
    PartitionManifest,
    apply_noise_ladder,
    check_manifest,
    largest_remainder,
    noise_sigmas,
    partition_dirichlet,
    partition_pachinko,
    partition_pathological,
)


def _hier(fine=20, coarse=4, per=60, seed=0):
    labels = np.repeat(np.arange(fine), per)
    x = np.random.default_rng(seed).uniform(size=(len(labels), 1, 2, 2))
    return LabeledDataset(x, labels, fine, coarse_labels=labels // (fine // coarse), num_coarse=coarse)


def _flat(classes=4, per=40):
    labels = np.repeat(np.arange(classes), per)
    return LabeledDataset(np.zeros((len(labels), 1, 2, 2)), labels, classes)


class TestCifar:
    def _write(self, root, variant, records):
        rng = np.random.default_rng(0)
        if variant == "cifar10":
            for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
                rec = rng.integers(0, 256, (records, 3073), dtype=np.uint8)
                rec[:, 0] = rng.integers(0, 10, records)
                rec.tofile(root / name)
        else:
            for name in ("train.bin", "test.bin"):
                rec = rng.integers(0, 256, (records, 3074), dtype=np.uint8)
                rec[:, 0] = rng.integers(0, 20, records)
                rec[:, 1] = rng.integers(0, 100, records)
                rec.tofile(root / name)

    def test_cifar10_layout(self, tmp_path):
        self._write(tmp_path, "cifar10", 3)
        ds = load_cifar(tmp_path, "cifar10", strict=False)
        assert ds.inputs.shape == (18, 3, 32, 32) and ds.num_classes == 10
        assert 0.0 <= ds.inputs.min() and ds.inputs.max() <= 1.0
        raw = np.fromfile(tmp_path / "data_batch_1.bin", np.uint8).reshape(3, 3073)
        # red plane first, row-major
        assert ds.inputs[0, 0, 0, 1] == pytest.approx(raw[0, 2] / 255.0)
        assert ds.inputs[0, 1, 0, 0] == pytest.approx(raw[0, 1 + 1024] / 255.0)

    def test_cifar100_label_ranges(self, tmp_path):
        self._write(tmp_path, "cifar100", 5)
        ds = load_cifar(tmp_path, "cifar100", strict=False)
        assert ds.coarse_labels.max() < 20 and ds.labels.max() < 100 and ds.num_classes == 100

    def test_strict_record_count(self, tmp_path):
        self._write(tmp_path, "cifar10", 2)
        with pytest.raises(DatasetFormatError, match=r"expected 30730000 bytes, found 6146"):
            load_cifar(tmp_path, "cifar10")

    def test_truncated_file(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(b"\x00" * 3000)
        with pytest.raises(DatasetFormatError, match="3000 bytes"):
            read_cifar_file(tmp_path / "f.bin", 3073)


class TestSynthetic:
    def test_image_counts_and_determinism(self):
        a = synth_image_task(num_classes=8, per_class=50, extent=16, seed=0)
        b = synth_image_task(num_classes=8, per_class=50, extent=16, seed=0)
        assert len(a) == 400 and a.inputs.shape == (400, 3, 16, 16)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != synth_image_task(8, 50, 16, seed=1).fingerprint()

    def test_image_task_is_learnable(self):
        ds = synth_image_task(num_classes=8, per_class=50, extent=16, seed=0)
        cfg = ModelConfig(num_classes=8, dtype="float32")
        x, y = ds.inputs.astype(np.float32), ds.labels
        params = init_model(cfg, 0).merged()
        rng = np.random.default_rng(0)
        for _ in range(200):
            b = rng.choice(len(y), 64, replace=False)
            _, g = ad.value_and_grad(lambda q: loss_fn(q, x[b], y[b], cfg), params)
            params = ad.sgd_step(params, g, 0.05)
        assert (predict(params, x, cfg) == y).mean() >= 0.9

    def test_char_counts(self):
        ds = synth_char_task(vocab=16, seq_len=32, num_styles=4, per_style=100, seed=0)
        assert len(ds) == 400 and ds.inputs.shape == (400, 32)
        np.testing.assert_array_equal(ds.inputs[:, 1:], ds.targets[:, :-1])

    def test_transition_rows_are_stochastic(self):
        np.testing.assert_allclose(style_transitions(16, 4, 0).sum(-1), 1.0, atol=1e-12)

    def test_styles_are_distinguishable_by_bigram_perplexity(self):
        ds = synth_char_task(vocab=16, seq_len=32, num_styles=2, per_style=200, seed=0)
        full = np.concatenate([ds.inputs, ds.targets[:, -1:]], axis=1)
        a, b = full[ds.labels == 0], full[ds.labels == 1]
        counts = np.ones((16, 16))
        for s in a[:150]:
            np.add.at(counts, (s[:-1], s[1:]), 1)
        logp = np.log(counts / counts.sum(1, keepdims=True))

        def nll(seqs):
            return -np.mean([logp[s[:-1], s[1:]].mean() for s in seqs])

        assert np.exp(nll(a[150:])) < np.exp(nll(b[150:]))

    def test_label_length_mismatch(self):
        with pytest.raises(DatasetFormatError):
            LabeledDataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 2)


def test_largest_remainder():
    np.testing.assert_array_equal(largest_remainder(10, np.array([1, 1, 1])), [4, 3, 3])
    np.testing.assert_array_equal(largest_remainder(7, np.array([0.5, 0.25, 0.25])), [3, 2, 2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 500), st.lists(st.floats(0.01, 10), min_size=1, max_size=8))
def test_largest_remainder_sums_exactly(total, weights):
    counts = largest_remainder(total, np.array(weights))
    assert counts.sum() == total and np.all(counts >= 0)
    exact = total * np.array(weights) / sum(weights)
    assert np.all(np.abs(counts - exact) < 1.0 + 1e-9)


class TestPathological:
    def test_each_client_holds_exactly_two_classes(self):
        ds = synth_image_task(10, 20, 8, seed=0)
        man = partition_pathological(ds, 5, 2, seed=0)
        check_manifest(man, ds)
        for i in range(5):
            assert len(np.unique(ds.labels[man.client_indices(i)])) == 2

    def test_infeasible(self):
        with pytest.raises(PartitionError, match="infeasible"):
            partition_pathological(_flat(10, 5), 4, 2, seed=0)

    def test_two_holder_shares_are_bounded(self):
        ds = _flat(4, 100)
        shares = []
        for seed in range(100):
            man = partition_pathological(ds, 4, 2, seed)
            for c in range(4):
                sizes = [int((ds.labels[man.client_indices(i)] == c).sum()) for i in range(4)]
                held = [s for s in sizes if s]
                if len(held) == 2:
                    shares += [s / 100 for s in held]
        assert shares and min(shares) >= 0.25 and max(shares) <= 0.75


class TestDirichlet:
    def test_huge_alpha_is_uniform(self):
        ds = _flat(4, 100)
        props = np.zeros((4, 4))
        for seed in range(100):
            man = partition_dirichlet(ds, 4, 1e6, seed)
            for i in range(4):
                lab = ds.labels[man.client_indices(i)]
                props[i] += np.bincount(lab, minlength=4) / len(lab)
        np.testing.assert_allclose(props / 100, 0.25, rtol=0.05)

    def test_class_counts_are_conserved(self):
        ds = _flat(5, 37)
        man = partition_dirichlet(ds, 6, 0.3, seed=2)
        check_manifest(man, ds)
        total = np.zeros(5, int)
        for i in range(6):
            total += np.bincount(ds.labels[man.client_indices(i)], minlength=5)
        np.testing.assert_array_equal(total, 37)

    def test_smaller_alpha_means_lower_entropy(self):
        ds = _flat(10, 30)

        def mean_entropy(alpha):
            out = []
            for seed in range(30):
                man = partition_dirichlet(ds, 5, alpha, seed)
                for i in range(5):
                    p = np.bincount(ds.labels[man.client_indices(i)], minlength=10) / len(man.client_indices(i))
                    p = p[p > 0]
                    out.append(-(p * np.log(p)).sum())
            return np.mean(out)

        assert mean_entropy(0.1) < mean_entropy(0.9)

    def test_bad_alpha(self):
        with pytest.raises(PartitionError):
            partition_dirichlet(_flat(), 2, 0.0, 0)


class TestPachinko:
    def test_quota_and_hierarchy(self):
        ds = _hier()
        man = partition_pachinko(ds, 4, 0.3, 10.0, seed=0)
        check_manifest(man, ds)
        for i in range(4):
            idx = man.client_indices(i)
            assert len(idx) == len(ds) // 4
            fine_groups = set((ds.labels[idx] // 5).tolist())
            assert fine_groups <= set(ds.coarse_labels[idx].tolist())

    def test_huge_beta_is_uniform_within_groups(self):
        # the last client takes whatever supply is left, so it is excluded
        ds = _hier(per=100)
        counts = np.zeros((4, 5))
        for seed in range(30):
            man = partition_pachinko(ds, 4, 0.3, 1e6, seed)
            for i in range(3):
                counts += np.bincount(ds.labels[man.client_indices(i)], minlength=20).reshape(4, 5)
        np.testing.assert_allclose(counts / counts.sum(1, keepdims=True), 0.2, rtol=0.10)

    def test_needs_coarse_labels(self):
        with pytest.raises(PartitionError, match="coarse"):
            partition_pachinko(_flat(), 2, 0.3, 10.0, 0)

    def test_supply_exhaustion_reports_shortfall(self):
        ds = _hier(fine=4, coarse=2, per=3)
        man = partition_pachinko(ds, 3, 0.3, 10.0, 0)
        check_manifest(man, ds)
        assert man.params["quota"] == 4


class TestManifest:
    def test_json_round_trip(self, tmp_path):
        ds = _flat()
        man = partition_dirichlet(ds, 3, 0.5, seed=1)
        man.save(tmp_path / "m.json")
        back = PartitionManifest.load(tmp_path / "m.json")
        check_manifest(back, ds)
        assert all(np.array_equal(a, b) for a, b in zip(man.train, back.train))

    def test_overlap_is_rejected(self):
        ds = _flat()
        man = partition_dirichlet(ds, 3, 0.5, seed=1)
        man.train[1] = np.concatenate([man.train[1], man.train[0][:1]])
        with pytest.raises(PartitionError, match="overlap"):
            check_manifest(man, ds)

    def test_fingerprint_mismatch(self):
        man = partition_dirichlet(_flat(), 3, 0.5, seed=1)
        with pytest.raises(PartitionError, match="different dataset"):
            check_manifest(man, _flat(4, 41))

    def test_train_test_class_balance(self):
        ds = synth_image_task(10, 23, 8, seed=3)
        man = partition_dirichlet(ds, 7, 0.3, seed=3)
        for i in range(7):
            tr = np.bincount(ds.labels[man.train[i]], minlength=10)
            te = np.bincount(ds.labels[man.test[i]], minlength=10)
            assert np.all(np.abs(te - 0.2 * (tr + te)) <= 1.0)


class TestNoiseLadder:
    def test_sigma_schedule(self):
        s = noise_sigmas(10, 20.0)
        assert s[0] == 0 and s[9] == pytest.approx(20.0)

    def test_zero_sigma_is_noiseless(self):
        ds = synth_image_task(4, 10, 8, seed=0)
        man = partition_dirichlet(ds, 3, 1.0, 0)
        out = apply_noise_ladder(man, ds, 0.0)
        np.testing.assert_array_equal(out.inputs, ds.inputs)

    def test_noise_grows_with_client_index(self):
        ds = synth_image_task(4, 20, 8, seed=0)
        man = partition_dirichlet(ds, 5, 100.0, 0)
        out = apply_noise_ladder(man, ds, 0.5, clip=False)
        spread = [np.std(out.inputs[man.client_indices(i)] - ds.inputs[man.client_indices(i)]) for i in range(5)]
        assert spread[0] == 0 and all(a < b for a, b in zip(spread, spread[1:]))
        clipped = apply_noise_ladder(man, ds, 0.5)
        assert clipped.inputs.min() >= 0 and clipped.inputs.max() <= 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int32), "c": np.float32(2.5) * np.ones(1, np.float32)}
        save_arrays(tmp_path / "x.npa", arrays, {"k": 1})
        back, cfg = load_arrays(tmp_path / "x.npa")
        assert cfg == {"k": 1}
        for k in arrays:
            assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])

    def test_truncated_payload(self, tmp_path):
        save_arrays(tmp_path / "x.npa", {"a": np.ones(100)})
        raw = (tmp_path / "x.npa").read_bytes()
        (tmp_path / "x.npa").write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_arrays(tmp_path / "x.npa")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.npa").write_bytes(b"NOTACKPT" + b"\x00" * 8)
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "x.npa")
