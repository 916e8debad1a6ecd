import time

import numpy as np
import pytest

from bragg_nac.archspace import builtin_nac_base
from bragg_nac.data import (
    DataConfig,
    PeakDataset,
    PeakParams,
    center_of_mass,
    center_of_mass_batch,
    denormalize,
    fit_pseudo_voigt,
    generate_dataset,
    normalize,
    pseudo_voigt_2d,
    split_sizes,
)


@pytest.mark.parametrize("eta", [0.0, 1.0])
def test_peak_value_at_center(eta):
    p = pseudo_voigt_2d(PeakParams(4, 6, 1.2, 0.9, eta, 100.0, 3.0))
    assert p[4, 6] == pytest.approx(103.0)
    assert p.argmax() == 4 * 11 + 6


def test_symmetric_peak_is_transpose_invariant():
    p = pseudo_voigt_2d(PeakParams(5, 5, 1.3, 1.3, 0.4, 200, 2))
    np.testing.assert_allclose(p, p.T, atol=1e-6)


def test_split_sizes():
    assert split_sizes(70_000) == (56_000, 7_000, 7_000)
    assert split_sizes(15) == (13, 1, 1)


def test_splits_cover_and_are_disjoint():
    ds = generate_dataset(1000, seed=3)
    counts = np.bincount(ds.split, minlength=3)
    assert tuple(counts) == split_sizes(1000)
    assert sum(len(ds.subset(s)[0]) for s in ("train", "val", "test")) == len(ds)


def test_sampled_params_respect_ranges():
    ds = generate_dataset(3000, seed=4)
    p = ds.params
    assert np.all((p[:, :2] >= 4) & (p[:, :2] <= 6))
    assert np.all((p[:, 2:4] >= 0.7) & (p[:, 2:4] <= 2.0))
    assert np.all((p[:, 4] >= 0) & (p[:, 4] <= 1))
    assert np.all((p[:, 5] >= 50) & (p[:, 5] <= 500))
    assert np.all((p[:, 6] >= 0) & (p[:, 6] <= 10))
    assert ds.patches.min() == 0.0 and ds.patches.max() == 1.0
    assert np.all((ds.labels >= 0) & (ds.labels <= 1))


def test_generation_is_deterministic_and_chunk_stable(tmp_path):
    a, b = generate_dataset(2500, seed=9, noise_level=0.3), generate_dataset(2500, seed=9, noise_level=0.3)
    a.save(tmp_path / "a.nacd")
    b.save(tmp_path / "b.nacd")
    assert (tmp_path / "a.nacd").read_bytes() == (tmp_path / "b.nacd").read_bytes()
    # the first chunk does not depend on the total size
    c = generate_dataset(1024, seed=9, noise_level=0.3)
    np.testing.assert_array_equal(a.patches[:1024], c.patches)


def test_file_round_trip(tmp_path):
    ds = generate_dataset(200, seed=1, noise_level=0.5)
    path = tmp_path / "d.nacd"
    ds.save(path)
    back = PeakDataset.load(path)
    assert back.patches.tobytes() == ds.patches.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()
    np.testing.assert_array_equal(back.split, ds.split)
    raw = path.read_bytes()
    assert raw[:4] == b"NACD"
    assert len(raw) == 12 + 200 + 200 * 123 * 4
    with pytest.raises(ValueError):
        PeakDataset.from_bytes(raw[:-4])


def test_label_normalization_round_trip():
    c = np.random.default_rng(0).uniform(0, 11, (100, 2))
    np.testing.assert_allclose(denormalize(normalize(c)), c, atol=1e-6)


def test_invalid_config():
    with pytest.raises(ValueError):
        DataConfig(sigma_range=(2.0, 0.7))
    with pytest.raises(ValueError):
        DataConfig(noise_level=-1)
    with pytest.raises(ValueError):
        DataConfig(eta_range=(0.0, 1.5))
    with pytest.raises(ValueError):
        generate_dataset(5)


class TestFitting:
    def test_noiseless_recovery(self):
        ds = generate_dataset(200, seed=2)
        for i in range(30):
            r = fit_pseudo_voigt(ds.patches[i, 0])
            assert r.converged
            assert np.linalg.norm(r.center - ds.params[i, :2]) <= 0.02

    def test_constant_patch_rejected(self):
        with pytest.raises(ValueError):
            fit_pseudo_voigt(np.ones((11, 11)))

    def test_garbage_is_flagged(self):
        noise = np.random.default_rng(0).random((11, 11))
        r = fit_pseudo_voigt(noise)
        assert not r.converged
        assert r.center.shape == (2,)

    def test_fit_much_slower_than_network(self):
        ds = generate_dataset(1024, seed=3)
        net = builtin_nac_base().build()
        x = ds.patches[:1]
        net(x)
        t0 = time.perf_counter()
        for _ in range(20):
            net(x)
        forward = (time.perf_counter() - t0) / 20
        t0 = time.perf_counter()
        for i in range(10):
            fit_pseudo_voigt(ds.patches[i, 0])
        fit = (time.perf_counter() - t0) / 10
        # compare per-patch cost at the batch size the network is used with
        t0 = time.perf_counter()
        net(ds.patches)
        batched = (time.perf_counter() - t0) / len(ds.patches)
        assert fit >= 100 * batched
        assert fit > forward


class TestCenterOfMass:
    def test_hot_pixel(self):
        p = np.zeros((11, 11))
        p[3, 7] = 1
        np.testing.assert_array_equal(center_of_mass(p), [3, 7])

    def test_symmetric_peak(self):
        p = pseudo_voigt_2d(PeakParams(5, 5, 1.5, 1.5, 0.3, 100, 5))
        np.testing.assert_allclose(center_of_mass(p), [5, 5], atol=1e-6)

    def test_zero_patch(self):
        with pytest.raises(ValueError):
            center_of_mass(np.zeros((11, 11)))

    def test_background_biases_toward_midpoint(self):
        p = pseudo_voigt_2d(PeakParams(5.8, 4.3, 1.0, 1.4, 0.5, 100, 8))
        com = center_of_mass(p)
        fit = fit_pseudo_voigt(p).center
        truth = np.array([5.8, 4.3])
        assert np.linalg.norm(com - 5) < np.linalg.norm(truth - 5)
        assert np.linalg.norm(com - truth) > np.linalg.norm(fit - truth)

    def test_batch_matches_single(self):
        ds = generate_dataset(20, seed=5, noise_level=0.5)
        batch = center_of_mass_batch(ds.patches)
        for i in range(20):
            np.testing.assert_allclose(batch[i], center_of_mass(ds.patches[i, 0]), rtol=1e-10)
