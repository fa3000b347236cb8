import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import striped_images
from patchkernel.analysis import (
    SPECTRUM_FIELDS, SWEEP_FIELDS, AnalysisError, covariance_dimension, covariance_spectrum,
    dimension_sweep, intrinsic_dimension, intrinsic_dimension_local, knn_distances,
    write_spectrum_csv, write_sweep_csv,
)


def _prefix_oracle(ev, threshold=0.95):
    total = sum(ev)
    acc = 0.0
    for i, v in enumerate(ev, start=1):
        acc += v
        if acc >= threshold * total - 1e-12 * total:
            return i
    return len(ev)


def embed(points, ambient, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((ambient, points.shape[1])))
    return points @ q.T


class TestSpectrum:
    def test_diagonal(self):
        assert np.allclose(covariance_spectrum(np.diag([4.0, 1.0]), normalize=False), [2, 1])
        assert np.allclose(covariance_spectrum(np.diag([4.0, 1.0])), [1, 0.5])

    def test_isotropic(self):
        assert np.allclose(covariance_spectrum(np.eye(7)), np.ones(7))

    def test_eigensolver_oracle(self):
        a = np.random.default_rng(0).standard_normal((15, 15))
        s = a @ a.T
        ref = np.sqrt(np.maximum(np.linalg.eigvalsh(s)[::-1], 0))
        got = covariance_spectrum(s, normalize=False)
        assert np.allclose(got, ref, atol=1e-10)
        assert np.all(np.diff(got) <= 0)

    def test_non_psd(self):
        with pytest.raises(Exception):
            covariance_spectrum(np.diag([1.0, -1.0]))


class TestCovarianceDimension:
    def test_identity(self):
        assert covariance_dimension(np.ones(100)) == 95

    def test_rank_one(self):
        assert covariance_dimension(np.array([5.0, 0, 0, 0])) == 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=60), st.floats(0.5, 0.99))
    def test_prefix_oracle(self, values, threshold):
        ev = np.sort(np.array(values))[::-1]
        if ev.sum() <= 0:
            return
        assert covariance_dimension(ev, threshold) == _prefix_oracle(ev.tolist(), threshold)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, c):
        ev = np.sort(np.random.default_rng(seed).random(40) ** 3)[::-1]
        assert covariance_dimension(ev) == covariance_dimension(ev * c)

    @pytest.mark.parametrize("bad", [[], [0.0, 0.0], [1.0, -0.1], [1.0, 2.0]])
    def test_invalid(self, bad):
        with pytest.raises(AnalysisError):
            covariance_dimension(np.array(bad))


class TestLocal:
    def test_three_neighbors(self):
        expect = 1 / (0.5 * (math.log(4) + math.log(2)))
        assert intrinsic_dimension_local([1.0, 2.0, 4.0]) == pytest.approx(expect, rel=1e-14)
        assert expect == pytest.approx(0.9618, abs=1e-4)

    def test_geometric_closed_form(self):
        c, r, k = 0.7, 1.3, 9
        tau = [c * r ** (k - j) for j in range(k, 0, -1)]  # ascending
        direct = (1 / (k - 1) * sum(math.log(tau[-1] / t) for t in tau[:-1])) ** -1
        closed = 2 / (k * math.log(r))  # mean of (k - j) log r over j = 1..k-1
        assert intrinsic_dimension_local(tau) == pytest.approx(direct, rel=1e-12)
        assert direct == pytest.approx(closed, rel=1e-12)

    def test_equidistant(self):
        assert intrinsic_dimension_local([1.0] * 9 + [1.001]) > 500

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 100.0), min_size=2, max_size=30, unique=True), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, tau, c):
        tau = np.sort(np.array(tau))
        assert intrinsic_dimension_local(tau * c) == pytest.approx(intrinsic_dimension_local(tau), rel=1e-9)

    def test_errors(self):
        with pytest.raises(AnalysisError):
            intrinsic_dimension_local([1.0])
        with pytest.raises(AnalysisError):
            intrinsic_dimension_local([0.0, 1.0, 2.0])


class TestIntrinsic:
    def test_knn_brute_force(self):
        x = np.random.default_rng(0).random((60, 5))
        got = knn_distances(x, np.arange(60), 7, chunk=13)
        full = np.linalg.norm(x[:, None] - x[None], axis=-1)
        np.fill_diagonal(full, np.inf)
        assert np.allclose(got, np.sort(full, axis=1)[:, :7], atol=1e-12)

    def test_uniform_square(self):
        pts = embed(np.random.default_rng(1).random((2000, 2)), 108, 2)
        d = intrinsic_dimension(pts, 100).value
        assert 1.6 <= d <= 2.4

    def test_gaussian_5d(self):
        pts = embed(np.random.default_rng(3).standard_normal((2000, 5)), 50, 4)
        d = intrinsic_dimension(pts, 100).value
        assert 4.0 <= d <= 6.0

    def test_duplicates_skipped(self):
        x = np.random.default_rng(5).random((50, 3))
        x[1] = x[0]
        res = intrinsic_dimension(x, 5)
        assert res.skipped == 2 and len(res.local) == 48

    def test_anchor_subset(self):
        x = np.random.default_rng(6).random((300, 3))
        res = intrinsic_dimension(x, 10, max_anchors=50, rng=1)
        assert len(res.local) == 50
        assert res.value == intrinsic_dimension(x, 10, max_anchors=50, rng=1).value

    def test_too_small(self):
        with pytest.raises(AnalysisError):
            intrinsic_dimension(np.zeros((5, 2)), 5)


@pytest.fixture(scope="module")
def reports():
    data = striped_images(60, 0, noise=0.05)
    return dimension_sweep(data, [3, 6], 1e-3, dict_size=1200, k=100, moment_samples=20_000,
                           max_anchors=300, seed=0)


class TestSweep:
    def test_shapes_and_order(self, reports):
        assert [r.dExt for r in reports] == [27, 108]
        for r in reports:
            assert 1 <= r.dCovRaw <= r.dExt and 1 <= r.dCovWhite <= r.dExt
            assert r.dIntRaw > 0 and r.dIntWhite > 0
            assert r.dCovWhite >= r.dCovRaw

    def test_csv(self, reports, tmp_path):
        path = tmp_path / "dims.csv"
        write_sweep_csv(str(path), reports)
        rows = list(csv.reader(open(path)))
        assert tuple(rows[0]) == SWEEP_FIELDS
        assert rows[2][0] == "6" and rows[2][1] == "108"
        spectrum_path = tmp_path / "spectrum.csv"
        write_spectrum_csv(str(spectrum_path), np.array([1.0, 0.5]))
        rows = list(csv.reader(open(spectrum_path)))
        assert tuple(rows[0]) == SPECTRUM_FIELDS and rows[1:] == [["1", "1.0"], ["2", "0.5"]]

    def test_invalid_patch_size(self):
        with pytest.raises(AnalysisError):
            dimension_sweep(striped_images(3, 0), [40])


def test_whitened_spectrum_flat():
    # held-out whitening check: lambda = 0 flattens the spectrum to within 15%
    from patchkernel.dataset import gather_patches, sample_patch_positions
    from patchkernel.whitening import build_whitening_operator, dataset_patch_moments
    fit, held = striped_images(200, 20), striped_images(200, 21)
    op = build_whitening_operator(dataset_patch_moments(fit, 4, np.random.default_rng(0), 60_000), 0.0)
    pos = sample_patch_positions(len(held), 32, 4, 20_000, np.random.default_rng(1))
    white = op.apply(gather_patches(held, pos, 4))
    spectrum = covariance_spectrum(np.cov(white.T, bias=True), normalize=False)
    assert np.abs(spectrum - 1).max() <= 0.15
