import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import brute_force_bits, loop_pool, small_operator, striped_images
from patchkernel.dataset import LabeledImageSet, extract_patches
from patchkernel.dictionary import Dictionary, sample_dictionary, sample_gaussian_dictionary, with_negations
from patchkernel.encoder import (
    HARD, SOFT, CacheHeader, EncodingError, FeatureCache, PartialCacheError, PatchEncoder,
    cache_status, compute_scores, encode_dataset, encode_hard, encode_soft, encoding_distance,
    pool, pooled_side, select_smallest, soft_assign, window_sum,
)


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(0)
    images = rng.random((6, 3, 12, 12))
    op = small_operator(images, 3)
    data = LabeledImageSet((images * 255).astype(np.uint8), np.zeros(6, np.uint8), "x")
    d = sample_dictionary(data, 8, 3, op, 1)
    return images, op, d


class TestScores:
    def test_self_match(self, small):
        images, op, _ = small
        img = images[0]
        target = op.apply(extract_patches(img, 3)[17])
        rng = np.random.default_rng(2)
        atoms = np.vstack([rng.standard_normal((5, 27)), target])
        d = Dictionary(with_negations(atoms), 6, 3)
        sm = compute_scores(img, d, op)
        assert np.argmin(sm.scores[:, 17 // 10, 17 % 10]) == 5

    def test_ranking_matches_distances(self, small):
        images, op, d = small
        img = images[1]
        sm = compute_scores(img, d, op)
        white = op.apply(extract_patches(img, 3))
        dist = ((white[:, None, :] - d.atoms[None]) ** 2).sum(-1)  # (L, 2|D|)
        s = sm.scores.reshape(d.size, -1).T
        assert np.array_equal(np.argsort(s, axis=1, kind="stable"), np.argsort(dist, axis=1, kind="stable"))
        assert np.allclose(sm.squared_distances().reshape(d.size, -1).T, dist, atol=1e-9)

    def test_bias_symmetry(self, small):
        images, op, d = small
        sm = compute_scores(images[2], d, op)
        n = d.base_size
        norms = (d.positives ** 2).sum(1)
        assert np.abs(sm.scores[:n] + sm.scores[n:] - norms[:, None, None]).max() <= 1e-8

    def test_dimension_mismatch(self, small):
        _, op, _ = small
        with pytest.raises(EncodingError):
            PatchEncoder(sample_gaussian_dictionary(4, 4, 0), op)


class TestHard:
    def test_all_neighbors(self, small):
        images, op, d = small
        bits = encode_hard(compute_scores(images[0], d, op), d.size).bits
        assert np.all(bits == 1)

    def test_nearest_self(self, small):
        images, op, _ = small
        white = op.apply(extract_patches(images[0], 3))
        d = Dictionary(with_negations(white[:4]), 4, 3)
        bits = encode_hard(compute_scores(images[0], d, op), 1).bits
        for k in range(4):
            assert bits[:, 0, k].tolist() == [1 if c == k else 0 for c in range(8)]

    def test_sort_oracle(self):
        scores = np.random.default_rng(3).standard_normal((10, 10, 32))
        bits = select_smallest(scores, 5)
        ref = np.zeros_like(bits)
        order = np.argsort(scores, axis=-1, kind="stable")[..., :5]
        np.put_along_axis(ref, order, 1, axis=-1)
        assert np.array_equal(bits, ref)

    def test_ties_lower_index(self):
        s = np.array([[1.0, 0.0, 1.0, 1.0, 2.0]])
        assert select_smallest(s, 2).tolist() == [[1, 1, 0, 0, 0]]
        assert select_smallest(s, 3).tolist() == [[1, 1, 1, 0, 0]]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 24), st.integers(0, 10_000))
    def test_exactly_q(self, q, seed):
        # integer-valued scores force plenty of ties
        scores = np.random.default_rng(seed).integers(0, 4, (7, 24)).astype(float)
        bits = select_smallest(scores, q)
        assert np.all(bits.sum(-1) == q)
        ref = np.zeros_like(bits)
        np.put_along_axis(ref, np.argsort(scores, -1, kind="stable")[:, :q], 1, -1)
        assert np.array_equal(bits, ref)

    @pytest.mark.parametrize("q", [0, 17])
    def test_q_out_of_range(self, small, q):
        images, op, d = small
        with pytest.raises(EncodingError):
            encode_hard(compute_scores(images[0], d, op), q)

    def test_brute_force_equivalence(self, small):
        images, op, d = small
        enc = PatchEncoder(d, op)
        for q in (1, 6, 11):
            conv = enc.encode(images, q)
            for b, img in enumerate(images):
                assert np.array_equal(conv[b], brute_force_bits(img, d, op, q))

    def test_thresholds(self, small):
        images, op, d = small
        sm = compute_scores(images[0], d, op)
        fm = encode_hard(sm, 4)
        s = sm.scores.reshape(d.size, -1)
        assert np.array_equal(fm.thresholds, np.sort(s, axis=0)[3])

    def test_contrast_flip_swaps_channels(self, small):
        _, op, d = small
        enc = PatchEncoder(d, op)
        n = d.base_size
        flipped = Dictionary(np.concatenate([d.atoms[n:], d.atoms[:n]]), n, 3)
        s = enc.scores(np.random.default_rng(9).random((1, 3, 12, 12)))
        s_flip = PatchEncoder(flipped, op).scores(np.random.default_rng(9).random((1, 3, 12, 12)))
        assert np.allclose(s_flip, np.concatenate([s[..., n:], s[..., :n]], -1), atol=1e-12)


class TestSoft:
    def test_threshold_atom_is_half(self):
        dist = np.array([[0.5, 1.0, 2.0, 3.0]])
        assert soft_assign(dist, 2)[0, 1] == 0.5

    def test_saturation(self):
        dist = np.array([[0.0, 1.0, 1e3]])
        assert soft_assign(dist, 1)[0, 2] < 1e-300

    def test_threshold_reproduces_hard(self, small):
        images, op, d = small
        sm = compute_scores(images[3], d, op)
        soft = encode_soft(sm, 6)
        hard = encode_hard(sm, 6).bits
        vals = np.moveaxis(soft, 0, -1)
        rebuilt = select_smallest(-vals, 6)  # largest soft values, ties to lower index
        assert np.array_equal(np.moveaxis(rebuilt, -1, 0), hard)
        assert np.array_equal((soft > 0.5) | (hard == 1), hard == 1)

    def test_values_in_unit_interval(self, small):
        images, op, d = small
        out = PatchEncoder(d, op).encode(images[:2], 5, SOFT)
        assert out.min() > 0 and out.max() < 1

    def test_uses_euclidean_distance(self, small):
        images, op, d = small
        out = PatchEncoder(d, op).encode(images[:1], 5, SOFT)[0]
        white = op.apply(extract_patches(images[0], 3))
        dist = np.sqrt(((white[:, None, :] - d.atoms[None]) ** 2).sum(-1))
        tau = np.sort(dist, axis=1)[:, 4:5]
        ref = 1 / (1 + np.exp(dist - tau))
        assert np.allclose(out.reshape(d.size, -1).T, ref, atol=1e-9)


class TestPool:
    def test_cifar_shape(self):
        assert pool(np.zeros((2, 27, 27)), 5, 3).shape == (2, 8, 8)
        assert pooled_side(27, 5, 3) == 8

    def test_constant(self):
        assert np.all(pool(np.ones((3, 27, 27)), 5, 3) == 1.0)

    def test_loop_oracle(self):
        x = np.random.default_rng(4).integers(0, 2, (4, 13, 13)).astype(float)
        for k, s in ((5, 3), (3, 2), (1, 1), (13, 1)):
            assert np.allclose(pool(x, k, s), loop_pool(x, k, s), atol=1e-15)

    def test_kernel_too_large(self):
        with pytest.raises(EncodingError):
            pool(np.zeros((1, 4, 4)), 5, 1)

    def test_window_sum_counts(self):
        x = np.random.default_rng(5).integers(0, 2, (2, 27, 27)).astype(np.uint16)
        assert np.array_equal(window_sum(x, 5, 3), np.rint(loop_pool(x, 5, 3) * 25))

    def test_pooled_in_unit_interval(self, small):
        images, op, d = small
        out = PatchEncoder(d, op).pooled(images, 5, 3, 2)
        assert out.shape == (6, 16, 4, 4) and out.min() >= 0 and out.max() <= 1


class TestHamming:
    def test_identity(self):
        a = np.random.default_rng(0).integers(0, 2, (4, 5, 5))
        assert encoding_distance(a, a) == 0

    def test_complement(self):
        a = np.random.default_rng(1).integers(0, 2, (4, 5, 5))
        assert encoding_distance(a, 1 - a) == a.size

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.integers(0, 2, (6, 7, 7)), rng.integers(0, 2, (6, 7, 7))
        count = 0
        for x, y in zip(a.ravel(), b.ravel()):
            count += int(x != y)
        assert encoding_distance(a, b) == count
        assert encoding_distance(a, b) == int(((a - b) ** 2).sum())

    def test_feature_maps(self, small):
        images, op, d = small
        fa = encode_hard(compute_scores(images[0], d, op), 4)
        fb = encode_hard(compute_scores(images[1], d, op), 4)
        assert encoding_distance(fa, fb) == int((fa.bits != fb.bits).sum())

    def test_shape_mismatch(self):
        with pytest.raises(EncodingError):
            encoding_distance(np.zeros((2, 2)), np.zeros((2, 3)))


class TestCache:
    @pytest.fixture()
    def env(self):
        data = striped_images(10, 1)
        op = small_operator(data.images(slice(0, 4)), 6)
        d = sample_dictionary(data, 16, 6, op, 0)
        return data, PatchEncoder(d, op)

    def test_round_trip_hard(self, tmp_path, env):
        data, enc = env
        path = str(tmp_path / "c.bin")
        cache = encode_dataset(data, enc, 13, 5, 3, path, batch_size=3)
        assert len(cache) == 10 and cache.feature_shape == (32, 8, 8)
        assert np.array_equal(cache.labels, data.labels)
        ref = enc.pooled(data.images(), 13, 5, 3, HARD, np.float64)
        got = cache.features(np.arange(10), np.float64)
        assert np.array_equal(got, ref)  # multiples of 1/25 survive quantization
        counts = enc.pooled_sums(data.images(), 13, 5, 3)
        assert np.array_equal(np.asarray(cache.records["features"]), counts)

    def test_round_trip_soft(self, tmp_path, env):
        data, enc = env
        path = str(tmp_path / "s.bin")
        cache = encode_dataset(data, enc, 13, 5, 3, path, SOFT)
        assert cache.records["features"].dtype == np.dtype("<u2")
        ref = enc.pooled(data.images(), 13, 5, 3, SOFT, np.float64)
        assert np.abs(cache.features(slice(None), np.float64) - ref).max() <= 0.5 / 65535 + 1e-12

    def test_file_size(self, tmp_path, env):
        data, enc = env
        path = str(tmp_path / "c.bin")
        cache = encode_dataset(data, enc, 13, 5, 3, path)
        rec = 1 + 32 * 8 * 8
        assert os.path.getsize(path) == cache.header.pack().__len__() + 10 * rec

    def test_reference_size_arithmetic(self):
        header = CacheHeader(50_000, 4096, 8, 8, HARD, 5)
        assert header.record_dtype.itemsize == 1 + 4096 * 64
        assert 12.5e9 < 50_000 * header.record_dtype.itemsize < 13.5e9

    def test_complete_is_noop(self, tmp_path, env):
        data, enc = env
        path = str(tmp_path / "c.bin")
        encode_dataset(data, enc, 13, 5, 3, path)
        before = os.stat(path).st_mtime_ns
        encode_dataset(data, enc, 13, 5, 3, path)
        assert os.stat(path).st_mtime_ns == before

    def test_partial_and_resume(self, tmp_path, env):
        data, enc = env
        full = str(tmp_path / "full.bin")
        encode_dataset(data, enc, 13, 5, 3, full)
        blob = open(full, "rb").read()
        part = str(tmp_path / "part.bin")
        with open(part, "wb") as f:
            f.write(blob[:len(blob) - 1500])  # cut inside a record
        header = FeatureCache(full).header
        assert cache_status(part, header) == "partial"
        with pytest.raises(PartialCacheError):
            FeatureCache(part)
        with pytest.raises(PartialCacheError):
            encode_dataset(data, enc, 13, 5, 3, part)
        encode_dataset(data, enc, 13, 5, 3, part, resume=True)
        assert open(part, "rb").read() == blob

    def test_mismatch(self, tmp_path, env):
        data, enc = env
        path = str(tmp_path / "c.bin")
        encode_dataset(data, enc, 13, 5, 3, path)
        with pytest.raises(EncodingError, match="different"):
            encode_dataset(data, enc, 12, 5, 3, path)
        with pytest.raises(EncodingError, match="different"):
            encode_dataset(data, enc, 13, 3, 3, path)

    def test_different_dictionary_is_mismatch(self, tmp_path, env):
        data, enc = env
        path = str(tmp_path / "c.bin")
        encode_dataset(data, enc, 13, 5, 3, path)
        other = PatchEncoder(sample_dictionary(data, 16, 6, enc.op, 1), enc.op)
        with pytest.raises(EncodingError):
            encode_dataset(data, other, 13, 5, 3, path)

    def test_unknown_assignment(self, tmp_path, env):
        data, enc = env
        with pytest.raises(EncodingError):
            encode_dataset(data, enc, 13, 5, 3, str(tmp_path / "c.bin"), "fuzzy")

    def test_not_a_cache(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"x" * 100)
        with pytest.raises(EncodingError):
            FeatureCache(str(path))


def test_zca_pca_bitwise(small):
    images, _, _ = small
    data = LabeledImageSet((images * 255).astype(np.uint8), np.zeros(6, np.uint8), "x")
    imgs = data.images()
    ops = [small_operator(imgs, 3, 1e-3, o) for o in ("zca", "pca")]
    dz = sample_dictionary(data, 10, 3, ops[0], 4)
    dp = sample_dictionary(data, 10, 3, ops[1], 4)
    assert np.array_equal(dz.provenance, dp.provenance)
    bz = PatchEncoder(dz, ops[0]).encode(imgs, 7)
    bp = PatchEncoder(dp, ops[1]).encode(imgs, 7)
    assert np.array_equal(bz, bp)
