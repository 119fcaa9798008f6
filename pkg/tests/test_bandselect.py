import math
import random

import numpy as np
import pytest

from hypercloud.common.errors import (
    BandOutOfRange,
    DataError,
    EmptyInput,
    InvalidWavelengths,
    NonConvergence,
    TooFewSamples,
)
from hypercloud.services.bandselect_service import (
    BandSelection,
    ChannelProvenance,
    PcaResult,
    correlation_clusters,
    covariance,
    jacobi_eigh,
    load_selection,
    match_wavelengths,
    pca,
    replicate_channels,
    resolve_overlaps,
    sample_pixels,
    save_selection,
    select_every_second,
    select_per_class_channels,
    select_single_channel,
    standardize,
)
from conftest import make_tiles


def block_data(rng, blocks, n=500, noise=0.02):
    """Each (first, last) block shares one latent signal; blocks are independent."""
    channels = blocks[-1][1] + 1
    data = np.empty((n, channels))
    for first, last in blocks:
        latent = rng.standard_normal(n)
        for c in range(first, last + 1):
            data[:, c] = latent * (1.0 + 0.1 * c) + noise * rng.standard_normal(n)
    return data


class TestStandardize:
    def test_closed_form(self):
        z = standardize(np.array([[1.0], [2.0], [3.0]]))
        np.testing.assert_allclose(z.data[:, 0], [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
        assert z.std[0] == pytest.approx(math.sqrt(2 / 3))

    def test_constant_channel_is_flagged(self):
        z = standardize(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]]))
        np.testing.assert_array_equal(z.data[:, 0], 0.0)
        assert z.degenerate.tolist() == [True, False]

    def test_idempotent(self, rng):
        once = standardize(rng.standard_normal((50, 4))).data
        np.testing.assert_allclose(standardize(once).data, once, atol=1e-9)
        assert np.abs(once.mean(axis=0)).max() < 1e-9

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            standardize(np.ones((1, 3)))


class TestPca:
    def test_axis_aligned_variances(self):
        x = np.array([[2.0, 1.0], [-2.0, 1.0], [2.0, -1.0], [-2.0, -1.0]])
        result = pca(x)
        np.testing.assert_allclose(result.eigenvalues, [4.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(result.pc1_weights, [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(result.explained_variance_ratio, [0.8, 0.2], atol=1e-12)

    def test_correlated_pair(self, rng):
        a = rng.standard_normal(100)
        result = pca(np.stack([a, a], axis=1))
        np.testing.assert_allclose(result.pc1_weights, [1 / math.sqrt(2)] * 2, atol=1e-9)

    def test_matches_dense_solver(self, rng):
        x = rng.standard_normal((200, 8)) @ rng.standard_normal((8, 8))
        result = pca(x)
        values, vectors = np.linalg.eigh(covariance(x))
        np.testing.assert_allclose(result.eigenvalues, values[::-1], atol=1e-6)
        for row, expected in zip(result.eigenvectors, vectors[:, ::-1].T):
            assert abs(float(row @ expected)) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_orthonormal_and_trace_preserving(self, seed):
        x = np.random.default_rng(seed).standard_normal((60, 6))
        result = pca(x)
        v = result.eigenvectors
        assert np.abs(v @ v.T - np.eye(6)).max() < 1e-6
        assert result.eigenvalues.sum() == pytest.approx(np.trace(covariance(x)), abs=1e-6)
        assert np.all(np.diff(result.eigenvalues) <= 1e-12)
        assert result.eigenvalues.min() >= -1e-9

    def test_sign_convention(self, rng):
        result = pca(rng.standard_normal((40, 5)))
        for row in result.eigenvectors:
            assert row[np.argmax(np.abs(row))] > 0

    def test_jacobi_budget(self):
        with pytest.raises(NonConvergence):
            jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]), max_sweeps=0)

    def test_jacobi_on_diagonal_needs_no_sweeps(self):
        values, vectors, sweeps = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
        assert sweeps == 0
        np.testing.assert_array_equal(values, [3.0, 1.0, 2.0])
        np.testing.assert_array_equal(vectors, np.eye(3))


class TestCorrelationClusters:
    def test_two_identical_pairs(self, rng):
        a, b = rng.standard_normal(100), rng.standard_normal(100)
        clusters = correlation_clusters(np.stack([a, a, b, b], axis=1), threshold=0.9)
        assert clusters.clusters == ((0, 1), (2, 3))
        assert clusters.cluster_of(3) == (2, 3)

    def test_identical_channels_form_one_cluster(self, rng):
        a = rng.standard_normal(50)
        assert correlation_clusters(np.stack([a] * 5, axis=1)).clusters == ((0, 4),)

    def test_recovers_generating_blocks(self, rng):
        blocks = [(0, 2), (3, 5), (6, 9), (10, 10)]
        clusters = correlation_clusters(block_data(rng, blocks))
        assert clusters.clusters == tuple(blocks)

    def test_matrix_properties(self, rng):
        clusters = correlation_clusters(rng.standard_normal((30, 4)))
        m = clusters.matrix
        np.testing.assert_array_equal(m, m.T)
        np.testing.assert_array_equal(np.diag(m), 1.0)
        assert np.abs(m).max() <= 1.0

    def test_invariant_under_positive_affine_maps(self, rng):
        x = rng.standard_normal((40, 3))
        scaled = x * np.array([2.0, 0.5, 7.0]) + np.array([1.0, -3.0, 10.0])
        np.testing.assert_allclose(correlation_clusters(x).matrix, correlation_clusters(scaled).matrix, atol=1e-12)

    def test_degenerate_channel_is_its_own_cluster(self, rng):
        a = rng.standard_normal(20)
        clusters = correlation_clusters(np.stack([a, a, np.ones(20), a], axis=1))
        assert clusters.clusters == ((0, 1), (2, 2), (3, 3))


class TestSingleChannel:
    def _result(self, weights):
        weights = np.asarray(weights, dtype=float)
        return PcaResult(np.array([1.0]), weights[None, :])

    def test_argmax(self):
        assert select_single_channel(self._result([0.1, 0.9, 0.3])).channel_indices == (1,)

    def test_tie_goes_to_lowest_index(self):
        assert select_single_channel(self._result([0.5, 0.5])).channel_indices == (0,)

    def test_degenerate_channels_are_never_chosen(self, rng):
        x = rng.standard_normal((30, 3))
        x[:, 1] = 4.0
        result = pca(standardize(x).data)
        assert select_single_channel(result).channel_indices != (1,)

    def test_scale_invariance(self, rng):
        x = block_data(rng, [(0, 3), (4, 5)]) + rng.standard_normal((500, 6))
        a = select_single_channel(pca(standardize(x).data))
        b = select_single_channel(pca(standardize(5.0 * x).data))
        assert a.channel_indices == b.channel_indices

    def test_wavelength_attached(self):
        selection = select_single_channel(self._result([0.1, 0.9]), wavelengths=[450.0, 900.0])
        assert selection.wavelengths_nm == (900.0,)


class TestPerClass:
    def test_one_class_two_clusters(self, rng):
        x = block_data(rng, [(0, 2), (3, 5)])
        selection = select_per_class_channels([x])
        weights = pca(standardize(x).data).pc1_weights
        expected = (int(np.argmax(weights[:3])), 3 + int(np.argmax(weights[3:])))
        assert selection.channel_indices == expected
        assert selection.mode == "perclass"
        assert [p.cluster for p in selection.provenance] == [(0, 2), (3, 5)]

    def test_same_channel_from_two_classes_appears_once(self, rng):
        x = block_data(rng, [(0, 2), (3, 5)])
        single = select_per_class_channels([x])
        double = select_per_class_channels([x, x])
        assert double.channel_indices == single.channel_indices
        assert all(p.source_class == 0 for p in double.provenance)

    def test_too_few_samples(self, rng):
        with pytest.raises(TooFewSamples):
            select_per_class_channels([rng.standard_normal((10, 3)), np.ones((1, 3))])

    def test_mapping_input(self, rng):
        x = block_data(rng, [(0, 1), (2, 3)])
        assert select_per_class_channels({2: x}).provenance[0].source_class == 2


class TestResolveOverlaps:
    CANDIDATES = [
        ChannelProvenance(5, 0, (3, 7), 0.8),
        ChannelProvenance(6, 1, (5, 9), 0.9),
        ChannelProvenance(2, 2, (0, 4), 0.7),
        ChannelProvenance(12, 0, (10, 14), 0.5),
    ]

    def test_lower_weight_overlaps_are_discarded(self):
        # 2 loses to 5 and 5 loses to 6, even though 5 is itself dropped
        assert [p.channel for p in resolve_overlaps(self.CANDIDATES)] == [6, 12]

    def test_order_free(self):
        expected = resolve_overlaps(self.CANDIDATES)
        shuffled = list(self.CANDIDATES)
        for seed in range(10):
            random.Random(seed).shuffle(shuffled)
            assert resolve_overlaps(shuffled) == expected

    def test_equal_weights_prefer_lower_channel(self):
        picks = [ChannelProvenance(4, 1, (2, 5), 0.5), ChannelProvenance(3, 0, (3, 6), 0.5)]
        assert [p.channel for p in resolve_overlaps(picks)] == [3]


class TestEverySecond:
    def test_full_sensor_truncates_to_98(self):
        selection = select_every_second(198)
        assert len(selection) == 98
        assert selection.channel_indices[:3] == (0, 2, 4)
        assert selection.channel_indices[-1] == 194

    def test_without_limit(self):
        assert len(select_every_second(198, limit=None)) == 99

    @pytest.mark.parametrize("channels, expected", [(4, (0, 2)), (5, (0, 2, 4)), (2, (0,))])
    def test_small(self, channels, expected):
        assert select_every_second(channels).channel_indices == expected

    def test_single_channel_sensor(self):
        with pytest.raises(EmptyInput):
            select_every_second(1)


class TestReplicate:
    def test_one_channel(self):
        out = replicate_channels([0.7], 91)
        assert out.shape == (91,) and np.all(out == 0.7)

    def test_six_channels(self):
        spectrum = np.arange(6.0)
        out = replicate_channels(spectrum, 16)
        assert out.shape == (96,)
        np.testing.assert_array_equal(out, spectrum[np.arange(96) % 6])

    def test_small(self):
        np.testing.assert_array_equal(replicate_channels([1.0, 2.0, 3.0], 2), [1, 2, 3, 1, 2, 3])

    def test_batched_last_axis(self):
        out = replicate_channels(np.array([[1.0, 2.0], [3.0, 4.0]]), 3)
        np.testing.assert_array_equal(out[1], [3, 4, 3, 4, 3, 4])


class TestBandSelection:
    def test_indices_must_be_sorted(self):
        with pytest.raises(DataError):
            BandSelection((3, 1), 5)

    def test_indices_in_range(self):
        with pytest.raises(BandOutOfRange):
            BandSelection((0, 5), 5)

    def test_save_and_load(self, tmp_path):
        selection = BandSelection(
            (28, 47), 198, mode="perclass", wavelengths_nm=(722.0, 915.0),
            provenance=(ChannelProvenance(28, 0, (20, 30), 0.4), ChannelProvenance(47, 2, (40, 50), 0.3)),
            threshold=0.9,
        )
        save_selection(selection, tmp_path / "bands.json")
        assert load_selection(tmp_path / "bands.json") == selection

    def test_schema_is_checked(self, tmp_path):
        (tmp_path / "bands.json").write_text('{"schema": "other/1"}')
        with pytest.raises(DataError):
            load_selection(tmp_path / "bands.json")


class TestMatchWavelengths:
    def test_nearest_channel(self):
        selection = BandSelection((1, 3), 4, wavelengths_nm=(500.0, 1000.0))
        matched = match_wavelengths(selection, np.linspace(400.0, 1400.0, 11))
        assert matched.channel_indices == (1, 6)
        assert matched.wavelengths_nm == (500.0, 1000.0)
        assert matched.channels == 11

    def test_duplicates_collapse(self):
        selection = BandSelection((0, 1), 2, wavelengths_nm=(500.0, 510.0))
        assert match_wavelengths(selection, [400.0, 505.0, 900.0]).channel_indices == (1,)

    def test_needs_wavelengths(self):
        with pytest.raises(InvalidWavelengths):
            match_wavelengths(BandSelection((0,), 2), [400.0])


class TestSamplePixels:
    def test_seeded(self):
        tiles = make_tiles(count=2, size=8, channels=4)
        a = sample_pixels(tiles, per_tile=10, seed=3)
        b = sample_pixels(tiles, per_tile=10, seed=3)
        assert a.shape == (20, 4)
        np.testing.assert_array_equal(a, b)

    def test_by_class_follows_masks(self):
        tiles = make_tiles(count=2, size=8, channels=4)
        by_class = sample_pixels(tiles, per_tile=64, seed=0, by_class=True)
        assert sorted(by_class) == [0, 1, 2]
        assert sum(len(m) for m in by_class.values()) == 128
        labels = np.concatenate([t.mask.labels.ravel() for t in tiles])
        for class_id, matrix in by_class.items():
            assert len(matrix) == np.count_nonzero(labels == class_id)
