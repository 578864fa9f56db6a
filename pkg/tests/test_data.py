import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treelso import data
from treelso.data import WeightedDataset, rank_weights
from treelso.errors import FormatError, InvalidInputError

finite = st.floats(-1e6, 1e6, allow_nan=False)


class TestRankWeights:
    def test_single(self):
        np.testing.assert_array_equal(rank_weights([4.2], 1e-3), [1.0])

    def test_three_points(self):
        raw = np.array([1 / 3, 1 / 5, 1 / 4])
        expected = raw / raw.sum()
        np.testing.assert_allclose(rank_weights([3, 1, 2], 1.0), expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(rank_weights([3, 1, 2], 1.0), [0.42553191489, 0.25531914893, 0.31914893617],
                                   atol=1e-10)

    def test_large_k_flattens(self, rng):
        w = rank_weights(rng.normal(size=100), 1e6)
        assert w.max() - w.min() < 1e-5

    def test_ties_share_weight(self):
        w = rank_weights([1.0, 2.0, 2.0, 0.5], 0.1)
        assert w[1] == w[2]
        assert w[1] > w[0] > w[3]

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            rank_weights([1.0, np.nan], 1.0)
        with pytest.raises(InvalidInputError):
            rank_weights([1.0, np.inf], 1.0)

    def test_bad_k(self):
        with pytest.raises(InvalidInputError):
            rank_weights([1.0], 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=200), st.floats(1e-6, 1e3))
    def test_properties(self, scores, k):
        w = rank_weights(scores, k)
        s = np.asarray(scores)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w > 0)
        for i in range(len(s)):
            for j in range(len(s)):
                if s[i] > s[j]:
                    assert w[i] > w[j]
                elif s[i] == s[j]:
                    assert w[i] == w[j]


class TestWeightedDataset:
    def test_uniform_single(self):
        ds = WeightedDataset.uniform(np.zeros((1, 16, 16, 1)), [0.3])
        np.testing.assert_array_equal(ds.weights, [1.0])

    def test_extend_recomputes(self, rng):
        ds = WeightedDataset.ranked(rng.random((5, 4, 4, 1)), [0, 1, 2, 3, 4], 1e-3)
        bigger = ds.extend(rng.random((2, 4, 4, 1)), [10.0, -1.0])
        assert len(bigger) == 7
        assert bigger.weights.argmax() == 5
        assert abs(bigger.weights.sum() - 1) <= 1e-12


class TestFiles:
    def test_image_round_trip(self, rng, tmp_path):
        images = rng.random((7, 16, 16, 1)).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.img"
        data.write_images(path, images)
        np.testing.assert_array_equal(data.read_images(path), images)
        raw = path.read_bytes()
        assert raw.startswith(b"TREELSO-IMG v1\n7 16 16 1\n")
        assert len(raw) == len(b"TREELSO-IMG v1\n7 16 16 1\n") + 4 * 7 * 256

    @pytest.mark.parametrize("blob", [b"nope", b"TREELSO-IMG v1\n1 2 2 1\n\0\0", b"TREELSO-IMG v1\na b c d\n"])
    def test_corrupt_images(self, blob):
        with pytest.raises(FormatError):
            data.images_from_bytes(blob)

    def test_scores_round_trip(self, tmp_path):
        scores = np.array([0.1, 1 / 3, 2.0])
        path = tmp_path / "s.csv"
        data.write_scores(path, scores)
        assert path.read_text().splitlines()[0] == "index,score"
        np.testing.assert_array_equal(data.read_scores(path), scores)

    def test_bad_scores(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("index,score\n1,0.5\n")
        with pytest.raises(FormatError):
            data.read_scores(path)
        path.write_text("idx,value\n")
        with pytest.raises(FormatError):
            data.read_scores(path)
