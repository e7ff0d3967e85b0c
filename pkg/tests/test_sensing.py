import numpy as np
import pytest

from racs.errors import DimensionError, RangeError, SingularityError
from racs.sensing import (EncodedBlock, MeasurementMatrix, decode_init, dequantize, gaussian_init, measure,
                          quantize_export)


@pytest.fixture
def phi():
    return gaussian_init(64, 16, 4, seed=0, dtype=np.float64)


class TestMeasurementMatrix:
    def test_prefix_is_a_view(self, phi):
        p = phi.prefix(5)
        assert p.shape == (5, 64)
        assert np.shares_memory(p, phi.rows)

    @pytest.mark.parametrize("r", [3, 17, 0])
    def test_prefix_out_of_range(self, phi, r):
        with pytest.raises(RangeError):
            phi.prefix(r)

    def test_rates(self, phi):
        assert phi.mr(16) == 0.25
        assert phi.mr_range() == (4 / 64, 16 / 64)

    def test_rejects_more_rows_than_pixels(self):
        with pytest.raises(RangeError):
            MeasurementMatrix(np.ones((5, 4)))

    def test_copy_is_independent(self, phi):
        c = phi.copy()
        c.rows[0, 0] += 1.0
        assert c.rows[0, 0] != phi.rows[0, 0]


class TestGaussianInit:
    def test_variance(self):
        phi = gaussian_init(1000, 100, 1, seed=1, dtype=np.float64)
        assert phi.rows.var() == pytest.approx(1 / 1000, rel=0.05)

    def test_seeded(self):
        a = gaussian_init(16, 4, 1, seed=7)
        b = gaussian_init(16, 4, 1, seed=7)
        assert a.rows.tobytes() == b.rows.tobytes()

    def test_bad_bounds(self):
        with pytest.raises(RangeError):
            gaussian_init(16, 4, 5, seed=0)


class TestMeasureDecode:
    def test_prefix_consistency(self, phi):
        x = np.random.default_rng(2).random((8, 8))
        full = measure(phi, x, 16).values
        np.testing.assert_array_equal(measure(phi, x, 6).values, full[:6])

    def test_pixel_count_checked(self, phi):
        with pytest.raises(DimensionError):
            measure(phi, np.zeros(63), 4)

    def test_decode_is_projection(self, phi):
        x = np.random.default_rng(3).random(64)
        y = measure(phi, x, 10)
        z = decode_init(phi, y)
        assert z.shape == (8, 8)
        # measuring the pseudo-image again gives the same measurements
        np.testing.assert_allclose(phi.prefix(10) @ z.reshape(-1), y.values, atol=1e-10)

    def test_decode_measurement_count_checked(self, phi):
        with pytest.raises(DimensionError):
            decode_init(phi, EncodedBlock(5, np.zeros(4)))

    def test_prefix_purity(self, phi):
        x = np.random.default_rng(4).random(64)
        before = decode_init(phi, measure(phi, x, 6))
        phi.rows[6:] = 0.0
        after = decode_init(phi, measure(phi, x, 6))
        np.testing.assert_array_equal(before, after)


class TestQuantizeExport:
    def test_bound(self, phi):
        q, scale = quantize_export(phi)
        assert q.dtype == np.int16
        assert q.min() >= -256 and q.max() <= 255
        assert np.abs(dequantize(q, scale) - phi.rows).max() <= scale / 2 + 1e-15

    def test_peak_maps_to_255(self):
        phi = MeasurementMatrix(np.array([[0.5, -1.0, 0.25, 0.0]]))
        q, scale = quantize_export(phi)
        np.testing.assert_array_equal(q, [[128, -255, 64, 0]])
        assert scale == pytest.approx(1 / 255)

    def test_prefix_export(self, phi):
        q, _ = quantize_export(phi, 5)
        assert q.shape == (5, 64)

    def test_zero_matrix(self):
        with pytest.raises(SingularityError):
            quantize_export(MeasurementMatrix(np.zeros((2, 4))))
