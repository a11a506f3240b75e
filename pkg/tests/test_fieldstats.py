import numpy as np
import pytest

from voxmap.fieldstats import (StreamingMoments, cohort_aggregates, dice,
                               inverse_consistency, invert_field,
                               jacobian_determinant)
from voxmap.registration import DisplacementField
from voxmap.volume import GeometryError, LabelVolume, Volume


def region(shape, slc):
    lab = np.zeros(shape, np.int32)
    lab[slc] = 1
    return LabelVolume(lab)


class TestDice:
    def test_identical_nonempty(self):
        a = region((6, 6, 6), np.s_[1:4, 1:4, 1:4])
        assert dice(a, a) == 1.0

    def test_disjoint(self):
        a = region((6, 6, 6), np.s_[0:2, :, :])
        b = region((6, 6, 6), np.s_[4:6, :, :])
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        # |A| = |B| = 100, |A∩B| = 50 -> 0.5
        a = np.zeros((1, 10, 20), bool)
        b = np.zeros((1, 10, 20), bool)
        a[0, :, :10] = True
        b[0, :, 5:15] = True
        assert dice(a, b) == pytest.approx(2 * 50 / 200)

    def test_both_empty_is_one(self):
        a = region((4, 4, 4), np.s_[0:0])
        assert dice(a, a.copy()) == 1.0

    def test_one_empty_is_zero(self):
        a = region((4, 4, 4), np.s_[1:2, 1:2, 1:2])
        b = region((4, 4, 4), np.s_[0:0])
        assert dice(a, b) == 0.0
        assert dice(b, a) == 0.0

    def test_symmetry(self, rng):
        a = LabelVolume((rng.uniform(size=(5, 5, 5)) > 0.5).astype(np.int32))
        b = LabelVolume((rng.uniform(size=(5, 5, 5)) > 0.5).astype(np.int32))
        assert dice(a, b) == dice(b, a)

    def test_geometry_mismatch(self):
        a = region((4, 4, 4), np.s_[1:2])
        b = LabelVolume(np.zeros((4, 4, 4), np.int32), spacing=(2, 2, 2))
        with pytest.raises(GeometryError):
            dice(a, b)


def sinusoid_field(geometry, amp=(0.15, 0.12, 0.1), freq=(0.4, 0.5, 0.3)):
    """u with closed-form Jacobian:
    u1 = a sin(kx x) cos(ky y), u2 = b sin(ky y) cos(kz z),
    u3 = c sin(kz z) cos(kx x)."""
    (nx, ny, nz), (sx, sy, sz), (ox, oy, oz) = geometry
    a, b, c = amp
    kx, ky, kz = freq
    xs = ox + sx * np.arange(nx)
    ys = oy + sy * np.arange(ny)
    zs = oz + sz * np.arange(nz)
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    f = DisplacementField.zeros(geometry)
    f.u[..., 0] = a * np.sin(kx * X) * np.cos(ky * Y)
    f.u[..., 1] = b * np.sin(ky * Y) * np.cos(kz * Z)
    f.u[..., 2] = c * np.sin(kz * Z) * np.cos(kx * X)

    a11 = a * kx * np.cos(kx * X) * np.cos(ky * Y)
    a12 = -a * ky * np.sin(kx * X) * np.sin(ky * Y)
    a22 = b * ky * np.cos(ky * Y) * np.cos(kz * Z)
    a23 = -b * kz * np.sin(ky * Y) * np.sin(kz * Z)
    a33 = c * kz * np.cos(kz * Z) * np.cos(kx * X)
    a31 = -c * kx * np.sin(kz * Z) * np.sin(kx * X)
    analytic = ((1 + a11) * (1 + a22) * (1 + a33) + a12 * a23 * a31)
    return f, analytic


class TestJacobianDeterminant:
    def test_zero_field_is_one(self):
        f = DisplacementField.zeros(((6, 6, 6), (1, 1, 1), (0, 0, 0)))
        jd = jacobian_determinant(f)
        assert np.allclose(jd.values, 1.0, atol=1e-12)

    def test_affine_scale_exact_interior(self):
        from voxmap.registration import AffineInit, affine_to_field
        f = affine_to_field(AffineInit((1.1, 1.0, 1.0), (0, 0, 0)),
                            ((10, 10, 10), (1, 1, 1), (0, 0, 0)))
        jd = jacobian_determinant(f)
        assert np.allclose(jd.values[1:-1, 1:-1, 1:-1], 1.1, atol=1e-6)

    def test_sinusoid_matches_analytic(self):
        geo = ((24, 24, 24), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        f, analytic = sinusoid_field(geo)
        jd = jacobian_determinant(f)
        err = np.abs(jd.values - analytic)[2:-2, 2:-2, 2:-2]
        assert err.max() < 0.01

    def test_second_order_convergence_under_h_halving(self):
        # same physical extent sampled at h and h/2
        errs = {}
        for h in (1.0, 0.5):
            n = int(round(24 / h))
            geo = ((n, n, n), (h, h, h), (0.0, 0.0, 0.0))
            f, analytic = sinusoid_field(geo)
            jd = jacobian_determinant(f)
            interior = np.s_[2:-2, 2:-2, 2:-2]
            errs[h] = float(np.abs(jd.values - analytic)[interior].max())
        assert errs[0.5] <= errs[1.0] / 3.2  # ~4x for O(h^2)


class TestInverseConsistency:
    def _const_field(self, geometry, t):
        f = DisplacementField.zeros(geometry)
        f.u[:] = t
        return f

    def test_exact_inverse_translations(self):
        geo = ((8, 8, 8), (1, 1, 1), (0, 0, 0))
        fwd = self._const_field(geo, (2.0, -1.0, 0.5))
        bwd = self._const_field(geo, (-2.0, 1.0, -0.5))
        ice = inverse_consistency(fwd, bwd)
        assert ice.mean == pytest.approx(0.0, abs=1e-12)

    def test_equal_translations_double(self):
        geo = ((10, 10, 10), (1, 1, 1), (0, 0, 0))
        t = (1.0, 0.5, 0.0)
        fwd = self._const_field(geo, t)
        bwd = self._const_field(geo, t)
        ice = inverse_consistency(fwd, bwd)
        assert ice.mean == pytest.approx(2 * np.linalg.norm(t), rel=1e-9)

    def test_fixed_point_inverse_oracle(self):
        geo = ((20, 20, 20), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        fwd, _ = sinusoid_field(geo, amp=(0.8, 0.6, 0.7),
                                freq=(0.25, 0.2, 0.3))
        bwd = invert_field(fwd, iterations=50)
        domain = np.zeros((20, 20, 20), bool)
        domain[3:-3, 3:-3, 3:-3] = True
        ice = inverse_consistency(fwd, bwd, domain)
        assert ice.mean <= 0.2  # voxels (spacing 1)

    def test_outside_mapping_excluded_and_counted(self):
        geo = ((6, 6, 6), (1, 1, 1), (0, 0, 0))
        fwd = self._const_field(geo, (0.0, 0.0, 0.0))
        fwd.u[0, 0, 0] = (-50.0, 0.0, 0.0)  # maps far outside
        bwd = self._const_field(geo, (0.0, 0.0, 0.0))
        ice = inverse_consistency(fwd, bwd)
        assert ice.n_excluded == 1
        assert ice.n_evaluated == 6 ** 3 - 1
        assert np.isnan(ice.error.values[0, 0, 0])


class TestStreamingMoments:
    def test_single_volume_sd_zero(self):
        sm = StreamingMoments()
        sm.add(Volume(np.full((3, 3, 3), 2.0, np.float32)))
        assert np.allclose(sm.mean().values, 2.0)
        assert np.allclose(sm.sd().values, 0.0)

    def test_two_identical(self):
        v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        sm = StreamingMoments()
        sm.add(v)
        sm.add(v.copy())
        assert np.allclose(sm.mean().values, v.values)
        assert np.allclose(sm.sd().values, 0.0)

    def test_matches_two_pass_oracle(self, rng):
        vols = [Volume(rng.normal(size=(4, 4, 4)).astype(np.float32))
                for _ in range(3)]
        sm = StreamingMoments()
        for v in vols:
            sm.add(v)
        stack = np.stack([v.values.astype(np.float64) for v in vols])
        assert np.allclose(sm.mean().values, stack.mean(axis=0), atol=1e-10)
        assert np.allclose(sm.sd().values, stack.std(axis=0, ddof=1),
                           atol=1e-10)

    def test_streaming_matches_two_pass_large_offset(self, rng):
        # numerically stable even with a large common offset
        vols = [Volume((rng.normal(size=(3, 3, 3)) + 1e6).astype(np.float64))
                for _ in range(5)]
        sm = StreamingMoments()
        for v in vols:
            sm.add(v)
        stack = np.stack([v.values for v in vols])
        ref_sd = stack.std(axis=0, ddof=1)
        assert np.allclose(sm.sd().values, ref_sd, rtol=1e-6)

    def test_geometry_mismatch(self):
        sm = StreamingMoments()
        sm.add(Volume(np.zeros((3, 3, 3), np.float32)))
        with pytest.raises(GeometryError):
            sm.add(Volume(np.zeros((4, 4, 4), np.float32)))


class TestCohortAggregates:
    def test_aggregates(self, rng):
        hu = [Volume(rng.normal(size=(3, 3, 3)).astype(np.float32))
              for _ in range(4)]
        jd = [Volume(rng.normal(1.0, 0.05, size=(3, 3, 3)).astype(np.float32))
              for _ in range(4)]
        agg = cohort_aggregates(iter(hu), iter(jd))
        stack = np.stack([v.values.astype(np.float64) for v in hu])
        assert np.allclose(agg.hu_mean.values, stack.mean(axis=0), atol=1e-6)
        assert agg.ice_mean is None
