import numpy as np
import pytest

from voxmap.fieldstats import dice, jacobian_determinant
from voxmap.registration import (AffineInit, DisplacementField,
                                 EnergyBreakdown, EnergyTrace, StageConfig,
                                 affine_to_field, bbox_affine_init,
                                 build_pyramid, channel_energy,
                                 default_stage_configs, graphcut_sweep,
                                 register_deformable, warp, warp_labels)
from voxmap.volume import BoundingBox, GeometryError, LabelVolume, Volume

from conftest import bumpy, make_analytic_volume


def zero_channels(n, origin=(0, 0, 0), spacing=(1, 1, 1)):
    z = Volume(np.zeros((n, n, n), np.float32), spacing, origin,
               fill_value=0.0)
    return z


def intensity_only(vol, n_masks=4):
    zeros = Volume(np.zeros(vol.values.shape, np.float32), vol.spacing,
                   vol.origin, fill_value=0.0)
    return (vol,) + (zeros,) * n_masks


def shifted_pair(n=14, pad=6, shift=(1.0, 0.0, 0.0)):
    """Reference volume and a floating volume that equals the reference
    analytically displaced by `shift`, on an extended floating grid so
    sampling never leaves the domain."""
    ref = make_analytic_volume(bumpy, (n, n, n))
    m = n + 2 * pad
    flt = make_analytic_volume(
        lambda x, y, z: bumpy(x - shift[0], y - shift[1], z - shift[2]),
        (m, m, m), origin=(-pad, -pad, -pad))
    return ref, flt


class TestAffineInit:
    def test_identical_boxes_identity(self):
        bb = BoundingBox((0, 0, 0), (10, 20, 30))
        a = bbox_affine_init(bb, bb)
        assert np.allclose(a.scale, 1.0)
        assert np.allclose(a.translation, 0.0)

    def test_pure_scale(self):
        ref = BoundingBox((-50, -40, -30), (50, 40, 30))
        flt = BoundingBox((-55, -40, -30), (55, 40, 30))
        a = bbox_affine_init(ref, flt)
        assert np.allclose(a.scale, (1.1, 1.0, 1.0))
        assert np.allclose(a.translation, 0.0)

    def test_corners_map_exactly(self, rng):
        for _ in range(20):
            lo1 = rng.uniform(-50, 0, 3)
            hi1 = lo1 + rng.uniform(5, 60, 3)
            lo2 = rng.uniform(-50, 0, 3)
            hi2 = lo2 + rng.uniform(5, 60, 3)
            ref, flt = BoundingBox(tuple(lo1), tuple(hi1)), \
                BoundingBox(tuple(lo2), tuple(hi2))
            a = bbox_affine_init(ref, flt)
            for corner in range(8):
                sel = [(corner >> d) & 1 for d in range(3)]
                p = np.where(sel, ref.max, ref.min)
                q = np.where(sel, flt.max, flt.min)
                assert np.allclose(a.apply(p), q, atol=1e-9)

    def test_degenerate_box_rejected(self):
        ref = BoundingBox((0, 0, 0), (0, 10, 10))
        flt = BoundingBox((0, 0, 0), (10, 10, 10))
        with pytest.raises(ValueError, match="degenerate"):
            bbox_affine_init(ref, flt)

    def test_scale_positive_required(self):
        with pytest.raises(ValueError):
            AffineInit((1.0, -0.5, 1.0), (0, 0, 0))


class TestAffineToField:
    def test_identity_zero_field(self):
        geo = ((4, 5, 6), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        f = affine_to_field(AffineInit.identity(), geo)
        assert not f.u.any()

    def test_pure_translation_constant_field(self):
        geo = ((4, 4, 4), (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))
        f = affine_to_field(AffineInit((1, 1, 1), (3.0, -2.0, 0.5)), geo)
        assert np.allclose(f.u[..., 0], 3.0)
        assert np.allclose(f.u[..., 1], -2.0)
        assert np.allclose(f.u[..., 2], 0.5)

    def test_jacobian_is_scale_product(self):
        geo = ((8, 8, 8), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        a = AffineInit((1.1, 0.9, 1.05), (4.0, 0.0, -1.0))
        f = affine_to_field(a, geo)
        jd = jacobian_determinant(f)
        interior = jd.values[1:-1, 1:-1, 1:-1]
        assert np.allclose(interior, 1.1 * 0.9 * 1.05, atol=1e-6)


class TestStageConfig:
    def test_defaults_match_published_tables(self):
        s1, s2 = default_stage_configs()
        assert (s1.levels, s1.block_size) == (6, 8)
        assert s1.regularization_weight == 2.0
        assert s1.image_weight == 0.25
        assert s1.mask_weights == (1.0, 1.0, 0.3, 0.3)
        assert s1.max_iterations == (300, 300, 300, 40, 20, 0)
        assert (s2.levels, s2.block_size) == (6, 32)
        assert s2.regularization_weight == 0.15
        assert s2.image_weight == 0.5
        assert s2.mask_weights == (1.0, 1.0, 0.1, 0.1)
        assert s2.max_iterations == (300, 300, 300, 40, 20, 0)

    def test_stage_order_contract(self):
        # the high-regularization small-block stage runs first
        s1, s2 = default_stage_configs()
        assert s1.regularization_weight > s2.regularization_weight
        assert s1.block_size < s2.block_size

    def test_iteration_list_length_enforced(self):
        with pytest.raises(ValueError):
            StageConfig(levels=3, max_iterations=(1, 2))

    def test_from_dict(self):
        s = StageConfig.from_dict({"block_size": 16,
                                   "max_iterations": [1, 1, 1, 1, 1, 1]})
        assert s.block_size == 16


class TestChannelEnergy:
    def test_identical_zero_field_all_zero(self):
        ref = make_analytic_volume(bumpy, (10, 10, 10))
        chans = intensity_only(ref)
        cfg = StageConfig(levels=1, regularization_weight=1.0,
                          image_weight=0.5, mask_weights=(1, 1, 0.3, 0.3),
                          max_iterations=(1,))
        field = DisplacementField.zeros(ref.geometry)
        e = channel_energy(chans, chans, field, cfg)
        # float32 volumes + fused multiply-adds leave ~1e-9/voxel residue
        assert e.total == pytest.approx(0.0, abs=1e-6)
        assert all(abs(x) < 1e-6 for x in e.data_per_channel)
        assert e.regularization == 0.0

    def test_constant_field_zero_regularization(self):
        ref = make_analytic_volume(bumpy, (8, 8, 8))
        chans = intensity_only(ref)
        cfg = StageConfig(levels=1, regularization_weight=2.0,
                          image_weight=1.0, mask_weights=(0, 0, 0, 0),
                          max_iterations=(1,))
        field = DisplacementField.zeros(ref.geometry)
        field.u[..., 0] = 1.0
        e = channel_energy(chans, chans, field, cfg)
        assert e.regularization == 0.0
        assert e.data_per_channel[0] > 0  # data changed by the shift

    def test_single_voxel_delta_regularization(self):
        # one displaced voxel against zero neighbors: reg = lam * sum over
        # its 6 edges of |delta|^2 / spacing^2
        spacing = (1.0, 2.0, 4.0)
        ref = make_analytic_volume(bumpy, (6, 6, 6), spacing=spacing)
        chans = intensity_only(ref)
        lam = 1.7
        cfg = StageConfig(levels=1, regularization_weight=lam,
                          image_weight=0.0, mask_weights=(0, 0, 0, 0),
                          max_iterations=(1,))
        field = DisplacementField.zeros(ref.geometry)
        delta = np.array([0.7, -0.3, 0.2])
        field.u[3, 3, 3] = delta
        e = channel_energy(chans, chans, field, cfg)
        d2 = float(delta @ delta)
        expected = lam * d2 * (2 / spacing[0] ** 2 + 2 / spacing[1] ** 2
                               + 2 / spacing[2] ** 2)
        assert e.regularization == pytest.approx(expected, rel=1e-12)
        assert e.total == pytest.approx(expected, rel=1e-9)

    def test_total_is_sum_of_parts(self):
        ref, flt = shifted_pair(10)
        cfg = StageConfig(levels=1, regularization_weight=0.5,
                          image_weight=0.25, mask_weights=(1, 1, 0.3, 0.3),
                          max_iterations=(1,))
        field = DisplacementField.zeros(ref.geometry)
        field.u[2, 2, 2, 0] = 0.5
        e = channel_energy(intensity_only(ref), intensity_only(flt), field,
                           cfg)
        assert e.total == pytest.approx(
            sum(e.data_per_channel) + e.regularization, rel=1e-9)

    def test_geometry_mismatch(self):
        ref = make_analytic_volume(bumpy, (8, 8, 8))
        cfg = StageConfig(levels=1, max_iterations=(1,))
        field = DisplacementField.zeros(((4, 4, 4), (1, 1, 1), (0, 0, 0)))
        with pytest.raises(GeometryError):
            channel_energy(intensity_only(ref), intensity_only(ref), field,
                           cfg)


class TestSubmodularity:
    def test_random_edges(self, rng):
        # quadratic pairwise: cost(k,k) + cost(m,m) <= cost(k,m) + cost(m,k)
        for _ in range(200):
            up = rng.normal(size=3)
            uq = rng.normal(size=3)
            delta = np.zeros(3)
            delta[rng.integers(3)] = rng.choice([-1.0, 1.0]) * rng.uniform(
                0.5, 4.0)
            a = np.sum((up - uq) ** 2)                      # keep, keep
            d = np.sum((up + delta - uq - delta) ** 2)      # move, move
            b = np.sum((up - uq - delta) ** 2)              # keep, move
            c = np.sum((up + delta - uq) ** 2)              # move, keep
            assert a + d <= b + c + 1e-12


class TestGraphcutSweep:
    def test_identical_no_move(self):
        ref = make_analytic_volume(bumpy, (12, 12, 12))
        chans = intensity_only(ref)
        cfg = StageConfig(levels=1, block_size=8, regularization_weight=1.0,
                          image_weight=1.0, mask_weights=(1, 1, 1, 1),
                          max_iterations=(1,))
        field = DisplacementField.zeros(ref.geometry)
        field, decreased = graphcut_sweep(field, chans, chans, cfg)
        assert not decreased
        assert not field.u.any()

    def test_recovers_one_voxel_translation(self):
        ref, flt = shifted_pair(14, shift=(1.0, 0.0, 0.0))
        cfg = StageConfig(levels=1, block_size=8, regularization_weight=0.0,
                          image_weight=1.0, mask_weights=(0, 0, 0, 0),
                          max_iterations=(1,))
        field = DisplacementField.zeros(ref.geometry)
        trace = EnergyTrace()
        field, decreased = graphcut_sweep(
            field, intensity_only(ref), intensity_only(flt), cfg, trace)
        assert decreased
        assert np.allclose(field.u[..., 0], 1.0)
        assert np.allclose(field.u[..., 1:], 0.0)
        e = channel_energy(intensity_only(ref), intensity_only(flt), field,
                           cfg)
        assert e.data_per_channel[0] == pytest.approx(0.0, abs=1e-4)

    def test_energy_never_increases_random_fields(self, rng):
        ref, flt = shifted_pair(12, shift=(0.6, -0.4, 0.8))
        cfg = StageConfig(levels=1, block_size=4, regularization_weight=0.4,
                          image_weight=0.5, mask_weights=(0, 0, 0, 0),
                          max_iterations=(1,))
        for trial in range(3):
            field = DisplacementField.zeros(ref.geometry)
            field.u[:] = rng.normal(0.0, 0.7, size=field.u.shape)
            trace = EnergyTrace()
            e0 = channel_energy(intensity_only(ref), intensity_only(flt),
                                field, cfg).total
            for _ in range(3):
                graphcut_sweep(field, intensity_only(ref),
                               intensity_only(flt), cfg, trace)
            e1 = channel_energy(intensity_only(ref), intensity_only(flt),
                                field, cfg).total
            assert e1 <= e0 + 1e-6 * abs(e0)
            assert trace.max_delta() <= 0.0
            assert trace.max_checkpoint_error() < 1e-6


class TestRegisterDeformable:
    def test_self_registration_fixed_point(self):
        ref = make_analytic_volume(bumpy, (24, 24, 24))
        mask = Volume((ref.values > 0.2).astype(np.float32), fill_value=0.0)
        chans = (ref, mask, mask, mask, mask)
        stages = [
            StageConfig(levels=3, block_size=8, regularization_weight=2.0,
                        image_weight=0.25, mask_weights=(1, 1, 0.3, 0.3),
                        max_iterations=(30, 10, 5)),
            StageConfig(levels=3, block_size=16, regularization_weight=0.15,
                        image_weight=0.5, mask_weights=(1, 1, 0.1, 0.1),
                        max_iterations=(30, 10, 5)),
        ]
        field = register_deformable(chans, chans, AffineInit.identity(),
                                    stages)
        assert float(np.abs(field.u).max()) == 0.0

    def test_deterministic(self):
        ref, flt = shifted_pair(12, shift=(0.8, 0.5, -0.3))
        stages = [
            StageConfig(levels=2, block_size=4, regularization_weight=1.0,
                        image_weight=0.5, mask_weights=(0, 0, 0, 0),
                        max_iterations=(10, 5)),
            StageConfig(levels=2, block_size=8, regularization_weight=0.2,
                        image_weight=0.5, mask_weights=(0, 0, 0, 0),
                        max_iterations=(10, 5)),
        ]
        f1 = register_deformable(intensity_only(ref), intensity_only(flt),
                                 AffineInit.identity(), stages)
        f2 = register_deformable(intensity_only(ref), intensity_only(flt),
                                 AffineInit.identity(), stages)
        assert np.array_equal(f1.u, f2.u)

    def test_zero_mask_weights_identical_zero_is_minimum(self):
        ref = make_analytic_volume(bumpy, (10, 10, 10))
        cfg = StageConfig(levels=1, block_size=8, regularization_weight=1.0,
                          image_weight=1.0, mask_weights=(0, 0, 0, 0),
                          max_iterations=(3,))
        field = DisplacementField.zeros(ref.geometry)
        field, dec = graphcut_sweep(field, intensity_only(ref),
                                    intensity_only(ref), cfg)
        assert not field.u.any()
        e = channel_energy(intensity_only(ref), intensity_only(ref), field,
                           cfg)
        assert e.total == pytest.approx(0.0, abs=1e-6)

    def test_requires_two_stages(self):
        ref = make_analytic_volume(bumpy, (8, 8, 8))
        with pytest.raises(ValueError, match="2 stage"):
            register_deformable(intensity_only(ref), intensity_only(ref),
                                AffineInit.identity(),
                                [StageConfig(levels=1, max_iterations=(1,))])


class TestFieldResample:
    def test_constant_field_preserved_exactly(self):
        src = DisplacementField.zeros(((6, 6, 6), (2, 2, 2), (0, 0, 0)))
        src.u[:] = (1.25, -3.5, 0.75)
        dst = src.resample_to(((12, 12, 12), (1, 1, 1), (0, 0, 0)))
        assert np.all(dst.u[..., 0] == 1.25)
        assert np.all(dst.u[..., 1] == -3.5)
        assert np.all(dst.u[..., 2] == 0.75)

    def test_linear_field_interpolated(self):
        src = DisplacementField.zeros(((8, 8, 8), (2, 2, 2), (0, 0, 0)))
        xs = 2.0 * np.arange(8)
        src.u[..., 0] = 0.25 * xs[None, None, :]
        dst = src.resample_to(((15, 15, 15), (1, 1, 1), (0, 0, 0)))
        expected = 0.25 * np.arange(15)
        assert np.allclose(dst.u[0, 0, :, 0], expected, atol=1e-12)


class TestWarp:
    def test_zero_field_identity_resample(self):
        v = make_analytic_volume(bumpy, (10, 10, 10))
        field = DisplacementField.zeros(v.geometry)
        out = warp(v, field)
        assert np.allclose(out.values, v.values, atol=1e-6)

    def test_constant_field_on_constant_volume(self):
        v = Volume(np.full((8, 8, 8), 5.5, np.float32))
        field = DisplacementField.zeros(v.geometry)
        field.u[..., 1] = 2.0
        out = warp(v, field)
        interior = out.values[:, :5, :]
        assert np.allclose(interior, 5.5)

    def test_warp_matches_direct_affine_resampling(self):
        # two code paths, same math, 1e-5
        from voxmap.volume import trilinear_sample
        v = make_analytic_volume(bumpy, (12, 12, 12))
        a = AffineInit((1.05, 0.95, 1.0), (0.4, -0.3, 0.2))
        field = affine_to_field(a, v.geometry)
        warped = warp(v, field)
        for (i, j, k) in [(2, 3, 4), (6, 6, 6), (9, 2, 7)]:
            p = a.apply(np.array([float(i), float(j), float(k)]))
            direct = trilinear_sample(v, p)
            assert warped.values[k, j, i] == pytest.approx(direct, abs=1e-5)

    def test_warp_labels_nearest(self):
        lab = np.zeros((8, 8, 8), np.int32)
        lab[2:5, 2:5, 2:5] = 3
        lv = LabelVolume(lab)
        field = DisplacementField.zeros(lv.geometry)
        field.u[..., 0] = 1.0  # shift sampling by +1 voxel in x
        out = warp_labels(lv, field)
        assert out.labels[3, 3, 1] == 3   # x+1 -> looks up lab[3,3,2]
        assert out.labels[3, 3, 4] == 0

    def test_build_pyramid_floors_level_size(self):
        ref = make_analytic_volume(bumpy, (48, 48, 48))
        pyr = build_pyramid(intensity_only(ref), 6)
        assert [p[0].dims[0] for p in pyr] == [48, 24, 12, 6, 3]
