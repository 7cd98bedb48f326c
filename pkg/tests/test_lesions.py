import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from petbench import lesions as Ls
from petbench.phantom import PhantomSpec, Sphere, make_phantom
from petbench.volumes import PETVolume, UnitsTag

masks = hnp.arrays(bool, (6, 6, 6), elements=st.booleans())


def as_sets(comps):
    return sorted((frozenset(map(tuple, c.tolist())) for c in comps), key=lambda s: min(s))


def record(length, mean):
    return Ls.LesionRecord(np.zeros((1, 3), int), 1.0, length, mean, mean, mean)


class TestSegment:
    def test_below_threshold_empty(self):
        assert not Ls.segment(PETVolume(np.full((3, 8, 8), 2.0), units_tag="SUV")).any()

    def test_noiseless_phantom_exact(self):
        spec = PhantomSpec((20, 24, 24), (2, 2, 2), 1.0, (Sphere((16, 24, 20), 12, 4.0),
                                                            Sphere((32, 20, 20), 10, 4.0)))
        vol, truth = make_phantom(spec)
        np.testing.assert_array_equal(Ls.segment(vol, threshold=2.5), truth)

    def test_resampled_threshold(self):
        spec = PhantomSpec((10, 32, 32), (2, 2, 2), 1.0, (Sphere((32, 32, 10), 16, 4.0),))
        vol, truth = make_phantom(spec)
        mask = Ls.segment(vol, resample_to=(64, 64))
        dice = 2 * (mask & truth).sum() / (mask.sum() + truth.sum())
        assert dice > 0.9

    def test_external(self, rng):
        m = rng.random((2, 4, 4)) > 0.5
        vol = PETVolume(np.zeros((2, 4, 4)))
        np.testing.assert_array_equal(Ls.segment(vol, strategy="EXTERNAL", external_mask=m), m)

    def test_external_missing(self):
        with pytest.raises(ValueError):
            Ls.segment(PETVolume(np.zeros((2, 4, 4))), strategy="EXTERNAL")

    def test_external_wrong_shape(self):
        with pytest.raises(Ls.GeometryError):
            Ls.segment(PETVolume(np.zeros((2, 4, 4))), strategy="EXTERNAL", external_mask=np.ones((2, 4, 5)))


class TestComponents:
    def test_two_isolated(self):
        m = np.zeros((3, 3, 3), bool)
        m[0, 0, 0] = m[2, 2, 2] = True
        assert len(Ls.connected_components(m)) == 2

    def test_corner_diagonal_joins(self):
        m = np.zeros((2, 2, 2), bool)
        m[0, 0, 0] = m[1, 1, 1] = True
        assert len(Ls.connected_components(m)) == 1

    def test_face_diagonal_joins(self):
        m = np.zeros((1, 2, 2), bool)
        m[0, 0, 0] = m[0, 1, 1] = True
        assert len(Ls.connected_components(m)) == 1

    def test_empty(self):
        assert Ls.connected_components(np.zeros((2, 2, 2), bool)) == []

    def test_flood_fill_oracle(self, rng):
        for _ in range(100):
            m = rng.random((6, 6, 6)) < rng.uniform(0.05, 0.4)
            assert as_sets(Ls.connected_components(m)) == as_sets(
                [np.array(sorted(c)) for c in oracles.flood_fill_components(m)])

    @given(masks)
    def test_partition(self, m):
        comps = Ls.connected_components(m)
        seen = np.zeros_like(m, dtype=int)
        for c in comps:
            seen[c[:, 0], c[:, 1], c[:, 2]] += 1
        np.testing.assert_array_equal(seen, m.astype(int))

    def test_rejects_2d(self):
        with pytest.raises(Ls.GeometryError):
            Ls.connected_components(np.zeros((4, 4), bool))


class TestMaxLength:
    def test_single_voxel(self):
        assert Ls.max_length([[0, 0, 0]], (2, 2, 2)) == pytest.approx(2 * math.sqrt(3))

    def test_line(self):
        assert Ls.max_length([[0, 0, 0], [0, 0, 5]], (1, 1, 1)) == pytest.approx(5 + math.sqrt(3))

    def test_pairwise_oracle(self, rng):
        for _ in range(100):
            vox = rng.integers(0, 12, (20, 3))
            sp = tuple(rng.uniform(0.5, 4, 3))
            assert Ls.max_length(vox, sp) == pytest.approx(oracles.max_length(vox, sp), abs=1e-9)

    def test_solid_ball_uses_surface(self):
        # large component exercises the surface shortcut
        z, y, x = np.mgrid[:9, :9, :9]
        vox = np.argwhere((z - 4) ** 2 + (y - 4) ** 2 + (x - 4) ** 2 <= 16)
        assert Ls.max_length(vox, (2, 1, 1.5)) == pytest.approx(oracles.max_length(vox, (2, 1, 1.5)), abs=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            Ls.max_length(np.zeros((0, 3), int), (1, 1, 1))


class TestFilter:
    def test_both_small_excluded(self):
        assert Ls.lesion_filter([record(6, 0.4)]) == []

    @pytest.mark.parametrize("length,mean", [(6, 3.0), (20, 0.4)])
    def test_either_large_retained(self, length, mean):
        assert len(Ls.lesion_filter([record(length, mean)])) == 1

    def test_or_rule(self):
        kept = Ls.lesion_filter([record(6, 3.0), record(20, 0.4), record(20, 3.0)], rule="or")
        assert [r.max_length for r in kept] == [20]

    def test_bad_rule(self):
        with pytest.raises(ValueError):
            Ls.lesion_filter([], rule="xor")

    @given(st.floats(0, 50), st.floats(0, 5), st.floats(0, 5))
    def test_uptake_monotone(self, length, mean, extra):
        if Ls.lesion_filter([record(length, mean)]):
            assert Ls.lesion_filter([record(length, mean + extra)])


class TestSuv:
    def test_single_voxel_max(self):
        data = np.zeros((3, 3, 3))
        data[1, 1, 1] = 5.0
        assert Ls.suv_max([[1, 1, 1]], PETVolume(data, (1, 1, 1))) == 5.0

    def test_uniform_peak(self):
        data = np.full((12, 12, 12), 3.0)
        assert Ls.suv_peak([[6, 6, 6]], PETVolume(data, (2, 2, 2))) == pytest.approx(3.0, abs=1e-14)

    def test_peak_radius(self):
        assert 4 / 3 * math.pi * Ls.PEAK_RADIUS_MM ** 3 == pytest.approx(1000.0)

    def test_hotspot_oracle(self, rng):
        data = rng.uniform(0, 2, (7, 9, 10))
        data[3, 4, 5] = 20.0
        vox = np.array([[3, 4, 5], [3, 4, 6], [0, 0, 0]])
        spacing = (3.0, 2.0, 2.5)  # dz, dy, dx
        vol = PETVolume(data, (spacing[2], spacing[1], spacing[0]))
        expected = oracles.suv_peak(vol.data, vox, spacing, Ls.PEAK_RADIUS_MM)
        assert Ls.suv_peak(vox, vol) == pytest.approx(expected, abs=1e-12)

    def test_peak_oracle_random(self, rng):
        for _ in range(10):
            data = rng.uniform(0, 5, (6, 7, 8))
            vox = np.argwhere(rng.random(data.shape) < 0.05)
            if len(vox) == 0:
                continue
            vol = PETVolume(data, (2, 2, 2))
            assert Ls.suv_peak(vox, vol) == pytest.approx(
                oracles.suv_peak(vol.data, vox, (2, 2, 2), Ls.PEAK_RADIUS_MM), abs=1e-12)

    @given(st.integers(0, 10_000))
    def test_measure_invariants(self, seed):
        g = np.random.default_rng(seed)
        data = g.uniform(0, 4, (5, 6, 6))
        vox = np.unique(g.integers(0, 5, (6, 3)), axis=0)
        rec = Ls.measure(vox, PETVolume(data, (2, 2, 2)))
        assert rec.suv_max >= rec.suv_mean
        assert rec.max_length > 0
        assert data.min() <= rec.suv_peak <= data.max()


def _study(rng, shape=(16, 20, 20)):
    spec = PhantomSpec(shape, (2, 2, 2), 1.0,
                       (Sphere((14, 14, 10), 12, 5.0), Sphere((28, 28, 22), 10, 4.0)))
    vol, _ = make_phantom(spec)
    return PETVolume(vol.data + rng.uniform(0, 0.3, vol.shape).astype(np.float32), vol.spacing, units_tag="SUV")


class TestMatching:
    def test_identity(self, rng):
        vol = _study(rng)
        lesions = Ls.find_lesions(Ls.segment(vol), vol)
        pairs = Ls.match_lesions(lesions, vol, vol)
        np.testing.assert_array_equal(pairs["suv_max"][:, 0], pairs["suv_max"][:, 1])

    def test_offset(self, rng):
        vol = _study(rng)
        shifted = PETVolume(vol.data.astype(np.float64) + 0.1, vol.spacing, units_tag="SUV")
        lesions = Ls.find_lesions(Ls.segment(vol), vol)
        d = np.diff(Ls.match_lesions(lesions, shifted, vol)["suv_max"], axis=1)
        np.testing.assert_allclose(d, 0.1, atol=1e-6)

    def test_count(self, rng):
        vol = _study(rng)
        lesions = Ls.lesion_filter(Ls.find_lesions(Ls.segment(vol), vol))
        noisy = PETVolume(vol.data * rng.uniform(0.8, 1.2, vol.shape), vol.spacing)
        assert len(Ls.match_lesions(lesions, noisy)["suv_peak"]) == len(lesions) == 2

    def test_geometry_mismatch(self, rng):
        vol = _study(rng)
        lesions = Ls.find_lesions(Ls.segment(vol), vol)
        with pytest.raises(Ls.GeometryError):
            Ls.match_lesions(lesions, PETVolume(np.zeros((4, 20, 20))), vol)


class TestStatistics:
    def test_symmetric_diffs(self):
        assert Ls.bland_altman([(0, -1), (0, 0), (0, 1)]) == (0.0, 1.0)

    def test_constant_diff(self):
        med, iqr = Ls.bland_altman([(1, 1.5), (2, 2.5), (7, 7.5)])
        assert med == pytest.approx(0.5) and iqr == pytest.approx(0.0, abs=1e-12)

    def test_sort_oracle(self, rng):
        for _ in range(20):
            p = rng.normal(size=(50, 2))
            med, iqr = Ls.bland_altman(p)
            omed, oiqr = oracles.bland_altman(p)
            assert med == pytest.approx(omed, abs=1e-12) and iqr == pytest.approx(oiqr, abs=1e-12)

    def test_too_few(self):
        with pytest.raises(Ls.StatisticsError):
            Ls.bland_altman([(1, 2)])

    def test_perfect_line(self):
        x = np.arange(6.0)
        assert Ls.r_squared(np.c_[x, 3 * x - 2]) == pytest.approx(1.0, abs=1e-15)

    def test_constant_originals(self):
        with pytest.raises(Ls.StatisticsError):
            Ls.r_squared([(1, 2), (1, 3), (1, 4)])

    def test_ols_oracle(self, rng):
        for _ in range(50):
            p = rng.normal(size=(12, 2))
            r2, slope, icpt = oracles.ols_r2(p)
            assert Ls.r_squared(p) == pytest.approx(r2, abs=1e-10)
            assert Ls.ols_fit(p[:, 0], p[:, 1]) == pytest.approx((slope, icpt), abs=1e-10)

    def test_identity_method(self):
        p = np.array([(1.0, 1.0), (2.0, 2.0), (3.0, 3.5)])
        ss_res = 0.25
        ss_tot = float(((p[:, 1] - p[:, 1].mean()) ** 2).sum())
        assert Ls.r_squared(p, "identity") == pytest.approx(1 - ss_res / ss_tot)

    @pytest.mark.parametrize("bias,iqr,expected", [
        (-0.2178, 0.5031, (-1.123, 0.687)),
        (0.0152, 0.1262, (-0.212, 0.242)),
        (-0.0002, 0.0592, (-0.1067, 0.1064)),
    ])
    def test_published_intervals(self, bias, iqr, expected):
        # printed bounds are truncated in places (0.68778 shows as 0.687)
        assert Ls.confidence_interval(bias, iqr) == pytest.approx(expected, abs=1e-3)

    def test_zero_iqr(self):
        assert Ls.confidence_interval(0.3, 0.0) == (0.3, 0.3)

    @given(st.floats(-5, 5), st.floats(0, 5))
    def test_affine(self, bias, iqr):
        lo, hi = Ls.confidence_interval(bias, iqr)
        assert (lo + hi) / 2 == pytest.approx(bias, abs=1e-12)
        assert hi - lo == pytest.approx(3.6 * iqr, abs=1e-12)

    def test_stats_round_trip(self, rng):
        s = Ls.agreement(rng.normal(size=(10, 2)))
        back = Ls.AgreementStats.from_dict(s.to_dict())
        assert back.median_bias == s.median_bias and back.r2 == pytest.approx(s.r2)


class TestPipeline:
    def test_identity_pipeline(self, rng):
        cases = [(f"s{k}", v, v, None) for k, v in enumerate([_study(rng), _study(rng)])]
        out = Ls.suv_pipeline(cases)
        for key in ("suv_max", "suv_peak"):
            s = out[key]
            assert s.n_lesions == 4
            assert s.median_bias == 0.0 and s.iqr == 0.0 and s.r2 == 1.0
        assert len(out["lesions"]) == 4

    def test_external_masks(self, rng):
        vol = _study(rng)
        mask = Ls.segment(vol)
        out = Ls.suv_pipeline([("a", vol, vol, mask)])
        assert out["suv_max"].n_lesions == 2

    def test_too_few_lesions(self):
        vol = PETVolume(np.ones((4, 8, 8)), units_tag=UnitsTag.SUV)
        out = Ls.suv_pipeline([("a", vol, vol, None)])
        assert out["suv_max"] is None and out["suv_max_pairs"].shape == (0, 2)
