"""Data model, phantom synthesis, channel utilities, and container I/O."""

import numpy as np
import pytest

from udad.errors import (
    ConfigError,
    DvolHeaderError,
    DvolMagicError,
    DvolSizeMismatchError,
    DvolTruncatedError,
    GradientSchemeError,
    ShapeError,
)
from udad.volume import (
    DwiStack,
    FaMap,
    GradientScheme,
    PhantomSpec,
    average_dwis,
    concat_channels,
    half_sphere_directions,
    load_dvol,
    load_fa_map,
    make_phantom,
    phantom_field,
    save_dvol,
    save_fa_map,
    subsample,
)

# Analytic DWI level of the isotropic interior: 1000 * exp(-1000 * 7e-4).
ISO_DWI_VALUE = 496.5853037914095


def small_scheme(n_dwi=6, seed=0):
    dirs = half_sphere_directions(n_dwi, seed)
    bvals = np.concatenate([[0.0], np.full(n_dwi, 1000.0)])
    bvecs = np.concatenate([np.zeros((1, 3)), dirs])
    return GradientScheme(bvals, bvecs)


class TestGradientScheme:
    def test_valid_scheme_roundtrips_fields(self):
        s = small_scheme(8)
        assert len(s) == 9
        assert list(s.b0_indices) == [0]
        assert list(s.dwi_indices) == list(range(1, 9))

    def test_rejects_non_unit_direction(self):
        bvecs = np.zeros((2, 3))
        bvecs[1] = (2.0, 0.0, 0.0)
        with pytest.raises(GradientSchemeError):
            GradientScheme([0.0, 1000.0], bvecs)

    def test_zero_b_rows_may_have_zero_vector(self):
        s = GradientScheme([0.0, 1000.0], [[0, 0, 0], [1, 0, 0]])
        assert len(s) == 2

    def test_rejects_missing_b0(self):
        with pytest.raises(GradientSchemeError):
            GradientScheme([1000.0], [[1.0, 0.0, 0.0]])

    def test_rejects_negative_bvalue(self):
        with pytest.raises(GradientSchemeError):
            GradientScheme([0.0, -5.0], [[0, 0, 0], [1, 0, 0]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(GradientSchemeError):
            GradientScheme([0.0, 1000.0], [[0, 0, 0]])


class TestDwiStack:
    def test_channel_count_must_match_scheme(self):
        s = small_scheme(6)
        with pytest.raises(ShapeError):
            DwiStack(np.zeros((3, 8, 8, 8), np.float32), s)

    def test_rejects_negative_signal(self):
        s = GradientScheme([0.0], [[0, 0, 0]])
        data = -np.ones((1, 8, 8, 8), np.float32)
        with pytest.raises(ShapeError):
            DwiStack(data, s)

    def test_s0_is_mean_of_b0_channels(self):
        s = GradientScheme([0.0, 0.0], [[0, 0, 0], [0, 0, 0]])
        data = np.stack([np.full((4, 4, 4), 2.0), np.full((4, 4, 4), 4.0)])
        stack = DwiStack(data.astype(np.float32), s)
        assert np.allclose(stack.s0, 3.0)


class TestFaMap:
    def test_out_of_mask_values_must_be_zero(self):
        data = np.full((4, 4, 4), 0.5, np.float32)
        mask = np.zeros((4, 4, 4), bool)
        mask[1:3] = True
        with pytest.raises(ShapeError):
            FaMap(data, mask)

    def test_in_mask_range_enforced(self):
        data = np.zeros((4, 4, 4), np.float32)
        mask = np.ones((4, 4, 4), bool)
        data[0, 0, 0] = 1.5
        with pytest.raises(ShapeError):
            FaMap(data, mask)


class TestDirections:
    def test_unit_norm_and_half_sphere(self):
        d = half_sphere_directions(90, seed=3)
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        assert np.all(d[:, 2] > 0)

    def test_seed_determinism(self):
        a = half_sphere_directions(30, seed=5)
        b = half_sphere_directions(30, seed=5)
        c = half_sphere_directions(30, seed=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_near_uniform_spread(self):
        # No two of 90 half-sphere points should be nearly collinear.
        d = half_sphere_directions(90, seed=0)
        g = np.abs(d @ d.T)
        np.fill_diagonal(g, 0.0)
        assert g.max() < 0.999


class TestMakePhantom:
    def test_rejects_small_dims_and_few_directions(self):
        with pytest.raises(ConfigError):
            PhantomSpec(dims=(4, 16, 16))
        with pytest.raises(ConfigError):
            PhantomSpec(dims=(16, 16, 16), n_directions=5)

    def test_b0_channel_is_s0_in_mask(self):
        spec = PhantomSpec(dims=(12, 12, 12), n_directions=12, seed=1)
        stack = make_phantom(spec)
        _, mask = phantom_field(spec)
        assert np.all(stack.data[0][mask] == 1000.0)
        assert np.all(stack.data[0][~mask] == 0.0)

    def test_isotropic_interior_matches_analytic_value(self):
        spec = PhantomSpec(dims=(16, 16, 16), n_directions=10, seed=2)
        stack = make_phantom(spec)
        tensor6, _ = phantom_field(spec)
        iso = (
            (tensor6[0] == 0.7e-3)
            & (tensor6[3] == 0.7e-3)
            & (tensor6[5] == 0.7e-3)
        )
        assert iso.sum() > 50
        for ch in range(1, stack.n_channels):
            vals = stack.data[ch][iso]
            np.testing.assert_allclose(vals, ISO_DWI_VALUE, rtol=1e-6)

    def test_same_seed_bit_identical(self):
        spec = PhantomSpec(dims=(10, 10, 10), n_directions=8, seed=9, noise_sigma=0.05)
        a = make_phantom(spec)
        b = make_phantom(spec)
        assert np.array_equal(a.data, b.data)

    def test_noise_keeps_background_zero_and_signal_nonnegative(self):
        spec = PhantomSpec(dims=(12, 12, 12), n_directions=8, seed=4, noise_sigma=0.2)
        stack = make_phantom(spec)
        _, mask = phantom_field(spec)
        assert np.all(stack.data[:, ~mask] == 0)
        assert np.all(stack.data >= 0)

    def test_contains_both_bundle_orientations(self):
        tensor6, _ = phantom_field(PhantomSpec(dims=(16, 16, 16), seed=0))
        along_x = (tensor6[0] == 1.7e-3) & (tensor6[3] == 0.3e-3)
        along_y = (tensor6[3] == 1.7e-3) & (tensor6[0] == 0.3e-3)
        assert along_x.sum() > 0
        assert along_y.sum() > 0


class TestSubsample:
    def test_identity_when_k_equals_dwi_count(self):
        spec = PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0)
        stack = make_phantom(spec)
        out = subsample(stack, 6, seed=11)
        assert np.array_equal(out.data, stack.data)
        assert np.array_equal(out.scheme.bvecs, stack.scheme.bvecs)

    def test_output_has_seven_channels_for_k6(self):
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=90, seed=1))
        out = subsample(stack, 6, seed=0)
        assert out.n_channels == 7
        assert len(out.scheme) == 7
        assert out.scheme.bvals[0] == 0.0
        assert np.all(out.scheme.bvals[1:] == 1000.0)

    def test_idempotent_on_own_output(self):
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=30, seed=2))
        once = subsample(stack, 6, seed=7)
        twice = subsample(once, 6, seed=7)
        assert np.array_equal(once.data, twice.data)
        assert np.array_equal(once.scheme.bvecs, twice.scheme.bvecs)

    def test_rejects_k_beyond_available(self):
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0))
        with pytest.raises(ConfigError):
            subsample(stack, 7, seed=0)

    def test_spread_beats_random_draw_median(self):
        """Greedy selection vs the median of 1000 seeded random 6-subsets."""
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=90, seed=3))
        out = subsample(stack, 6, seed=0)
        chosen = out.scheme.bvecs[out.scheme.dwi_indices]

        def min_pairwise(dirs):
            g = np.arccos(np.clip(np.abs(dirs @ dirs.T), 0, 1))
            iu = np.triu_indices(len(dirs), k=1)
            return g[iu].min()

        rng = np.random.default_rng(1234)
        alldirs = stack.scheme.bvecs[stack.scheme.dwi_indices]
        draws = [
            min_pairwise(alldirs[rng.choice(90, size=6, replace=False)])
            for _ in range(1000)
        ]
        assert min_pairwise(chosen) >= np.median(draws)


class TestAverageDwis:
    def test_mean_of_two_constant_channels(self):
        s = GradientScheme(
            [0.0, 1000.0, 1000.0], [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
        )
        data = np.stack(
            [np.zeros((4, 4, 4)), np.full((4, 4, 4), 1.0), np.full((4, 4, 4), 3.0)]
        ).astype(np.float32)
        out = average_dwis(DwiStack(data, s))
        assert np.all(out == 2.0)

    def test_single_channel_is_identity(self):
        s = GradientScheme([0.0, 1000.0], [[0, 0, 0], [1, 0, 0]])
        rng = np.random.default_rng(0)
        data = rng.uniform(0, 10, (2, 4, 4, 4)).astype(np.float32)
        out = average_dwis(DwiStack(data, s))
        assert np.array_equal(out, data[1])

    def test_identical_channels_recover_field_exactly(self):
        dirs = half_sphere_directions(6, 0)
        s = GradientScheme(
            np.concatenate([[0.0], np.full(6, 1000.0)]),
            np.concatenate([np.zeros((1, 3)), dirs]),
        )
        rng = np.random.default_rng(1)
        f = rng.uniform(0, 5, (4, 4, 4)).astype(np.float32)
        data = np.stack([np.zeros_like(f)] + [f] * 6)
        out = average_dwis(DwiStack(data, s))
        assert np.array_equal(out, f)

    def test_permutation_of_channels_within_tolerance(self):
        stack = make_phantom(
            PhantomSpec(dims=(8, 8, 8), n_directions=12, seed=5, noise_sigma=0.1)
        )
        perm = [0] + list(np.random.default_rng(2).permutation(np.arange(1, 13)))
        shuffled = DwiStack(
            stack.data[perm], stack.scheme.subset(perm), stack.voxel_size
        )
        np.testing.assert_allclose(
            average_dwis(stack), average_dwis(shuffled), rtol=0, atol=1e-4
        )

    def test_requires_a_dwi_channel(self):
        s = GradientScheme([0.0], [[0, 0, 0]])
        with pytest.raises(GradientSchemeError):
            average_dwis(DwiStack(np.ones((1, 4, 4, 4), np.float32), s))


class TestConcatChannels:
    def test_array_concat_shapes(self):
        a = np.zeros((1, 4, 4, 4), np.float32)
        b = np.ones((6, 4, 4, 4), np.float32)
        out = concat_channels(a, b)
        assert out.shape == (7, 4, 4, 4)
        assert np.all(out[0] == 0) and np.all(out[1:] == 1)

    def test_two_single_channels_make_a_pair(self):
        a = np.zeros((1, 4, 4, 4), np.float32)
        b = np.ones((1, 4, 4, 4), np.float32)
        assert concat_channels(a, b).shape == (2, 4, 4, 4)

    def test_empty_right_operand_is_identity(self):
        a = np.ones((3, 4, 4, 4), np.float32)
        out = concat_channels(a, np.zeros((0, 4, 4, 4), np.float32))
        assert np.array_equal(out, a)

    def test_stack_concat_merges_schemes(self):
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0))
        merged = concat_channels(stack, stack)
        assert merged.n_channels == 14
        assert len(merged.scheme) == 14

    def test_spatial_mismatch_rejected(self):
        a = np.zeros((1, 4, 4, 4), np.float32)
        b = np.zeros((1, 5, 4, 4), np.float32)
        with pytest.raises(ShapeError):
            concat_channels(a, b)


class TestDvolIO:
    def test_round_trip_bit_identical(self, tmp_path):
        stack = make_phantom(
            PhantomSpec(dims=(8, 9, 10), n_directions=7, seed=6, noise_sigma=0.05)
        )
        p = tmp_path / "s.dvol"
        save_dvol(stack, p)
        back = load_dvol(p)
        assert np.array_equal(back.data, stack.data)
        assert np.array_equal(back.scheme.bvals, stack.scheme.bvals)
        assert np.array_equal(back.scheme.bvecs, stack.scheme.bvecs)
        assert np.array_equal(back.voxel_size, stack.voxel_size)

    def test_save_is_byte_stable(self, tmp_path):
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=1))
        p1, p2 = tmp_path / "a.dvol", tmp_path / "b.dvol"
        save_dvol(stack, p1)
        save_dvol(stack, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_magic(self, tmp_path):
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0))
        p = tmp_path / "s.dvol"
        save_dvol(stack, p)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(DvolMagicError):
            load_dvol(p)

    def test_truncated_header(self, tmp_path):
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0))
        p = tmp_path / "s.dvol"
        save_dvol(stack, p)
        p.write_bytes(p.read_bytes()[:20])
        with pytest.raises(DvolTruncatedError):
            load_dvol(p)

    def test_payload_size_disagreement(self, tmp_path):
        # Header says 7 channels, payload holds 6.
        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0))
        p = tmp_path / "s.dvol"
        save_dvol(stack, p)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 8 * 8 * 8 * 4])
        with pytest.raises(DvolSizeMismatchError):
            load_dvol(p)

    def test_header_internal_disagreement(self, tmp_path):
        import json
        import struct

        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0))
        p = tmp_path / "s.dvol"
        save_dvol(stack, p)
        raw = p.read_bytes()
        (hlen,) = struct.unpack_from("<I", raw, 6)
        header = json.loads(raw[10 : 10 + hlen])
        header["bvals"] = header["bvals"][:-1]  # now 6 bvals vs 7 channels
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        p.write_bytes(raw[:6] + struct.pack("<I", len(blob)) + blob + raw[10 + hlen :])
        with pytest.raises(DvolSizeMismatchError):
            load_dvol(p)

    def test_bad_dtype_rejected(self, tmp_path):
        import json
        import struct

        stack = make_phantom(PhantomSpec(dims=(8, 8, 8), n_directions=6, seed=0))
        p = tmp_path / "s.dvol"
        save_dvol(stack, p)
        raw = p.read_bytes()
        (hlen,) = struct.unpack_from("<I", raw, 6)
        header = json.loads(raw[10 : 10 + hlen])
        header["dtype"] = "f64le"
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        p.write_bytes(raw[:6] + struct.pack("<I", len(blob)) + blob + raw[10 + hlen :])
        with pytest.raises(DvolHeaderError):
            load_dvol(p)

    def test_fa_map_round_trip(self, tmp_path):
        mask = np.zeros((6, 6, 6), bool)
        mask[1:5, 1:5, 1:5] = True
        data = np.zeros((6, 6, 6), np.float32)
        data[mask] = 0.5
        fa = FaMap(data, mask)
        p = tmp_path / "fa.dvol"
        save_fa_map(fa, p)
        back = load_fa_map(p)
        assert np.array_equal(back.data, fa.data)

    def test_load_dvol_refuses_scalar_map(self, tmp_path):
        fa = FaMap(np.zeros((4, 4, 4), np.float32), np.zeros((4, 4, 4), bool))
        p = tmp_path / "fa.dvol"
        save_fa_map(fa, p)
        with pytest.raises(DvolSizeMismatchError):
            load_dvol(p)
