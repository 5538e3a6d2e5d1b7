"""Bias field, elastic distortion, and corrupted-volume injectors."""

import numpy as np
import pytest

from udad.artifacts import (
    BiasFieldSpec,
    CorruptedSpec,
    DistortionSpec,
    corrupt_volumes,
    displacement_field,
    inject,
    inject_bias_field,
    inject_distortion,
    warp_with_displacement,
)
from udad.dti import compute_fa_map
from udad.errors import ConfigError
from udad.volume import PhantomSpec, concat_channels, make_phantom, subsample


def phantom(dims=(12, 12, 12), n=12, seed=0, noise=0.0):
    return make_phantom(
        PhantomSpec(dims=dims, n_directions=n, seed=seed, noise_sigma=noise)
    )


class TestBiasField:
    def test_center_voxel_scales_by_one_plus_amplitude(self):
        stack = phantom()
        spec = BiasFieldSpec(center=(6, 6, 6), sigma=5.0, amplitude=0.5)
        out = inject_bias_field(stack, spec)
        before = stack.data[0, 6, 6, 6]
        np.testing.assert_allclose(out.data[0, 6, 6, 6], 1.5 * before, rtol=1e-6)

    def test_three_sigma_falloff(self):
        stack = phantom(dims=(32, 12, 12), n=8)
        vx = stack.voxel_size[0]
        spec = BiasFieldSpec(center=(4, 6, 6), sigma=4.0 * vx, amplitude=1.0)
        out = inject_bias_field(stack, spec)
        # 12 voxels along x is 3 sigma away: multiplier 1 + e^(-4.5).
        before = stack.data[0, 16, 6, 6]
        expected = (1.0 + np.exp(-4.5)) * before
        np.testing.assert_allclose(out.data[0, 16, 6, 6], expected, rtol=1e-6)

    def test_zero_amplitude_is_rejected_but_tiny_is_near_identity(self):
        stack = phantom()
        with pytest.raises(ConfigError):
            BiasFieldSpec(center=(6, 6, 6), sigma=5.0, amplitude=0.0)
        out = inject_bias_field(
            stack, BiasFieldSpec(center=(6, 6, 6), sigma=5.0, amplitude=1e-9)
        )
        np.testing.assert_allclose(out.data, stack.data, rtol=1e-6)

    def test_center_outside_volume_rejected(self):
        stack = phantom()
        with pytest.raises(ConfigError):
            inject_bias_field(
                stack, BiasFieldSpec(center=(40, 6, 6), sigma=5.0, amplitude=0.5)
            )

    def test_commutes_with_channel_concat(self):
        stack = phantom(n=8)
        spec = BiasFieldSpec(center=(6, 6, 6), sigma=6.0, amplitude=0.7)
        merged = concat_channels(stack, stack)
        a = inject_bias_field(merged, spec)
        b = concat_channels(inject_bias_field(stack, spec), inject_bias_field(stack, spec))
        assert np.array_equal(a.data, b.data)


class TestDistortion:
    def test_zero_sigma_is_identity(self):
        stack = phantom()
        out = inject_distortion(stack, DistortionSpec(displacement_sigma=0.0))
        assert np.array_equal(out.data, stack.data)

    def test_zero_displacement_warp_is_exact(self):
        stack = phantom()
        disp = np.zeros((3,) + tuple(stack.dims))
        out = warp_with_displacement(stack.data.astype(np.float64), disp)
        assert np.array_equal(out.astype(np.float32), stack.data)

    def test_constant_plus_one_shift_along_x(self):
        stack = phantom()
        disp = np.zeros((3,) + tuple(stack.dims))
        disp[0] = 1.0
        out = warp_with_displacement(stack.data.astype(np.float64), disp)
        np.testing.assert_allclose(out[:, 1:], stack.data[:, :-1], atol=1e-12)
        assert np.all(out[:, 0] == 0)

    def test_seed_determinism(self):
        stack = phantom()
        spec = DistortionSpec(grid_spacing=4, displacement_sigma=1.5, seed=12)
        a = inject_distortion(stack, spec)
        b = inject_distortion(stack, spec)
        assert np.array_equal(a.data, b.data)
        c = inject_distortion(stack, DistortionSpec(4, 1.5, seed=13))
        assert not np.array_equal(a.data, c.data)

    def test_mass_approximately_preserved(self):
        stack = phantom(dims=(16, 16, 16), n=8, seed=1)
        spec = DistortionSpec(grid_spacing=8, displacement_sigma=2.0, seed=3)
        out = inject_distortion(stack, spec)
        ratio = out.data.sum() / stack.data.sum()
        assert abs(ratio - 1.0) < 0.05

    def test_same_field_hits_every_channel(self):
        stack = phantom(n=8, seed=2)
        spec = DistortionSpec(grid_spacing=4, displacement_sigma=1.0, seed=5)
        disp = displacement_field(stack.dims, spec)
        out = inject_distortion(stack, spec)
        for ch in range(stack.n_channels):
            ref = warp_with_displacement(
                stack.data[ch : ch + 1].astype(np.float64), disp
            )
            np.testing.assert_allclose(
                out.data[ch], np.clip(ref[0], 0, None).astype(np.float32)
            )

    def test_small_grid_spacing_rejected(self):
        with pytest.raises(ConfigError):
            DistortionSpec(grid_spacing=1)


class TestCorruptedVolumes:
    def test_single_channel_zeroed_rest_untouched(self):
        stack = phantom(n=6, seed=0)
        out = corrupt_volumes(stack, CorruptedSpec(channel_indices=(3,)))
        assert out.data[3].sum() == 0
        for ch in (0, 1, 2, 4, 5, 6):
            assert np.array_equal(out.data[ch], stack.data[ch])

    def test_empty_list_is_identity(self):
        stack = phantom(n=6)
        out = corrupt_volumes(stack, CorruptedSpec())
        assert np.array_equal(out.data, stack.data)

    def test_sweep_produces_distinct_single_channel_changes(self):
        stack = subsample(phantom(n=30, seed=4), 6, seed=0)
        outs = [
            corrupt_volumes(stack, CorruptedSpec(channel_indices=(i,)))
            for i in range(7)
        ]
        for i, out in enumerate(outs):
            changed = [
                ch
                for ch in range(7)
                if not np.array_equal(out.data[ch], stack.data[ch])
            ]
            assert changed == [i]
        for i in range(7):
            for j in range(i + 1, 7):
                assert not np.array_equal(outs[i].data, outs[j].data)

    def test_out_of_range_rejected(self):
        stack = phantom(n=6)
        with pytest.raises(ConfigError):
            corrupt_volumes(stack, CorruptedSpec(channel_indices=(7,)))

    def test_no_dwi_stack_warns(self):
        from udad.volume import DwiStack, GradientScheme

        s = GradientScheme([0.0], [[0, 0, 0]])
        stack = DwiStack(np.ones((1, 8, 8, 8), np.float32), s)
        with pytest.warns(UserWarning):
            corrupt_volumes(stack, CorruptedSpec(channel_indices=(0,)))


class TestDetectabilityPremise:
    """Every injector perturbs the 7-channel anisotropy map."""

    def _fa7(self, stack):
        return compute_fa_map(subsample(stack, 6, seed=0))

    def test_each_injector_changes_the_map(self):
        # Bias and distortion hit the full acquisition before sub-sampling;
        # a corrupted volume is a lost channel of the 7-channel draw itself.
        stack = phantom(dims=(16, 16, 16), n=30, seed=7, noise=0.05)
        base = self._fa7(stack)
        for spec in (
            BiasFieldSpec(center=(8, 8, 8), sigma=8.0, amplitude=0.5),
            DistortionSpec(grid_spacing=8, displacement_sigma=2.0, seed=1),
        ):
            fa = self._fa7(inject(stack, spec))
            delta = np.abs(
                fa.data.astype(np.float64) - base.data.astype(np.float64)
            ).mean()
            assert delta > 0, type(spec).__name__

        sub = subsample(stack, 6, seed=0)
        corrupted = corrupt_volumes(sub, CorruptedSpec(channel_indices=(2,)))
        fa = compute_fa_map(corrupted)
        delta = np.abs(
            fa.data.astype(np.float64) - base.data.astype(np.float64)
        ).mean()
        assert delta > 0

    def test_unknown_spec_rejected(self):
        with pytest.raises(ConfigError):
            inject(phantom(), object())
