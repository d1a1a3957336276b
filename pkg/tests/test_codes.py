"""Subsampling mask designers and the local-variance objective."""

import itertools

import numpy as np
import pytest

from mslidar.codes import (
    CodeDesignSpec,
    design_blue_noise,
    local_variance,
    random_code_per_band,
    random_code_per_pixel,
)
from mslidar.cube import SamplingMask


class TestLocalVariance:
    def test_full_mask_zero(self):
        mask = SamplingMask.full(6, 6, 3)
        assert local_variance(mask) == pytest.approx(0.0, abs=1e-15)

    def test_hand_computed_3x3(self):
        # single band, one sampled pixel in the centre of a 3x3 grid
        bits = np.zeros((3, 3, 1), dtype=np.uint8)
        bits[1, 1, 0] = 1
        mask = SamplingMask(bits)
        # normalised windowed counts: corners 1/4, edges 1/6, centre 1/9;
        # nominal rate = 1/9 sampled overall
        vals = np.array([1 / 4, 1 / 6, 1 / 4, 1 / 6, 1 / 9, 1 / 6, 1 / 4, 1 / 6, 1 / 4])
        ref = float(((vals - 1 / 9) ** 2).mean())
        assert local_variance(mask, 1) == pytest.approx(ref)

    def test_checkerboard_beats_stripes_L2(self):
        ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        checker = ((ii + jj) % 2).astype(np.uint8)
        stripes = (jj % 2).astype(np.uint8)

        def to_mask(assign):
            bits = np.zeros((8, 8, 2), dtype=np.uint8)
            bits[:, :, 0][assign == 0] = 1
            bits[:, :, 1][assign == 1] = 1
            return SamplingMask(bits)

        assert local_variance(to_mask(checker)) < local_variance(to_mask(stripes))


class TestRandomCodes:
    def test_per_pixel_exact_W(self):
        spec = CodeDesignSpec(10, 12, 6, 2, seed=3)
        mask = random_code_per_pixel(spec)
        counts = mask.bits.sum(axis=2)
        assert (counts == 2).all()
        assert mask.bands_per_pixel == 2

    def test_per_pixel_full_sampling(self):
        spec = CodeDesignSpec(4, 4, 3, 3, seed=0)
        assert (random_code_per_pixel(spec).bits == 1).all()

    def test_per_pixel_band_frequencies_uniform(self):
        # chi-square check across seeds: each band sampled ~ n_pix * W / L
        L, W = 5, 2
        counts = np.zeros(L)
        for seed in range(30):
            spec = CodeDesignSpec(8, 8, L, W, seed=seed)
            counts += random_code_per_pixel(spec).bits.sum(axis=(0, 1))
        total = counts.sum()
        expected = total / L
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # 4 dof; 0.999 quantile ~ 18.5
        assert chi2 < 18.5

    def test_per_band_exact_pixel_count(self):
        spec = CodeDesignSpec(9, 9, 4, 2, seed=5)
        mask = random_code_per_band(spec)
        per_band = mask.bits.sum(axis=(0, 1))
        assert (per_band == round(81 * 2 / 4)).all()

    def test_per_band_mean_pixel_count(self):
        vals = []
        for seed in range(20):
            spec = CodeDesignSpec(8, 8, 4, 2, seed=seed)
            vals.append(random_code_per_band(spec).bits.sum(axis=2).mean())
        assert np.mean(vals) == pytest.approx(2.0, abs=0.05)

    def test_deterministic_given_seed(self):
        spec = CodeDesignSpec(6, 6, 4, 1, seed=11)
        m1 = random_code_per_pixel(spec)
        m2 = random_code_per_pixel(spec)
        assert m1 == m2
        b1, _ = design_blue_noise(CodeDesignSpec(5, 5, 2, 1, seed=7, n_anneal=2000))
        b2, _ = design_blue_noise(CodeDesignSpec(5, 5, 2, 1, seed=7, n_anneal=2000))
        assert b1 == b2


def _exhaustive_optimum_4x4_L2():
    """Brute force over all one-band-per-pixel assignments on 4x4, L=2."""
    best = np.inf
    for code in range(1 << 16):
        assign = np.array([(code >> k) & 1 for k in range(16)], dtype=np.uint8).reshape(4, 4)
        bits = np.zeros((4, 4, 2), dtype=np.uint8)
        bits[:, :, 0][assign == 0] = 1
        bits[:, :, 1][assign == 1] = 1
        val = local_variance(SamplingMask(bits), 1)
        if val < best:
            best = val
    return best


class TestBlueNoiseDesigner:
    def test_full_sampling_trivial(self):
        mask, obj = design_blue_noise(CodeDesignSpec(6, 6, 3, 3, seed=0))
        assert (mask.bits == 1).all()
        assert obj == pytest.approx(0.0, abs=1e-15)

    def test_constraint_holds(self):
        spec = CodeDesignSpec(8, 8, 8, 2, seed=1, n_anneal=4000)
        mask, obj = design_blue_noise(spec)
        assert (mask.bits.sum(axis=2) == 2).all()

    def test_better_than_random_median(self):
        spec = CodeDesignSpec(16, 16, 4, 1, seed=2, n_anneal=20000)
        mask, obj = design_blue_noise(spec)
        rand_objs = []
        for seed in range(40):
            rspec = CodeDesignSpec(16, 16, 4, 1, seed=seed)
            rand_objs.append(local_variance(random_code_per_band(rspec)))
        assert obj < np.median(rand_objs)

    def test_exhaustive_optimum_4x4(self):
        best = _exhaustive_optimum_4x4_L2()
        mask, obj = design_blue_noise(CodeDesignSpec(4, 4, 2, 1, seed=0))
        assert obj == pytest.approx(best, rel=1e-12)

    def test_uneven_slices(self):
        # L=5, W=2: slices of 3 and 2 bands
        mask, obj = design_blue_noise(CodeDesignSpec(6, 6, 5, 2, seed=4, n_anneal=3000))
        assert (mask.bits.sum(axis=2) == 2).all()
