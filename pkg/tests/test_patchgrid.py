import numpy as np
import pytest

from maest.errors import ConfigError, InputTooShort
from maest.melfront import MelSpectrogram
from maest.patchgrid import (
    CLS,
    DIST,
    PatchConfig,
    PatchoutSpec,
    PositionalTables,
    assemble_k0,
    grid_dims,
    inference_patchout_freq,
    inference_patchout_time,
    interpolate_positional,
    scale_temporal_patchout,
    slice_patches,
    training_patchout,
)

CFG = PatchConfig()


def _spec(bands, frames, seed=0):
    rng = np.random.default_rng(seed)
    return MelSpectrogram(data=rng.normal(0, 1, (bands, frames)).astype(np.float32))


def _enumerate_grid(bands, frames, cfg=CFG):
    # sliding-window oracle for the grid dimensions
    rows = [r for r in range(bands) if r % cfg.stride_h == 0 and r + cfg.patch_h <= bands]
    cols = [c for c in range(frames) if c % cfg.stride_w == 0 and c + cfg.patch_w <= frames]
    return len(rows), len(cols)


class TestSlicing:
    def test_30s_grid(self):
        assert grid_dims(96, 1874, CFG) == (9, 186)

    def test_5s_grid(self):
        assert grid_dims(96, 313, CFG) == (9, 30)

    def test_single_patch_equals_input(self):
        spec = _spec(16, 16)
        grid = slice_patches(spec, CFG)
        assert (grid.f_p, grid.t_p) == (1, 1)
        np.testing.assert_array_equal(grid.patches[0, 0], spec.data.reshape(-1))

    def test_too_small(self):
        with pytest.raises(InputTooShort):
            slice_patches(_spec(15, 40), CFG)

    def test_dims_match_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            bands = int(rng.integers(16, 120))
            frames = int(rng.integers(16, 400))
            assert grid_dims(bands, frames, CFG) == _enumerate_grid(bands, frames)

    def test_patch_content_and_origin(self):
        spec = _spec(40, 60, seed=2)
        grid = slice_patches(spec, CFG)
        for f in range(grid.f_p):
            for t in range(grid.t_p):
                r, c = grid.origin(f, t)
                assert (r, c) == (f * 10, t * 10)
                window = spec.data[r : r + 16, c : c + 16]
                np.testing.assert_array_equal(grid.patches[f, t], window.reshape(-1))

    def test_stride_validation(self):
        with pytest.raises(ConfigError):
            PatchConfig(patch_h=16, patch_w=16, stride_h=0, stride_w=10)
        with pytest.raises(ConfigError):
            PatchConfig(patch_h=16, patch_w=16, stride_h=17, stride_w=10)


class TestTrainingPatchout:
    def test_paper_5s_counts(self):
        rng = np.random.default_rng(0)
        kept = training_patchout(9, 30, 3, 15, rng)
        assert len(kept) == 90

    def test_no_drop_keeps_all(self):
        rng = np.random.default_rng(0)
        kept = training_patchout(9, 30, 0, 0, rng)
        assert len(kept) == 270
        assert kept == [(f, t) for f in range(9) for t in range(30)]

    def test_paper_30s_counts(self):
        rng = np.random.default_rng(0)
        kept = training_patchout(9, 186, 3, 90, rng)
        assert len(kept) == 576

    def test_exact_row_col_removal(self):
        rng = np.random.default_rng(3)
        kept = training_patchout(7, 11, 2, 4, rng)
        rows = {f for f, _ in kept}
        cols = {t for _, t in kept}
        assert len(rows) == 5 and len(cols) == 7
        assert set(kept) == {(f, t) for f in rows for t in cols}

    def test_deterministic_per_seed(self):
        a = training_patchout(9, 30, 3, 15, np.random.default_rng(42))
        b = training_patchout(9, 30, 3, 15, np.random.default_rng(42))
        assert a == b

    def test_coverage_over_draws(self):
        # no dead positions: every row/col is dropped at least once eventually
        rng = np.random.default_rng(4)
        dropped_rows, dropped_cols = set(), set()
        for _ in range(200):
            kept = training_patchout(5, 6, 2, 2, rng)
            dropped_rows |= set(range(5)) - {f for f, _ in kept}
            dropped_cols |= set(range(6)) - {t for _, t in kept}
        assert dropped_rows == set(range(5))
        assert dropped_cols == set(range(6))

    def test_too_large_drop(self):
        with pytest.raises(ConfigError):
            training_patchout(9, 30, 9, 0, np.random.default_rng(0))


class TestScaleTemporal:
    @pytest.mark.parametrize("seconds,expected", [(5, 15), (10, 30), (20, 60), (30, 90)])
    def test_paper_values(self, seconds, expected):
        assert scale_temporal_patchout(seconds) == expected

    def test_nonpositive(self):
        with pytest.raises(ConfigError):
            scale_temporal_patchout(0)


class TestInferencePatchout:
    def test_keep_every_other(self):
        kept = inference_patchout_time(1, 10, 2)
        assert [t for _, t in kept] == [0, 2, 4, 6, 8]

    def test_t1_identity(self):
        kept = inference_patchout_time(3, 7, 1)
        assert kept == [(f, t) for f in range(3) for t in range(7)]

    def test_186_by_10(self):
        kept = inference_patchout_time(9, 186, 10)
        cols = sorted({t for _, t in kept})
        assert len(cols) == 19  # ceil(186/10)
        assert len(kept) == 9 * 19

    def test_freq_three_rows(self):
        kept = inference_patchout_freq(9, 4, 3)
        rows = sorted({f for f, _ in kept})
        assert rows == [1, 2, 3, 4, 5, 6]

    def test_freq_four_rows(self):
        kept = inference_patchout_freq(9, 4, 4)
        rows = sorted({f for f, _ in kept})
        assert rows == [2, 3, 4, 5, 6]

    def test_freq_zero_identity(self):
        kept = inference_patchout_freq(5, 3, 0)
        assert len(kept) == 15

    def test_freq_too_many(self):
        with pytest.raises(ConfigError):
            inference_patchout_freq(3, 5, 3)

    def test_bad_t_keep(self):
        with pytest.raises(ConfigError):
            inference_patchout_time(3, 5, 0)

    def test_identity_composition(self):
        spec = PatchoutSpec.inference(t_keep=1, f_rows=0)
        kept = spec.kept_indices(9, 30)
        assert kept == [(f, t) for f in range(9) for t in range(30)]


class TestKeptCountFormulas:
    def test_random_configs_against_enumeration(self):
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 200:
            f_p = int(rng.integers(2, 12))
            t_p = int(rng.integers(2, 200))
            mode = rng.choice(["training", "inference"])
            if mode == "training":
                f_drop = int(rng.integers(0, f_p))
                t_drop = int(rng.integers(0, t_p))
                spec = PatchoutSpec.training(f_drop, t_drop)
                kept = spec.kept_indices(f_p, t_p, rng)
                assert len(set(kept)) == len(kept)
                assert len(kept) == (f_p - f_drop) * (t_p - t_drop) == spec.kept_count(f_p, t_p)
            else:
                t_keep = int(rng.choice([1, 2, 3, 5, 10]))
                f_rows = int(rng.choice([0, 3, 4]))
                if f_p <= f_rows:
                    continue
                spec = PatchoutSpec.inference(t_keep=t_keep, f_rows=f_rows)
                kept = spec.kept_indices(f_p, t_p)
                # brute-force enumeration of surviving (row, col) pairs
                if f_rows == 0:
                    rows = set(range(f_p))
                elif f_rows == 3:
                    rows = set(range(f_p)) - {0, f_p - 2, f_p - 1}
                else:
                    rows = set(range(f_p)) - {0, 1, f_p - 2, f_p - 1}
                cols = {t for t in range(t_p) if t % t_keep == 0}
                assert set(kept) == {(f, t) for f in rows for t in cols}
                assert len(kept) == spec.kept_count(f_p, t_p)
            checked += 1

    def test_paper_grid_settings(self):
        # 30 s grid: keep-1-of-T for T in {2,3,5,10} and 3/4-row drops
        for t_keep in (2, 3, 5, 10):
            for f_rows in (0, 3, 4):
                spec = PatchoutSpec.inference(t_keep=t_keep, f_rows=f_rows)
                kept = spec.kept_indices(9, 186)
                rows = 9 - (0 if f_rows == 0 else f_rows)
                assert len(kept) == rows * int(np.ceil(186 / t_keep))


class TestInterpolation:
    def test_same_size_returns_equal(self):
        table = np.random.default_rng(0).normal(0, 1, (30, 8)).astype(np.float32)
        out = interpolate_positional(table, 30)
        np.testing.assert_array_equal(out, table)
        assert out is not table

    def test_midpoint(self):
        v, w = np.array([1.0, 2.0]), np.array([3.0, 6.0])
        out = interpolate_positional(np.stack([v, w]), 3)
        np.testing.assert_allclose(out[1], (v + w) / 2)
        np.testing.assert_array_equal(out[0], v)
        np.testing.assert_array_equal(out[2], w)

    def test_endpoints_exact_30_to_186(self):
        table = np.random.default_rng(1).normal(0, 1, (30, 16))
        out = interpolate_positional(table, 186)
        np.testing.assert_allclose(out[0], table[0], atol=1e-6)
        np.testing.assert_allclose(out[-1], table[-1], atol=1e-6)

    def test_round_trip_endpoint_only(self):
        # 30 -> 60 -> 30 is lossy in the middle but endpoint-exact
        table = np.random.default_rng(2).normal(0, 1, (30, 4))
        back = interpolate_positional(interpolate_positional(table, 60), 30)
        np.testing.assert_allclose(back[0], table[0], atol=1e-5)
        np.testing.assert_allclose(back[-1], table[-1], atol=1e-5)
        assert not np.allclose(back, table, atol=1e-8)

    def test_source_too_small(self):
        with pytest.raises(ConfigError):
            interpolate_positional(np.ones((1, 4)), 10)


class TestAssembleK0:
    def _setup(self, d=8, f_p=2, t_p=3, seed=0):
        rng = np.random.default_rng(seed)
        patches = rng.normal(0, 1, (f_p, t_p, 256)).astype(np.float32)
        from maest.patchgrid import PatchGrid

        grid = PatchGrid(patches=patches, cfg=CFG)
        weight = rng.normal(0, 0.1, (256, d)).astype(np.float32)
        bias = rng.normal(0, 0.1, d).astype(np.float32)
        tables = PositionalTables(
            te=rng.normal(0, 1, (t_p, d)).astype(np.float32),
            fe=rng.normal(0, 1, (f_p, d)).astype(np.float32),
        )
        cls_tok = rng.normal(0, 1, d).astype(np.float32)
        dist_tok = rng.normal(0, 1, d).astype(np.float32)
        return grid, weight, bias, tables, cls_tok, dist_tok

    def test_zero_everything_gives_bias(self):
        grid, weight, bias, tables, _, _ = self._setup()
        grid.patches[:] = 0
        tables.te[:] = 0
        tables.fe[:] = 0
        zero = np.zeros(8, dtype=np.float32)
        keep = [(f, t) for f in range(2) for t in range(3)]
        seq = assemble_k0(grid, keep, weight, bias, tables, zero, zero)
        for row in seq.tokens[2:]:
            np.testing.assert_allclose(row, bias, atol=1e-7)

    def test_identity_projection(self):
        rng = np.random.default_rng(1)
        from maest.patchgrid import PatchGrid

        patches = rng.normal(0, 1, (1, 2, 256)).astype(np.float32)
        grid = PatchGrid(patches=patches, cfg=CFG)
        tables = PositionalTables(te=np.zeros((2, 256), dtype=np.float32),
                                  fe=np.zeros((1, 256), dtype=np.float32))
        zero = np.zeros(256, dtype=np.float32)
        seq = assemble_k0(grid, [(0, 0), (0, 1)], np.eye(256, dtype=np.float32),
                          zero, tables, zero, zero)
        np.testing.assert_allclose(seq.tokens[2], patches[0, 0], atol=1e-6)
        np.testing.assert_allclose(seq.tokens[3], patches[0, 1], atol=1e-6)

    def test_matches_per_patch_recomputation(self):
        grid, weight, bias, tables, cls_tok, dist_tok = self._setup(seed=2)
        keep = [(0, 0), (0, 2), (1, 1)]
        seq = assemble_k0(grid, keep, weight, bias, tables, cls_tok, dist_tok)
        np.testing.assert_array_equal(seq.tokens[0], cls_tok)
        np.testing.assert_array_equal(seq.tokens[1], dist_tok)
        assert seq.tags[0] == CLS and seq.tags[1] == DIST
        for i, (f, t) in enumerate(sorted(keep)):
            expected = grid.patches[f, t] @ weight + bias + tables.te[t] + tables.fe[f]
            np.testing.assert_allclose(seq.tokens[2 + i], expected, atol=1e-6)
            assert seq.tags[2 + i] == (t, f)

    def test_out_of_grid_index(self):
        grid, weight, bias, tables, cls_tok, dist_tok = self._setup()
        with pytest.raises(IndexError):
            assemble_k0(grid, [(5, 0)], weight, bias, tables, cls_tok, dist_tok)

    def test_linearity_in_patch_content(self):
        grid, weight, bias, tables, cls_tok, dist_tok = self._setup(seed=3)
        keep = [(f, t) for f in range(2) for t in range(3)]

        def k0_of(scale):
            from maest.patchgrid import PatchGrid

            scaled = PatchGrid(patches=(grid.patches * scale).astype(np.float32), cfg=CFG)
            return assemble_k0(scaled, keep, weight, bias, tables, cls_tok, dist_tok).tokens

        base = k0_of(0.0)
        one = k0_of(1.0)
        three = k0_of(3.0)
        np.testing.assert_allclose(three[2:] - base[2:], 3.0 * (one[2:] - base[2:]),
                                   rtol=1e-4, atol=1e-5)
