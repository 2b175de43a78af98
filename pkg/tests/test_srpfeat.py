"""Tests for srptrack.srpfeat."""

import numpy as np
import pytest

from srptrack.errors import FormatError, LagRangeTooSmall, TooShort
from srptrack.geometry import MicArray, SphericalGrid, delay_table, grid_argmax
from srptrack.srpfeat import (
    EnergyVad,
    FramingConfig,
    assemble_input,
    compute_power_maps,
    default_lag_range,
    frame_signal,
    gcc_phat,
    gcc_set,
    load_features,
    normalize_map,
    save_features,
    srp_map,
)

from oracles import plane_wave_frames, srp_direct_pairwise, srp_direct_two_mic


class TestFraming:
    def test_20s_gives_103_frames(self):
        cfg = FramingConfig()
        assert cfg.n_frames(320000) == 103

    def test_hop_is_192ms(self):
        assert FramingConfig().hop_seconds == pytest.approx(0.192)

    def test_exactly_one_window(self):
        cfg = FramingConfig()
        assert cfg.n_frames(cfg.K) == 1

    def test_too_short(self):
        with pytest.raises(TooShort):
            FramingConfig().n_frames(4095)

    def test_frames_are_windowed(self):
        cfg = FramingConfig(K=64, hop=32, fs=1000)
        sig = np.ones((1, 200))
        frames = frame_signal(sig, cfg)
        assert frames.shape == (1, 5, 64)
        np.testing.assert_allclose(frames[0, 0], np.hanning(64))

    def test_frame_offsets(self):
        cfg = FramingConfig(K=8, hop=4, fs=100)
        sig = np.arange(24, dtype=float)[None, :]
        frames = frame_signal(sig, cfg)
        window = np.hanning(8)
        np.testing.assert_allclose(frames[0, 2], sig[0, 8:16] * window)


class TestGccPhat:
    def test_self_correlation_peaks_at_zero(self):
        rng = np.random.default_rng(3)
        frame = rng.normal(size=512)
        r = gcc_phat(frame, frame, 10)
        assert np.argmax(r) == 10  # lag 0

    def test_delayed_peak_at_plus_d(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=512)
        delayed = np.roll(base, 5)  # x_n(t) = x_m(t - 5)
        r = gcc_phat(delayed, base, 10)
        assert np.argmax(r) - 10 == 5

    def test_zero_frames_give_zero(self):
        r = gcc_phat(np.zeros(256), np.zeros(256), 8)
        np.testing.assert_array_equal(r, 0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=512)
        b = rng.normal(size=512)
        r1 = gcc_phat(a, b, 6)
        r2 = gcc_phat(123.4 * a, 0.002 * b, 6)
        np.testing.assert_allclose(r1, r2, atol=1e-6)

    def test_unit_magnitude_cross_power(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=256)
        b = rng.normal(size=256)
        r = gcc_phat(a, b, 128)
        # lags 0..127 then -128..-1 rebuild the circular sequence, whose
        # spectrum is the whitened cross power
        full = np.concatenate([r[128:256], r[:128]])
        np.testing.assert_allclose(np.abs(np.fft.rfft(full)), 1.0, atol=1e-9)
        assert np.max(np.abs(r)) <= 1.0 + 1e-9

    def test_symmetry_r_nm_vs_r_mn(self):
        rng = np.random.default_rng(7)
        frames = rng.normal(size=(4, 512))
        gset = gcc_set(frames, 8)
        for n in range(4):
            for m in range(4):
                for lag in (-8, -3, 0, 2, 8):
                    assert gset.r(n, m, lag) == pytest.approx(gset.r(m, n, -lag), abs=1e-12)

    def test_gcc_set_matches_pairwise_calls(self):
        rng = np.random.default_rng(8)
        frames = rng.normal(size=(3, 256))
        gset = gcc_set(frames, 5)
        for p, (n, m) in enumerate(gset.pairs):
            np.testing.assert_allclose(gset.pair_lags[p], gcc_phat(frames[n], frames[m], 5), atol=1e-12)


def _toy_array(n_mics: int) -> MicArray:
    rng = np.random.default_rng(100 + n_mics)
    pos = rng.uniform(-0.06, 0.06, size=(n_mics, 3))
    return MicArray(positions=pos, name=f"toy{n_mics}")


class TestSrpMap:
    def test_zero_gcc_zero_map(self):
        arr = _toy_array(3)
        grid = SphericalGrid(4, 8)
        table = delay_table(arr, grid)
        frames = np.zeros((3, 512))
        pmap = srp_map(gcc_set(frames, 16), table, 16000)
        np.testing.assert_array_equal(pmap.values, 0.0)

    @pytest.mark.parametrize("n_mics", [2, 3, 4])
    def test_matches_direct_beamformer(self, n_mics):
        fs = 16000
        rng = np.random.default_rng(20 + n_mics)
        arr = _toy_array(n_mics)
        grid = SphericalGrid(6, 8)
        table = delay_table(arr, grid)
        u = grid.unit_vectors()[3, 2]
        dry = rng.normal(size=1024)
        frames = plane_wave_frames(dry, arr.positions, u, fs)
        pmap = srp_map(gcc_set(frames, 32), table, fs)
        direct = srp_direct_pairwise(frames, arr.positions, grid.unit_vectors(), fs)
        scaled = direct / 1024.0  # the DFT sum carries a factor of K
        err = np.max(np.abs(scaled - pmap.values)) / np.max(np.abs(scaled))
        assert err < 0.02

    def test_two_mic_matches_squared_beamformer(self):
        fs = 16000
        rng = np.random.default_rng(31)
        arr = _toy_array(2)
        grid = SphericalGrid(5, 6)
        table = delay_table(arr, grid)
        frames = plane_wave_frames(rng.normal(size=1024), arr.positions, grid.unit_vectors()[2, 4], fs)
        pmap = srp_map(gcc_set(frames, 32), table, fs)
        direct = srp_direct_two_mic(frames, arr.positions, grid.unit_vectors(), fs) / 1024.0
        err = np.max(np.abs(direct - pmap.values)) / np.max(np.abs(direct))
        assert err < 0.02

    def test_plane_wave_argmax_hits_grid_point(self):
        fs = 16000
        rng = np.random.default_rng(32)
        arr = _toy_array(4)
        grid = SphericalGrid(8, 16)
        table = delay_table(arr, grid)
        for (i, j) in [(2, 3), (4, 11), (6, 0)]:
            u = grid.unit_vectors()[i, j]
            frames = plane_wave_frames(rng.normal(size=4096), arr.positions, u, fs)
            pmap = srp_map(gcc_set(frames, 16), table, fs)
            _, idx = grid_argmax(pmap.values, grid)
            assert idx == (i, j)

    def test_argmax_scale_invariant(self):
        fs = 16000
        rng = np.random.default_rng(33)
        arr = _toy_array(3)
        grid = SphericalGrid(6, 12)
        table = delay_table(arr, grid)
        frames = rng.normal(size=(3, 1024))
        m1 = srp_map(gcc_set(frames, 16), table, fs)
        m2 = srp_map(gcc_set(frames * 57.0, 16), table, fs)
        assert grid_argmax(m1.values, grid)[1] == grid_argmax(m2.values, grid)[1]
        np.testing.assert_allclose(m1.values, m2.values, atol=1e-6)

    def test_lag_range_too_small(self):
        arr = MicArray(positions=np.array([[0.5, 0, 0], [-0.5, 0, 0]]), name="wide")
        grid = SphericalGrid(4, 8)
        table = delay_table(arr, grid)
        frames = np.random.default_rng(9).normal(size=(2, 512))
        with pytest.raises(LagRangeTooSmall):
            srp_map(gcc_set(frames, 4), table, 16000)

    def test_default_lag_range_nao(self):
        from srptrack.geometry import default_array

        assert default_lag_range(default_array(), 16000) == 6


class TestNormalizeMap:
    def test_simple_values(self):
        from srptrack.srpfeat import PowerMap

        out = normalize_map(PowerMap(values=np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_allclose(out.values, [[-1.0, 0.0, 1.0]])
        assert out.normalized

    def test_constant_map_all_zero(self):
        from srptrack.srpfeat import PowerMap

        out = normalize_map(PowerMap(values=np.full((4, 8), 2.5)))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_peak_is_one_and_mean_zero(self):
        from srptrack.srpfeat import PowerMap

        rng = np.random.default_rng(10)
        for _ in range(50):
            out = normalize_map(PowerMap(values=rng.normal(size=(4, 8))))
            assert np.max(np.abs(out.values)) == pytest.approx(1.0)
            assert abs(out.values.mean()) < 1e-6 * np.max(np.abs(out.values))


class TestEnergyVad:
    def test_all_zero_frame_silent(self):
        cfg = FramingConfig(K=64, hop=32, fs=1000)
        sig = np.zeros((1, 256))
        assert not EnergyVad().mask(sig, cfg).any()

    def test_burst_detected(self):
        cfg = FramingConfig(K=64, hop=64, fs=1000)
        rng = np.random.default_rng(11)
        sig = np.zeros((1, 64 * 4))
        sig[0, 128:192] = rng.normal(size=64)
        mask = EnergyVad().mask(sig, cfg)
        assert mask[2]
        assert not mask[0] and not mask[1] and not mask[3]

    def test_causal_running_max(self):
        vad = EnergyVad(abs_floor=0.0, rel_threshold=0.5)
        rms = np.array([1.0, 0.4, 0.6, 2.0, 0.9])
        mask = vad.mask_from_rms(rms)
        np.testing.assert_array_equal(mask, [True, False, True, True, False])


class TestAssembleInput:
    def _maps(self, grid, peak_cells):
        maps = []
        for (i, j) in peak_cells:
            m = np.zeros(grid.shape)
            m[i, j] = 1.0
            m -= m.mean()
            m /= np.max(np.abs(m))
            maps.append(m)
        return np.stack(maps)

    def test_all_silent_all_zero(self):
        grid = SphericalGrid(4, 8)
        maps = self._maps(grid, [(1, 2), (2, 3)])
        tensor = assemble_input(maps, np.array([False, False]), grid)
        np.testing.assert_array_equal(tensor.data, 0.0)

    def test_argmax_channels(self):
        grid = SphericalGrid(3, 4)
        # theta = pi/2 is row 1; phi = 0 is column 2
        maps = self._maps(grid, [(1, 2)])
        tensor = assemble_input(maps, np.array([True]), grid)
        np.testing.assert_allclose(tensor.data[1, 0], 0.5)
        np.testing.assert_allclose(tensor.data[2, 0], 0.5)
        np.testing.assert_allclose(tensor.data[0, 0], maps[0])

    def test_channels_in_unit_range(self):
        grid = SphericalGrid(8, 16)
        rng = np.random.default_rng(12)
        maps = rng.normal(size=(6,) + grid.shape)
        tensor = assemble_input(maps, np.ones(6, dtype=bool), grid)
        assert tensor.data[1].min() >= 0.0 and tensor.data[1].max() <= 1.0
        assert tensor.data[2].min() >= 0.0 and tensor.data[2].max() <= 1.0

    def test_tensor_shape_16x32(self):
        grid = SphericalGrid(16, 32)
        maps = np.zeros((103,) + grid.shape)
        tensor = assemble_input(maps, np.ones(103, dtype=bool), grid)
        assert tensor.data.shape == (3, 103, 16, 32)


class TestFeatureDump:
    def test_round_trip(self, tmp_path):
        grid = SphericalGrid(4, 8)
        cfg = FramingConfig()
        rng = np.random.default_rng(13)
        maps = rng.normal(size=(5,) + grid.shape).astype(np.float32).astype(float)
        vad = np.array([True, False, True, True, False])
        tensor = assemble_input(maps, vad, grid)
        path = tmp_path / "feat.srpm"
        save_features(path, tensor, grid, cfg)
        back, grid2, cfg2 = load_features(path)
        np.testing.assert_allclose(back.data, tensor.data, atol=1e-7)
        np.testing.assert_array_equal(back.vad, vad)
        assert grid2.shape == grid.shape
        assert cfg2 == cfg

    def test_truncated_rejected(self, tmp_path):
        grid = SphericalGrid(4, 8)
        cfg = FramingConfig()
        tensor = assemble_input(np.zeros((2,) + grid.shape), np.ones(2, dtype=bool), grid)
        path = tmp_path / "feat.srpm"
        save_features(path, tensor, grid, cfg)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            load_features(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "feat.srpm"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError):
            load_features(path)


class TestComputePowerMaps:
    def test_frame_count_and_argmax_stability(self):
        fs = 16000
        rng = np.random.default_rng(14)
        arr = _toy_array(4)
        grid = SphericalGrid(8, 16)
        table = delay_table(arr, grid)
        u = grid.unit_vectors()[3, 5]
        cfg = FramingConfig(K=1024, hop=768, fs=fs)
        dry = rng.normal(size=4096)
        channels = plane_wave_frames(dry, arr.positions, u, fs)
        maps = compute_power_maps(channels, table, cfg)
        assert len(maps) == cfg.n_frames(4096)
        for pmap in maps:
            _, idx = grid_argmax(pmap.values, grid)
            assert idx == (3, 5)
