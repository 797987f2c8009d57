import numpy as np
import pytest

from streamfuse import frontend as fe
from streamfuse.frontend import FeatureSequence, Waveform

from oracles import mel_matrix_loops, one_pole_group_delay

SR = fe.SAMPLE_RATE


def sine(freq, n=SR, amp=1.0):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SR)


def test_frame_count_formula():
    assert fe.num_frames(16000) == 98
    assert fe.stft(Waveform(np.zeros(16000))).shape == (98, 257)
    with pytest.raises(fe.InputError):
        fe.stft(Waveform(np.zeros(399)))


def test_waveform_contract():
    with pytest.raises(fe.InputError):
        Waveform(np.zeros(1000), sample_rate=8000)


def test_stft_sine_bin_and_zeros():
    spec = np.abs(fe.stft(Waveform(sine(1000.0))))
    assert np.all(np.argmax(spec, axis=1) == round(1000 * 512 / 16000))
    assert not np.any(fe.stft(Waveform(np.zeros(4000))))


def test_mel_filterbank_against_loop_oracle():
    fb = fe.mel_filterbank()
    ref = mel_matrix_loops()
    assert fb.shape == (80, 257)
    assert np.max(np.abs(fb - ref)) < 1e-6
    assert np.all(fb.sum(axis=1) > 0)
    # neighbours share bins wherever a filter is wider than the bin spacing;
    # the lowest filters are narrower than one 31.25 Hz bin
    centres = np.argmax(fb, axis=1)
    wide = [m for m in range(79) if centres[m + 1] - centres[m] >= 2]
    assert len(wide) > 40
    for m in wide:
        assert np.any((fb[m] > 0) & (fb[m + 1] > 0))


def test_silence_hits_log_floor():
    f = fe.extract(Waveform(np.zeros(8000)), "magnitude")
    assert np.all(f.frames[:, :80] == np.float64(np.log(1e-10)))


def test_pitch_on_200hz_sine():
    pitch, f0 = fe.pitch_features(sine(200.0, amp=0.5))
    interior = slice(2, -2)
    assert np.all(pitch[interior, 1] > 0.5)
    assert np.all(np.abs(f0[interior] - 200.0) <= 5.0)
    assert np.allclose(pitch[interior, 0], np.log(f0[interior]))


def test_pitch_unvoiced_uses_running_mean():
    rng = np.random.default_rng(0)
    x = np.concatenate([sine(150.0, 8000, 0.5), 0.01 * rng.standard_normal(8000)])
    pitch, _ = fe.pitch_features(x)
    voiced = pitch[:, 1] >= 0.5
    assert voiced[:10].all()
    mean_logf0 = pitch[voiced, 0].mean()
    tail = pitch[-10:]
    assert np.all(tail[:, 1] < 0.5)
    assert np.allclose(tail[:, 0], mean_logf0, atol=1e-9)


@pytest.mark.parametrize("r", [0.9, 0.97])
@pytest.mark.parametrize("bin_", [20, 48, 100])
def test_group_delay_one_pole_peak(r, bin_):
    # impulse response of a single conjugate-pole resonator
    theta = 2 * np.pi * bin_ / 512
    a1, a2 = -2 * r * np.cos(theta), r * r
    y = np.zeros(fe.WIN)
    for n in range(fe.WIN):
        y[n] = (n == 0) - a1 * (y[n - 1] if n else 0) - a2 * (y[n - 2] if n > 1 else 0)
    tau = fe.group_delay(y[None])[0]
    oracle = one_pole_group_delay(r, theta, np.arange(257) * 2 * np.pi / 512)
    assert int(np.argmax(oracle)) == bin_
    assert abs(int(np.argmax(tau)) - bin_) <= 1


def test_phase_stream_white_noise_and_silence_finite():
    rng = np.random.default_rng(0)
    for x in (rng.standard_normal(4000), np.zeros(4000), np.clip(3 * sine(440.0, 4000), -1, 1)):
        w = Waveform(x)
        f_mag, f_phase = fe.extract(w, "magnitude"), fe.extract(w, "phase")
        assert f_mag.frames.shape == f_phase.frames.shape
        assert f_phase.frames.shape[1] == 83
        assert np.isfinite(f_mag.frames).all() and np.isfinite(f_phase.frames).all()
    assert not np.any(fe.extract(Waveform(np.zeros(4000)), "phase").frames[:, :80])


def test_pitch_columns_shared():
    w = Waveform(sine(180.0, 6000, 0.3))
    a, b = fe.extract(w, "magnitude"), fe.extract(w, "phase")
    assert np.array_equal(a.frames[:, 80:], b.frames[:, 80:])


def test_extraction_is_deterministic():
    x = np.random.default_rng(1).standard_normal(5000)
    for s in fe.STREAMS:
        assert np.array_equal(fe.extract(Waveform(x), s).frames, fe.extract(Waveform(x), s).frames)


def _features(t=60, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSequence(rng.standard_normal((t, 83)), "magnitude", "u")


def test_spec_augment_identity_policies():
    f = _features()
    zero = fe.AugmentPolicy(freq_masks=0, time_masks=0)
    assert np.array_equal(fe.spec_augment(f, np.random.default_rng(0), zero).frames, f.frames)
    widths = fe.AugmentPolicy(max_freq_width=0, max_time_width=0)
    assert np.array_equal(fe.spec_augment(f, np.random.default_rng(0), widths).frames, f.frames)


@pytest.mark.parametrize("seed", range(5))
def test_spec_augment_cells_form_bands(seed):
    f = _features(t=150, seed=seed)
    out, masks = fe.spec_augment(f, np.random.default_rng(seed), return_masks=True)
    changed = out.frames != f.frames
    n_t = f.frames.shape[0]
    assert changed.sum() <= 2 * 15 * n_t + 2 * 20 * 83
    covered = np.zeros_like(changed)
    for axis, start, width in masks:
        if axis == "freq":
            assert width <= 15
            covered[:, start:start + width] = True
        else:
            assert width <= min(20, n_t // 5)
            covered[start:start + width, :] = True
    assert not np.any(changed & ~covered)
    assert out.frames.shape == f.frames.shape


def test_feature_file_round_trip(tmp_path):
    f = FeatureSequence(np.random.default_rng(2).standard_normal((17, 83)).astype(np.float32), "phase", "x")
    path = tmp_path / "x.feat"
    fe.write_features(path, f)
    raw = path.read_bytes()
    assert raw[:8] == b"FEAT0001" and len(raw) == 8 + 9 + 17 * 83 * 4
    g = fe.read_features(path)
    assert g.stream == "phase" and np.array_equal(g.frames, f.frames)
    assert fe.encode_features(g) == raw
    with pytest.raises(fe.InputError):
        fe.decode_features(b"XXXX0001" + raw[8:])


def test_wav_round_trip(tmp_path):
    x = 0.5 * sine(300.0, 1000)
    fe.write_wav(tmp_path / "a.wav", x)
    w = fe.read_wav(tmp_path / "a.wav")
    assert w.sample_rate == SR and np.max(np.abs(w.samples - x)) < 1 / 32767
