"""Feature extraction: log-mel + pitch (magnitude stream) and LPC group delay (phase stream).

Both streams share the 25 ms / 10 ms framing at 16 kHz and have 83 columns:
80 filterbank outputs followed by (log-f0, voicing probability, delta log-f0).
"""
from dataclasses import dataclass
import math
import struct
import wave

import numpy as np

from . import kernels

SAMPLE_RATE = 16000
WIN = 400
HOP = 160
NFFT = 512
NBINS = NFFT // 2 + 1
N_MELS = 80
FMIN, FMAX = 20.0, 7600.0
FEAT_DIM = N_MELS + 3
LOG_FLOOR = 1e-10
PITCH_FMIN, PITCH_FMAX = 60.0, 400.0
LPC_ORDER = 16
PREEMPH = 0.97
BW_GAMMA = 0.994

STREAMS = ("magnitude", "phase")
FEAT_MAGIC = b"FEAT0001"


class InputError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise InputError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise InputError("waveform must be mono")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    stream: str
    utterance_id: str = ""

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")
        if self.frames.ndim != 2 or self.frames.shape[1] != FEAT_DIM:
            raise ValueError(f"features must be T x {FEAT_DIM}, got {self.frames.shape}")

    @property
    def num_frames(self):
        return self.frames.shape[0]


# ------------------------------------------------------------------ framing

def num_frames(n_samples):
    if n_samples < WIN:
        raise InputError(f"waveform shorter than one {WIN}-sample window")
    return (n_samples - WIN) // HOP + 1


def frame_signal(samples):
    """[N] -> [T, 400] without padding."""
    x = np.asarray(samples, dtype=np.float64)
    t = num_frames(len(x))
    idx = np.arange(WIN)[None, :] + HOP * np.arange(t)[:, None]
    return x[idx]


def hann_window():
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WIN) / WIN)


def stft(w):
    """Complex spectrogram [T, 257]: Hann window, 512-point FFT."""
    frames = frame_signal(w.samples) * hann_window()
    return np.fft.rfft(frames, n=NFFT, axis=1)


# ------------------------------------------------------------------ mel

def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_filterbank(n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    """[n_mels, 257] triangular filters, equally spaced on the mel scale.

    Weights are computed from the mel value of each FFT bin's centre frequency.
    """
    edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(NBINS) * SAMPLE_RATE / NFFT)
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel[None, :] - left) / (centre - left)
    down = (right - bin_mel[None, :]) / (right - centre)
    return np.maximum(0.0, np.minimum(up, down))


_FB = None


def _fbank():
    global _FB
    if _FB is None:
        _FB = mel_filterbank()
    return _FB


# ------------------------------------------------------------------ pitch

def pitch_features(samples):
    """[T, 3]: log-f0, voicing probability, delta log-f0 from normalised autocorrelation."""
    frames = frame_signal(samples)
    frames = frames - frames.mean(axis=1, keepdims=True)
    n = WIN
    lo = int(math.floor(SAMPLE_RATE / PITCH_FMAX))
    hi = int(math.ceil(SAMPLE_RATE / PITCH_FMIN))
    spec = np.fft.rfft(frames, n=2 * n, axis=1)
    ac = np.fft.irfft(np.abs(spec) ** 2, n=2 * n, axis=1)[:, : hi + 2]
    csum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(hi + 2)
    head = csum[:, n - lags]            # energy of x[0 : n-L]
    tail = csum[:, -1:] - csum[:, lags]  # energy of x[L : n]
    denom = np.sqrt(head * tail)
    r = np.zeros_like(ac)
    np.divide(ac, denom, out=r, where=denom > 1e-12)

    n_frames = len(frames)
    f0 = np.zeros(n_frames)
    prob = np.zeros(n_frames)
    for t in range(n_frames):
        seg = r[t, lo:hi + 1]
        best = int(np.argmax(seg))
        peak = seg[best]
        if peak <= 0.0:
            continue
        # earliest local maximum close to the global one avoids octave-down errors
        for i in range(1, len(seg) - 1):
            if seg[i] >= 0.95 * peak and seg[i] >= seg[i - 1] and seg[i] >= seg[i + 1]:
                best = i
                break
        lag = float(lo + best)
        k = lo + best
        if 1 <= k < r.shape[1] - 1:
            y0, y1, y2 = r[t, k - 1], r[t, k], r[t, k + 1]
            den = y0 - 2 * y1 + y2
            if den < 0:
                lag += 0.5 * (y0 - y2) / den
        f0[t] = SAMPLE_RATE / lag
        prob[t] = min(1.0, max(0.0, r[t, k])) ** 2

    log_f0 = np.zeros(n_frames)
    running = math.log(math.sqrt(PITCH_FMIN * PITCH_FMAX))
    total, count = 0.0, 0
    for t in range(n_frames):
        if prob[t] >= 0.5 and f0[t] > 0:
            log_f0[t] = math.log(f0[t])
            total += log_f0[t]
            count += 1
            running = total / count
        else:
            log_f0[t] = running
    padded = np.concatenate([log_f0[:1], log_f0, log_f0[-1:]])
    delta = 0.5 * (padded[2:] - padded[:-2])
    return np.stack([log_f0, prob, delta], axis=1), f0


def magnitude_features(spec, w):
    power = np.abs(spec) ** 2
    logmel = np.log(np.maximum(power @ _fbank().T, LOG_FLOOR))
    pitch, _ = pitch_features(w.samples)
    return FeatureSequence(np.concatenate([logmel, pitch], axis=1), "magnitude", w.utterance_id)


# ------------------------------------------------------------------ group delay

def _step_down_stable(a):
    """True if the monic polynomial ``a`` has all roots strictly inside the unit circle."""
    a = np.array(a, dtype=np.float64)
    p = len(a) - 1
    for m in range(p, 0, -1):
        k = a[m]
        if abs(k) >= 1.0:
            return False
        a = (a[: m] - k * a[m:0:-1]) / (1.0 - k * k)
    return True


def lpc(frames, order=LPC_ORDER):
    """Autocorrelation LPC per frame -> (a [T, order+1], zero_energy [T])."""
    n = frames.shape[1]
    r = np.stack([np.einsum("ij,ij->i", frames[:, : n - k], frames[:, k:]) for k in range(order + 1)], axis=1)
    zero = r[:, 0] <= 1e-12 * n
    r = r.copy()
    r[zero] = 0.0
    a, _, refl = kernels.levinson_batch(r, order)
    bad = ~zero & np.any(np.abs(refl) >= 1.0, axis=1)
    powers = BW_GAMMA ** np.arange(order + 1)
    for t in np.flatnonzero(bad):
        coeffs = a[t].copy()
        for _ in range(10000):
            coeffs = coeffs * powers
            if _step_down_stable(coeffs):
                break
        a[t] = coeffs
    a[zero] = 0.0
    a[zero, 0] = 1.0
    return a, zero


def group_delay(frames, order=LPC_ORDER):
    """Group delay (samples) of the all-pole model 1/A(z) at the 257 FFT bins.

    tau(w) = -d/dw phase(1/A) = -Re(B(w) / A(w)) with B = sum_k k a_k e^{-jwk}.
    ``frames`` are pre-processed (pre-emphasised, windowed) [T, N].
    """
    a, zero = lpc(frames, order)
    k = np.arange(order + 1)
    A = np.fft.rfft(a, n=NFFT, axis=1)
    B = np.fft.rfft(a * k, n=NFFT, axis=1)
    tau = -np.real(B * np.conj(A)) / np.maximum(np.abs(A) ** 2, 1e-300)
    tau[zero] = 0.0
    return tau


def preemphasis(frames, coeff=PREEMPH):
    out = frames.copy()
    out[:, 1:] -= coeff * frames[:, :-1]
    out[:, 0] -= coeff * frames[:, 0]
    return out


def phase_features(w, pitch=None):
    """Mel-filtered LPC group delay plus pitch columns (recomputed if not given)."""
    frames = preemphasis(frame_signal(w.samples)) * hann_window()
    tau = group_delay(frames)
    gd = tau @ _fbank().T
    if pitch is None:
        pitch, _ = pitch_features(w.samples)
    return FeatureSequence(np.concatenate([gd, pitch], axis=1), "phase", w.utterance_id)


def extract(w, stream):
    if stream == "magnitude":
        return magnitude_features(stft(w), w)
    if stream == "phase":
        return phase_features(w)
    raise ValueError(f"unknown stream {stream!r}")


# ------------------------------------------------------------------ augmentation

@dataclass
class AugmentPolicy:
    freq_masks: int = 2
    max_freq_width: int = 15
    time_masks: int = 2
    max_time_width: int = 20
    max_time_ratio: float = 0.2


def spec_augment(f, rng, policy=None, return_masks=False):
    """Frequency and time masking; masked cells take the utterance mean."""
    policy = policy or AugmentPolicy()
    x = f.frames.copy()
    n_t, n_f = x.shape
    fill = x.mean()
    masks = []
    for _ in range(policy.freq_masks):
        width = int(rng.integers(0, policy.max_freq_width + 1))
        start = int(rng.integers(0, n_f - width + 1))
        masks.append(("freq", start, width))
    t_cap = min(policy.max_time_width, int(policy.max_time_ratio * n_t))
    for _ in range(policy.time_masks):
        width = int(rng.integers(0, t_cap + 1))
        start = int(rng.integers(0, n_t - width + 1))
        masks.append(("time", start, width))
    for axis, start, width in masks:
        if axis == "freq":
            x[:, start:start + width] = fill
        else:
            x[start:start + width, :] = fill
    out = FeatureSequence(x, f.stream, f.utterance_id)
    return (out, masks) if return_masks else out


# ------------------------------------------------------------------ file formats

def encode_features(f):
    tag = STREAMS.index(f.stream)
    data = np.ascontiguousarray(f.frames, dtype="<f4")
    return FEAT_MAGIC + struct.pack("<IIB", data.shape[0], data.shape[1], tag) + data.tobytes()


def decode_features(buf, utterance_id=""):
    if buf[:8] != FEAT_MAGIC:
        raise InputError("bad feature file magic")
    n_t, n_f, tag = struct.unpack_from("<IIB", buf, 8)
    data = np.frombuffer(buf, dtype="<f4", count=n_t * n_f, offset=17).reshape(n_t, n_f)
    if 17 + 4 * n_t * n_f != len(buf):
        raise InputError("feature file size does not match header")
    return FeatureSequence(data.astype(np.float32), STREAMS[tag], utterance_id)


def write_features(path, f):
    with open(path, "wb") as fh:
        fh.write(encode_features(f))


def read_features(path, utterance_id=""):
    with open(path, "rb") as fh:
        return decode_features(fh.read(), utterance_id)


def read_wav(path, utterance_id=""):
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise InputError(f"{path}: expected mono PCM16")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a readable WAV file ({exc})") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate, utterance_id)


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
