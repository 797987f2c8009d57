"""Synthetic tone corpus and TSV manifests.

Each character is 80 ms of two summed sinusoids at character-specific
frequencies (exact FFT bin centres), characters inside a word are separated
by 10 ms of silence, words by 40 ms. White noise is added at a fixed SNR.
"""
from dataclasses import dataclass
import math
import os
import string

import numpy as np

from .frontend import NFFT, SAMPLE_RATE, write_wav

BIN_HZ = SAMPLE_RATE / NFFT


@dataclass
class SynthSpec:
    alphabet_size: int = 26
    char_ms: int = 80
    char_gap_ms: int = 10
    word_gap_ms: int = 40
    snr_db: float = 20.0
    min_words: int = 3
    max_words: int = 6
    min_word_len: int = 2
    max_word_len: int = 5
    lexicon_size: int = 300
    train: int = 2000
    dev: int = 100
    test: int = 100
    amplitude: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.alphabet_size <= 26:
            raise ValueError("alphabet_size must be in 1..26")


@dataclass
class Utterance:
    id: str
    audio_path: str
    transcript: str


def char_tones(spec):
    """{char: (f1_hz, f2_hz)}; both coordinates are distinct across characters."""
    rng = np.random.default_rng(spec.seed)
    n = spec.alphabet_size
    low = 8 + 2 * rng.permutation(n)
    high = 66 + 3 * rng.permutation(n)
    letters = string.ascii_lowercase[:n]
    return {c: (float(low[i] * BIN_HZ), float(high[i] * BIN_HZ)) for i, c in enumerate(letters)}


def make_lexicon(spec, rng):
    letters = string.ascii_lowercase[: spec.alphabet_size]
    words = []
    seen = set()
    tries = 0
    while len(words) < spec.lexicon_size and tries < 100 * spec.lexicon_size:
        tries += 1
        n = int(rng.integers(spec.min_word_len, spec.max_word_len + 1))
        w = "".join(letters[i] for i in rng.integers(0, len(letters), n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def expected_samples(transcript, spec):
    ms = lambda v: int(round(v * SAMPLE_RATE / 1000))
    words = transcript.split(" ")
    n_chars = sum(len(w) for w in words)
    return (n_chars * ms(spec.char_ms)
            + (n_chars - len(words)) * ms(spec.char_gap_ms)
            + (len(words) - 1) * ms(spec.word_gap_ms))


def render(transcript, tones, spec, rng):
    ms = lambda v: int(round(v * SAMPLE_RATE / 1000))
    n_char = ms(spec.char_ms)
    t = np.arange(n_char) / SAMPLE_RATE
    ramp = ms(5)
    env = np.ones(n_char)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[-ramp:] = env[:ramp][::-1]
    pieces = []
    for wi, word in enumerate(transcript.split(" ")):
        if wi:
            pieces.append(np.zeros(ms(spec.word_gap_ms)))
        for ci, ch in enumerate(word):
            if ci:
                pieces.append(np.zeros(ms(spec.char_gap_ms)))
            f1, f2 = tones[ch]
            pieces.append(spec.amplitude * env * (np.sin(2 * np.pi * f1 * t) + np.sin(2 * np.pi * f2 * t)))
    x = np.concatenate(pieces)
    if math.isfinite(spec.snr_db):
        p_sig = float(np.mean(x ** 2))
        x = x + rng.normal(0.0, math.sqrt(p_sig / 10 ** (spec.snr_db / 10)), len(x))
    return x


def gen_corpus(spec, out_dir):
    """Write WAVs and ``train.tsv``/``dev.tsv``/``test.tsv`` under ``out_dir``."""
    tones = char_tones(spec)
    rng = np.random.default_rng(spec.seed + 1)
    lexicon = make_lexicon(spec, rng)
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    manifests = {}
    for split, count in (("train", spec.train), ("dev", spec.dev), ("test", spec.test)):
        rows = []
        for i in range(count):
            n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
            text = " ".join(lexicon[j] for j in rng.integers(0, len(lexicon), n_words))
            uid = f"{split}{i:05d}"
            rel = f"wav/{uid}.wav"
            write_wav(os.path.join(out_dir, rel), render(text, tones, spec, rng))
            rows.append(Utterance(uid, rel, text))
        path = os.path.join(out_dir, f"{split}.tsv")
        write_manifest(path, rows)
        manifests[split] = path
    with open(os.path.join(out_dir, "lexicon.txt"), "w") as fh:
        fh.write("\n".join(lexicon) + "\n")
    return manifests


def write_manifest(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for u in rows:
            fh.write(f"{u.id}\t{u.audio_path}\t{u.transcript}\n")


def read_manifest(path):
    """Rows with audio paths resolved relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            uid, audio, text = line.split("\t")
            if uid in seen:
                raise ValueError(f"duplicate utterance id {uid!r} in {path}")
            if not text:
                raise ValueError(f"empty transcript for {uid!r}")
            seen.add(uid)
            rows.append(Utterance(uid, os.path.join(base, audio), text))
    return rows
