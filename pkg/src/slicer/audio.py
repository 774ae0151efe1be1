"""Waveform synthesis and 128-bin log-mel spectrogram extraction.

A log-mel spectrogram is a plain float64 array of shape (n_mels, frames) in
natural-log mel energy units, floored at log(FLOOR_EPSILON). The toy corpus
stands in for a real unlabeled audio collection: four synthetic classes with
heavy nuisance variation (gain over a ~34 dB range, additive noise floor,
overlapping frequency ranges) so that frozen random features do not trivially
separate them.
"""

import struct
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
STFT_WINDOW = 1024
STFT_HOP = 160
N_MELS = 128
FLOOR_EPSILON = 1e-10

CLASS_NAMES = ("tone", "chirp", "noise_band", "am_tone")


class SpectrogramFileError(ValueError):
    """Malformed SMF1 file (bad magic, wrong sizes, truncation)."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


def _hann(window):
    # periodic Hann, the usual STFT analysis window
    n = np.arange(window)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window)


def stft(wave: Waveform, window: int = STFT_WINDOW, hop: int = STFT_HOP) -> np.ndarray:
    """Complex spectrogram of shape (window//2 + 1, frames).

    Frame t covers samples [t*hop, t*hop + window); frames = floor((len -
    window)/hop) + 1. The window length must be a power of two.
    """
    if window <= 0 or (window & (window - 1)) != 0:
        raise ValueError(f"window must be a power of two, got {window}")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    samples = wave.samples
    if samples.size < window:
        raise ValueError(
            f"waveform of {samples.size} samples shorter than one window ({window})")
    frames = (samples.size - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(frames)[:, None]
    segments = samples[idx] * _hann(window)[None, :]
    return np.fft.rfft(segments, axis=1).T.copy()


def mel_scale(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def inverse_mel_scale(mels):
    return 700.0 * (10.0 ** (np.asarray(mels, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_bins: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters, linearly spaced on the mel scale, over rfft bins."""
    window = (fft_bins - 1) * 2
    bin_freqs = np.arange(fft_bins) * sample_rate / window
    points = inverse_mel_scale(
        np.linspace(mel_scale(0.0), mel_scale(sample_rate / 2.0), n_mels + 2))
    lower, center, upper = points[:-2], points[1:-1], points[2:]
    rising = (bin_freqs[None, :] - lower[:, None]) / (center - lower)[:, None]
    falling = (upper[:, None] - bin_freqs[None, :]) / (upper - center)[:, None]
    return np.clip(np.minimum(rising, falling), 0.0, None)


def logmel(spec_mag: np.ndarray, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Project magnitudes through the mel filterbank and log-compress.

    Output is (n_mels, frames); every value is >= log(FLOOR_EPSILON).
    """
    spec_mag = np.asarray(spec_mag, dtype=np.float64)
    if spec_mag.ndim != 2:
        raise ValueError(f"expected 2-d magnitude matrix, got shape {spec_mag.shape}")
    if np.any(spec_mag < 0):
        raise ValueError("magnitudes must be non-negative")
    fb = mel_filterbank(sample_rate, spec_mag.shape[0], n_mels)
    return np.log(np.maximum(fb @ spec_mag, FLOOR_EPSILON))


def waveform_to_logmel(wave: Waveform, window: int = STFT_WINDOW,
                       hop: int = STFT_HOP, n_mels: int = N_MELS) -> np.ndarray:
    return logmel(np.abs(stft(wave, window, hop)), wave.sample_rate, n_mels)


# ---------------------------------------------------------------------------
# synthetic corpus


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _rms_normalize(sig):
    rms = np.sqrt(np.mean(sig * sig))
    return sig / rms if rms > 0 else sig


def _synth_clip(rng, class_id, n, sample_rate):
    t = np.arange(n) / sample_rate
    if class_id == 0:  # tone: stationary sinusoid
        f0 = _log_uniform(rng, 200.0, 4000.0)
        sig = np.sin(2.0 * np.pi * f0 * t + rng.uniform(0.0, 2.0 * np.pi))
    elif class_id == 1:  # chirp: monotone sweep, narrow enough to blur into the
        # static footprint of the other classes (movement is the class cue)
        octaves = rng.uniform(0.75, 2.0)
        if rng.random() < 0.5:
            f_start = _log_uniform(rng, 200.0, 4000.0 / 2.0 ** octaves)
            f_end = f_start * 2.0 ** octaves
        else:
            f_start = _log_uniform(rng, 200.0 * 2.0 ** octaves, 4000.0)
            f_end = f_start / 2.0 ** octaves
        phase = 2.0 * np.pi * (f_start * t + 0.5 * (f_end - f_start) * t * t / t[-1])
        sig = np.sin(phase + rng.uniform(0.0, 2.0 * np.pi))
    elif class_id == 2:  # noise_band: band-limited noise, down to near-tonal widths
        fc = _log_uniform(rng, 300.0, 3000.0)
        octaves = rng.uniform(0.08, 1.5)
        f_lo, f_hi = fc * 2.0 ** (-octaves / 2.0), fc * 2.0 ** (octaves / 2.0)
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spectrum[(freqs < f_lo) | (freqs > f_hi)] = 0.0
        sig = np.fft.irfft(spectrum, n)
    elif class_id == 3:  # am_tone: carrier with slow amplitude modulation
        carrier = _log_uniform(rng, 200.0, 4000.0)
        rate = rng.uniform(2.0, 8.0)
        depth = rng.uniform(0.6, 1.0)
        envelope = 1.0 - depth * (0.5 + 0.5 * np.sin(
            2.0 * np.pi * rate * t + rng.uniform(0.0, 2.0 * np.pi)))
        sig = envelope * np.sin(2.0 * np.pi * carrier * t + rng.uniform(0.0, 2.0 * np.pi))
    else:
        raise ValueError(f"unknown class id {class_id}")

    # nuisances: wide random gain and a noise floor at 6..30 dB SNR, so
    # absolute level carries no class information
    gain = 10.0 ** rng.uniform(-2.0, -0.3)
    snr_db = rng.uniform(6.0, 30.0)
    clip = _rms_normalize(sig) * gain
    clip = clip + _rms_normalize(rng.standard_normal(n)) * gain * 10.0 ** (-snr_db / 20.0)
    peak = np.max(np.abs(clip))
    if peak > 0.99:
        clip = clip * (0.99 / peak)
    return clip


def synth_corpus(n_per_class: int, seed: int, sample_rate: int = SAMPLE_RATE,
                 clip_seconds: float = 1.0):
    """Balanced labeled corpus of (Waveform, class id), deterministic under seed.

    Classes: 0 tone, 1 chirp, 2 noise_band, 3 am_tone (see CLASS_NAMES).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n = int(round(sample_rate * clip_seconds))
    corpus = []
    for class_id in range(len(CLASS_NAMES)):
        for _ in range(n_per_class):
            clip = _synth_clip(rng, class_id, n, sample_rate)
            corpus.append((Waveform(clip, sample_rate), class_id))
    return corpus


def corpus_spectrograms(corpus, window: int = STFT_WINDOW, hop: int = STFT_HOP,
                        n_mels: int = N_MELS):
    """(log-mel spectrogram, label) pairs for a synthesized corpus."""
    return [(waveform_to_logmel(w, window, hop, n_mels), label) for w, label in corpus]


# ---------------------------------------------------------------------------
# SMF1 spectrogram files

_SMF1_MAGIC = b"SMF1"


def write_smf1(path, spec: np.ndarray) -> None:
    """16-byte header (magic, u32 F, u32 T, u32 reserved, LE) + F*T f64 rows."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2:
        raise SpectrogramFileError(f"spectrogram must be 2-d, got {spec.shape}")
    with open(path, "wb") as fh:
        fh.write(_SMF1_MAGIC)
        fh.write(struct.pack("<III", spec.shape[0], spec.shape[1], 0))
        fh.write(np.ascontiguousarray(spec, dtype="<f8").tobytes())


def read_smf1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise SpectrogramFileError(f"{path}: truncated header")
        if header[:4] != _SMF1_MAGIC:
            raise SpectrogramFileError(f"{path}: bad magic {header[:4]!r}")
        f, t, _ = struct.unpack("<III", header[4:])
        payload = fh.read()
    expected = f * t * 8
    if len(payload) != expected:
        raise SpectrogramFileError(
            f"{path}: expected {expected} payload bytes for {f}x{t}, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(f, t).copy()
