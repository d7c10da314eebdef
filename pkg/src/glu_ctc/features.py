"""Log mel-band energy features, the FMAT matrix format and WAV I/O."""

import struct
import wave
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadMagicError, BadRangeError, EmptySignalError, TruncatedError

LOG_FLOOR = 1e-10
FMAT_MAGIC = b"FMAT"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end settings.

    The hop defaults to 10 s / 240 so that a 10 s clip yields exactly 240
    frames; ``n_frames`` for a clip is its duration divided by the hop.
    """

    sample_rate: int = 16000
    window_seconds: float = 0.064
    hop_seconds: float = 10.0 / 240
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = LOG_FLOOR

    @property
    def window_samples(self):
        return int(round(self.window_seconds * self.sample_rate))

    @property
    def hop_samples(self):
        return int(round(self.hop_seconds * self.sample_rate))

    @property
    def fft_size(self):
        return next_pow2(self.window_samples)

    def n_frames(self, n_samples):
        return max(1, int(round(n_samples / (self.hop_seconds * self.sample_rate))))

    def to_dict(self):
        return asdict(self)


def next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def frame_signal(samples, window, hop, n_frames):
    """Cut ``n_frames`` frames of ``window`` samples, zero-padding the tail."""
    needed = (n_frames - 1) * hop + window
    if len(samples) < needed:
        samples = np.concatenate([samples, np.zeros(needed - len(samples))])
    view = np.lib.stride_tricks.sliding_window_view(samples, window)
    return view[: needed - window + 1 : hop]


def stft_power(samples, sample_rate, window_seconds, hop_seconds, n_frames=None):
    """Hamming-windowed power spectrogram ``|FFT|**2`` of shape ``(T, fft/2 + 1)``.

    The FFT size is the next power of two at or above the window length.
    ``n_frames`` defaults to ``round(duration / hop)``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise EmptySignalError("waveform must be a non-empty 1-D array")
    window = int(round(window_seconds * sample_rate))
    hop = int(round(hop_seconds * sample_rate))
    if n_frames is None:
        n_frames = max(1, int(round(samples.size / (hop_seconds * sample_rate))))
    frames = frame_signal(samples, window, hop, n_frames) * np.hamming(window)
    spec = np.fft.rfft(frames, n=next_pow2(window), axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _mel_points(n_mels, fmin, fmax):
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_centers(n_mels, fmin, fmax):
    """Apex frequencies of the ``n_mels`` triangular filters."""
    return _mel_points(n_mels, fmin, fmax)[1:-1]


def mel_filterbank(sample_rate, fft_size, n_mels, fmin=0.0, fmax=None):
    """Triangular filters, equally spaced in mel, of shape ``(n_mels, fft/2 + 1)``.

    Each triangle peaks at 1 on its centre frequency and reaches 0 at the
    neighbouring centres.
    """
    if fmax is None:
        fmax = sample_rate / 2
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise BadRangeError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got {fmin}, {fmax}")
    points = _mel_points(n_mels, fmin, fmax)
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(samples, cfg=FeatureConfig()):
    """Log mel-band energies ``log(mel @ power + floor)`` of shape ``(T, n_mels)``."""
    power = stft_power(samples, cfg.sample_rate, cfg.window_seconds, cfg.hop_seconds,
                       n_frames=cfg.n_frames(len(samples)))
    bank = mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.fmax)
    return np.log(power @ bank.T + cfg.log_floor)


def write_fmat(path, matrix):
    """Write a 2-D array as ``FMAT`` + rows + cols (uint32 LE) + float32 LE data."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"FMAT holds 2-D matrices, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FMAT_MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_fmat(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != FMAT_MAGIC:
        raise BadMagicError(f"{path}: not an FMAT file")
    if len(data) < _HEADER.size:
        raise TruncatedError(f"{path}: header cut short")
    _, rows, cols = _HEADER.unpack_from(data)
    body = data[_HEADER.size:]
    if len(body) < 4 * rows * cols:
        raise TruncatedError(f"{path}: expected {4 * rows * cols} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4", count=rows * cols).reshape(rows, cols).astype(np.float32)


def read_wav(path):
    """Read 16-bit PCM mono WAV as floats in [-1, 1] and its sample rate."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2 or wf.getnchannels() != 1:
            raise ValueError(f"{path}: only 16-bit PCM mono WAV is supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate


def write_wav(path, samples, sample_rate):
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())
