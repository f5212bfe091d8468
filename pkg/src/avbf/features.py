"""Audio and video input features: log Mel filterbanks, context windows, image scaling."""
from __future__ import annotations

import enum
import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
HOP_LEN = 160  # 10 ms
N_FFT = 512
N_MELS = 40
LOG_FLOOR = 1e-10
CONTEXT = 10


class ContextMode(enum.Enum):
    NON_CAUSAL = "noncausal"
    CAUSAL = "causal"

    @property
    def width(self) -> int:
        return 2 * CONTEXT + 1 if self is ContextMode.NON_CAUSAL else CONTEXT + 1

    @classmethod
    def from_flag(cls, causal: bool) -> ContextMode:
        return cls.CAUSAL if causal else cls.NON_CAUSAL


@dataclass(frozen=True)
class AudioWindow:
    """40 x W block of MFB frames, frequency along rows, time along columns."""

    data: np.ndarray
    mode: ContextMode

    def __post_init__(self):
        if self.data.shape != (N_MELS, self.mode.width):
            raise ValueError(f"{self.mode.value} window must be {N_MELS}x{self.mode.width}, got {self.data.shape}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels=N_MELS, fmin=0.0, fmax=SAMPLE_RATE / 2):
    """Center frequency (Hz) of each triangular filter."""
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mels[1:-1])


def mel_filterbank_matrix(n_mels=N_MELS, n_fft=N_FFT, sr=SAMPLE_RATE, fmin=0.0, fmax=None) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) matrix of unit-peak triangles, equally spaced in Mel."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


_FBANK = mel_filterbank_matrix()
_WINDOW = np.hamming(FRAME_LEN)


def mel_filterbank(samples) -> np.ndarray:
    """Log Mel energies (40,) of one 25 ms frame of 16 kHz audio."""
    s = np.asarray(samples, dtype=np.float64)
    if s.shape != (FRAME_LEN,):
        raise ValueError(f"expected {FRAME_LEN} samples, got shape {s.shape}")
    spec = np.abs(np.fft.rfft(s * _WINDOW, n=N_FFT)) ** 2
    return np.log(_FBANK @ spec + LOG_FLOOR)


def frame_signal(signal) -> np.ndarray:
    """Split a signal into overlapping 25 ms frames with a 10 ms hop (trailing partial frame dropped)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size < FRAME_LEN:
        return np.zeros((0, FRAME_LEN))
    n = 1 + (x.size - FRAME_LEN) // HOP_LEN
    return np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::HOP_LEN][:n]


def mfb_stream(signal) -> np.ndarray:
    """(T, 40) log Mel features for a whole signal, computed frame by frame."""
    frames = frame_signal(signal)
    if len(frames) == 0:
        return np.zeros((0, N_MELS))
    spec = np.abs(np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=1)) ** 2
    return np.log(spec @ _FBANK.T + LOG_FLOOR)


def read_wav(path) -> np.ndarray:
    """Mono 16-bit PCM WAV as floats in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ValueError("expected mono 16-bit PCM")
        if fh.getframerate() != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def context_indices(n_frames: int, t: int, mode: ContextMode) -> np.ndarray:
    hi = CONTEXT if mode is ContextMode.NON_CAUSAL else 0
    return np.clip(np.arange(t - CONTEXT, t + hi + 1), 0, n_frames - 1)


def stack_context(stream, t: int, mode: ContextMode) -> AudioWindow:
    """Window of MFB frames around ``t`` with replicated edges."""
    s = np.asarray(stream, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("empty MFB stream")
    return AudioWindow(s[context_indices(len(s), t, mode)].T.copy(), mode)


def context_windows(stream, mode: ContextMode) -> np.ndarray:
    """All windows of a stream at once, shape (T, 40, W)."""
    s = np.asarray(stream)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("empty MFB stream")
    T = len(s)
    idx = np.stack([context_indices(T, t, mode) for t in range(T)])
    return np.transpose(s[idx], (0, 2, 1))


def normalize_image(raw, resolution: int | None = None) -> np.ndarray:
    """Scale a square grayscale crop to [0, 1] by the range of its storage type."""
    a = np.asarray(raw)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square grayscale image, got {a.shape}")
    if resolution is not None and a.shape != (resolution, resolution):
        raise ValueError(f"expected {resolution}x{resolution}, got {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        return a.astype(np.float64) / np.iinfo(a.dtype).max
    if np.issubdtype(a.dtype, np.bool_):
        return a.astype(np.float64)
    return np.clip(a.astype(np.float64), 0.0, 1.0)


def align_video_to_audio(n_video: int, video_fps: float = 60.0, audio_rate: float = 100.0) -> np.ndarray:
    """Index of the MFB frame nearest in time to each video frame."""
    return np.floor(np.arange(n_video) * audio_rate / video_fps + 0.5).astype(np.int64)
