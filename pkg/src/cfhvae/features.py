"""Log-magnitude spectrogram features and fixed-length segmentation.

Utterances are T x F matrices of natural-log magnitudes (25 ms window, 10 ms
hop by default).  Segments are 20-frame slices (200 ms) of an utterance; that
window is the time scale on which the segmental latent variable lives.

On disk an utterance is a flat binary container:
``"FHVU" | version u32 | T u32 | F u32 | hop_us u32 | T*F float64 LE``.
"""

from __future__ import annotations

import struct
import wave as _wave
from dataclasses import dataclass, field

import numpy as np

SEGMENT_LEN = 20
FLOOR_EPS = 1e-10

_MAGIC = b"FHVU"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class Utterance:
    """Framed feature sequence with speaker and utterance identity."""

    speaker_id: str
    utterance_id: str
    frames: np.ndarray          # (T, F) natural-log magnitudes
    frame_hop: float            # seconds between frames

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"utterance frames must be a nonempty T x F "
                             f"matrix, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"utterance {self.utterance_id!r} has non-finite "
                             "frames")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Segment:
    """Fixed-length slice of an utterance (exactly SEGMENT_LEN frames)."""

    source: tuple[str, str]     # (speaker_id, utterance_id)
    start_frame: int
    frames: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters; Griffin-Lim needs the exact same config back."""

    sample_rate: int
    window: float = 0.025
    hop: float = 0.010
    n_bands: int | None = 40
    floor_eps: float = FLOOR_EPS

    @property
    def win_samples(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop * self.sample_rate))

    @property
    def fft_size(self) -> int:
        n = 1
        while n < self.win_samples:
            n *= 2
        return n

    @property
    def n_raw_bins(self) -> int:
        return self.fft_size // 2 + 1


def _hann(n: int) -> np.ndarray:
    # periodic Hann, the usual analysis/synthesis pair for overlap-add
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame_signal(waveform: np.ndarray, cfg: StftConfig) -> np.ndarray:
    win, hop = cfg.win_samples, cfg.hop_samples
    if waveform.size < win:
        raise ValueError(f"waveform of {waveform.size} samples is shorter "
                         f"than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(waveform, win)[::hop]
    return np.ascontiguousarray(frames)


def stft_complex(waveform: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Windowed complex STFT, shape (T, fft_size // 2 + 1)."""
    waveform = np.asarray(waveform, dtype=np.float64)
    frames = _frame_signal(waveform, cfg) * _hann(cfg.win_samples)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def istft(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_complex`."""
    win, hop = cfg.win_samples, cfg.hop_samples
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :win]
    w = _hann(win)
    n_out = (spec.shape[0] - 1) * hop + win
    num = np.zeros(n_out)
    den = np.zeros(n_out)
    for t in range(spec.shape[0]):
        lo = t * hop
        num[lo:lo + win] += w * frames[t]
        den[lo:lo + win] += w * w
    return num / np.maximum(den, 1e-12)


def _band_reduce(logmag: np.ndarray, n_bands: int) -> np.ndarray:
    groups = np.array_split(np.arange(logmag.shape[1]), n_bands)
    return np.column_stack([logmag[:, g].mean(axis=1) for g in groups])


def stft_log_magnitude(waveform: np.ndarray, sample_rate: int,
                       window: float = 0.025, hop: float = 0.010,
                       n_bands: int | None = 40,
                       floor_eps: float = FLOOR_EPS,
                       speaker_id: str = "", utterance_id: str = "",
                       ) -> Utterance:
    """Waveform -> log-magnitude Utterance.

    T = 1 + floor((len - win_samples) / hop_samples).  Raw bins (F =
    fft_size/2 + 1) when ``n_bands`` is None; otherwise the log magnitudes
    are averaged into ``n_bands`` contiguous bands, which keeps the desk-
    scale pipeline small.  Entries are ln(|STFT| + floor_eps).
    """
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    cfg = StftConfig(sample_rate, window, hop, n_bands, floor_eps)
    mag = np.abs(stft_complex(waveform, cfg))
    logmag = np.log(mag + floor_eps)
    if n_bands is not None:
        if not 1 <= n_bands <= logmag.shape[1]:
            raise ValueError(f"n_bands={n_bands} out of range for "
                             f"{logmag.shape[1]} raw bins")
        logmag = _band_reduce(logmag, n_bands)
    return Utterance(speaker_id, utterance_id, logmag, hop)


def segment_utterance(utt: Utterance, seg_len: int = SEGMENT_LEN,
                      seg_hop: int | None = None) -> list[Segment]:
    """Slice an utterance into fixed-length segments.

    Yields 1 + floor((T - seg_len) / seg_hop) segments starting at frames
    0, seg_hop, 2*seg_hop, ...  Default hop equals seg_len (non-overlapping,
    the evaluation convention); training sampling may pass seg_hop=1.
    """
    if seg_hop is None:
        seg_hop = seg_len
    if seg_len < 1 or seg_hop < 1:
        raise ValueError("seg_len and seg_hop must be positive")
    t = utt.num_frames
    if t < seg_len:
        raise ValueError(f"utterance {utt.utterance_id!r} has {t} frames, "
                         f"fewer than seg_len={seg_len}")
    starts = range(0, t - seg_len + 1, seg_hop)
    src = (utt.speaker_id, utt.utterance_id)
    return [Segment(src, s, utt.frames[s:s + seg_len].copy()) for s in starts]


def segment_starts(num_frames: int, seg_len: int = SEGMENT_LEN,
                   seg_hop: int = 1) -> np.ndarray:
    if num_frames < seg_len:
        raise ValueError(f"{num_frames} frames < seg_len={seg_len}")
    return np.arange(0, num_frames - seg_len + 1, seg_hop)


# -- binary utterance container -------------------------------------------------

def write_utterance(path, utt: Utterance) -> None:
    t, f = utt.frames.shape
    hop_us = int(round(utt.frame_hop * 1e6))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, t, f, hop_us))
        fh.write(np.ascontiguousarray(utt.frames, dtype="<f8").tobytes())


def read_utterance(path, speaker_id: str = "", utterance_id: str = "",
                   ) -> Utterance:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated utterance header")
        magic, version, t, f, hop_us = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = fh.read(8 * t * f)
        if len(data) != 8 * t * f:
            raise ValueError(f"{path}: truncated frame data")
    frames = np.frombuffer(data, dtype="<f8").reshape(t, f)
    return Utterance(speaker_id, utterance_id, frames.copy(), hop_us / 1e6)


# -- 16-bit mono WAV -----------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    with _wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        sr = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, sr


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with _wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
