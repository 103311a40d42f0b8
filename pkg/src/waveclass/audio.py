"""WAV decoding and waveform preprocessing.

The canonical representation downstream of this module is mono float at
22.05 kHz, cut into 1-second windows of 22050 samples, each window
independently normalized by its root-mean-square energy.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DecodeError, UnsupportedFormatError

log = logging.getLogger(__name__)

TARGET_RATE = 22050
SEGMENT_LEN = 22050
RMS_FLOOR = 1e-8

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    """Decoded sample buffer, one row per channel, amplitudes nominally in [-1, 1]."""

    samples: np.ndarray  # [channels, n]
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ContractError(f"AudioClip samples must be [channels, n], got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class Segment:
    """One-second normalized window plus its multi-hot instrument labels."""

    waveform: np.ndarray  # [22050] float32
    labels: np.ndarray  # [11] uint8
    source_track_id: str
    offset_sec: int = 0


def parse_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE container (PCM16 or float32, 1-2 channels).

    Integer samples are scaled to [-1, 1) by dividing by 32768; float samples
    pass through unchanged.
    """
    if len(data) < 12 or data[:4] != b"RIFF":
        raise DecodeError("missing RIFF chunk")
    if data[8:12] != b"WAVE":
        raise DecodeError("RIFF form type is not WAVE")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise DecodeError(f"truncated {cid.decode('latin1').strip()!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise DecodeError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise DecodeError("missing fmt chunk")
    if payload is None:
        raise DecodeError("missing data chunk")

    audio_format, channels, rate, _byte_rate, block_align, bits = fmt
    if audio_format == _WAVE_FORMAT_EXTENSIBLE:
        raise UnsupportedFormatError("WAVE_FORMAT_EXTENSIBLE is not supported")
    if channels not in (1, 2):
        raise UnsupportedFormatError(f"{channels} channels; only mono and stereo are supported")
    if audio_format == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % max(block_align, 1)], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % max(block_align, 1)], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"encoding (format={audio_format}, bits={bits}) is not supported")

    n = len(samples) // channels
    samples = samples[: n * channels].reshape(n, channels).T.copy()
    return AudioClip(samples=samples, sample_rate=rate)


def write_wav(clip: AudioClip, bits: int = 16) -> bytes:
    """Encode a clip as PCM16 (default) or float32 WAV bytes."""
    ch, n = clip.samples.shape
    interleaved = clip.samples.T.reshape(-1)
    if bits == 16:
        ints = np.clip(np.round(interleaved * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        fmt_tag, bytes_per = _WAVE_FORMAT_PCM, 2
    elif bits == 32:
        payload = interleaved.astype("<f4").tobytes()
        fmt_tag, bytes_per = _WAVE_FORMAT_IEEE_FLOAT, 4
    else:
        raise UnsupportedFormatError(f"write_wav supports 16 or 32 bits, got {bits}")
    block_align = ch * bytes_per
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        fmt_tag,
        ch,
        clip.sample_rate,
        clip.sample_rate * block_align,
        block_align,
        bits,
        b"data",
        len(payload),
    )
    return header + payload


def downmix(clip: AudioClip) -> AudioClip:
    """Stereo to mono by the per-sample mean of the channels; mono passes through."""
    if clip.channel_count == 1:
        return clip
    if clip.channel_count == 2:
        return AudioClip(samples=clip.samples.mean(axis=0, keepdims=True), sample_rate=clip.sample_rate)
    raise UnsupportedFormatError(f"cannot downmix {clip.channel_count} channels")


def _design_lowpass(up: int, down: int, taps_per_phase: int = 64, beta: float = 8.6) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for rational resampling by up/down.

    Cutoff sits at 0.95x the target Nyquist; gain `up` compensates the zero
    stuffing. Each polyphase branch is normalized to unit DC gain so constant
    signals pass through exactly.
    """
    n_taps = taps_per_phase * up
    pass_edge = 0.95 / down  # fraction of the upsampled Nyquist
    # Kaiser transition width for this tap count (Kaiser's empirical formula);
    # the -6 dB point sits half a transition above the passband edge so the
    # passband itself stays flat up to pass_edge.
    atten_db = 8.7 + beta / 0.1102
    half_width = (atten_db - 7.95) / (2.285 * n_taps) / (2.0 * np.pi)
    cutoff = min(pass_edge + half_width, 1.0)
    m = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = up * cutoff * np.sinc(cutoff * m) * np.kaiser(n_taps, beta)
    for p in range(up):
        s = h[p::up].sum()
        if s != 0.0:
            h[p::up] /= s
    return h


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Anti-aliased decimation of a mono clip to `target_rate` (<= source rate).

    Windowed-sinc polyphase: Kaiser beta 8.6, 64 taps per phase, cutoff at
    0.95x target Nyquist. Output length is floor(n * target / source).
    """
    if clip.channel_count != 1:
        raise ContractError("resample expects a mono clip; downmix first")
    if target_rate > clip.sample_rate:
        raise ContractError(f"upsampling {clip.sample_rate} -> {target_rate} is out of contract")
    if target_rate == clip.sample_rate:
        return clip

    g = math.gcd(target_rate, clip.sample_rate)
    up = target_rate // g
    down = clip.sample_rate // g
    x = clip.samples[0]
    n_out = (len(x) * up) // down
    if n_out == 0:
        return AudioClip(samples=np.zeros((1, 0)), sample_rate=target_rate)

    h = _design_lowpass(up, down)
    if up == 1:
        y = np.convolve(x, h, mode="same")[::down]
    else:
        x_up = np.zeros(len(x) * up, dtype=np.float64)
        x_up[::up] = x
        y = np.convolve(x_up, h, mode="same")[::down]
    return AudioClip(samples=y[:n_out][None, :], sample_rate=target_rate)


def rms_normalize(signal: np.ndarray, floor: float = RMS_FLOOR) -> np.ndarray:
    """Divide by max(RMS, floor); silence stays silent instead of blowing up."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        raise ContractError("rms_normalize requires a nonempty signal")
    rms = math.sqrt(float(np.mean(signal * signal)))
    return signal / max(rms, floor)


def segment_clip(clip: AudioClip, labels: np.ndarray, track_id: str = "") -> list[Segment]:
    """Cut a 22.05 kHz mono clip into consecutive 1-second segments.

    Each window is RMS-normalized independently and inherits the track labels.
    The sub-second remainder is discarded; clips shorter than one window
    yield an empty list with a warning.
    """
    if clip.channel_count != 1:
        raise ContractError("segment_clip expects a mono clip")
    if clip.sample_rate != TARGET_RATE:
        raise ContractError(f"segment_clip expects {TARGET_RATE} Hz input, got {clip.sample_rate}")
    x = clip.samples[0]
    count = len(x) // SEGMENT_LEN
    if count == 0:
        log.warning("track %s shorter than one segment (%d samples); emitting none", track_id, len(x))
        return []
    labels = np.asarray(labels, dtype=np.uint8)
    out = []
    for i in range(count):
        window = x[i * SEGMENT_LEN : (i + 1) * SEGMENT_LEN]
        out.append(
            Segment(
                waveform=rms_normalize(window).astype(np.float32),
                labels=labels.copy(),
                source_track_id=track_id,
                offset_sec=i,
            )
        )
    return out
