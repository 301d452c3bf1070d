"""WAV/PCM16 ingestion and waveform preprocessing.

Only the canonical RIFF/WAVE layout with a PCM ``fmt `` chunk and 16-bit
little-endian samples is accepted. Anything else is rejected with a typed
error rather than guessed at.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, MalformedHeader, UnsupportedFormat

CANONICAL_RATE = 16000
PCM_FORMAT = 1
STANDARDIZE_EPS = 1e-5


@dataclass(frozen=True)
class Waveform:
    sample_rate: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.ascontiguousarray(self.samples, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


def _chunks(data: bytes):
    """Yield (chunk_id, payload) pairs after the 12-byte RIFF preamble."""
    pos = 12
    end = len(data)
    while pos < end:
        if end - pos < 8:
            raise MalformedHeader(f"truncated chunk header at offset {pos}")
        cid, size = struct.unpack_from("<4sI", data, pos)
        pos += 8
        if size > end - pos:
            raise MalformedHeader(
                f"chunk {cid!r} declares {size} bytes but only {end - pos} remain"
            )
        yield cid, data[pos:pos + size]
        # chunks are word aligned
        pos += size + (size & 1)


def parse_wav(data: bytes) -> Waveform:
    """Decode a PCM16 RIFF/WAVE byte string into a mono :class:`Waveform`.

    Stereo frames are averaged. Unknown chunks are skipped.
    """
    data = bytes(data)
    if len(data) < 12:
        raise MalformedHeader("file shorter than the RIFF preamble")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise MalformedHeader("missing RIFF/WAVE magic")

    fmt = None
    for cid, payload in _chunks(data):
        if cid == b"fmt ":
            if len(payload) < 16:
                raise MalformedHeader("fmt chunk shorter than 16 bytes")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", payload, 0)
            if tag != PCM_FORMAT:
                raise UnsupportedFormat(f"format code {tag} is not PCM")
            if bits != 16:
                raise UnsupportedFormat(f"{bits}-bit samples are not supported")
            if channels not in (1, 2):
                raise UnsupportedFormat(f"{channels} channels are not supported")
            if rate == 0:
                raise MalformedHeader("sample rate is zero")
            fmt = (channels, rate)
        elif cid == b"data":
            if fmt is None:
                raise MalformedHeader("data chunk precedes fmt chunk")
            channels, rate = fmt
            n_frames = len(payload) // (2 * channels)
            pcm = np.frombuffer(payload, dtype="<i2", count=n_frames * channels)
            pcm = pcm.astype(np.float64).reshape(n_frames, channels)
            mono = pcm.mean(axis=1) / 32768.0
            return Waveform(rate, mono.astype(np.float32))
    if fmt is None:
        raise MalformedHeader("no fmt chunk")
    raise MalformedHeader("no data chunk")


def write_wav(w: Waveform) -> bytes:
    """Encode as 16-bit mono PCM; samples are clamped to [-1, 1] first."""
    x = np.clip(w.samples.astype(np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, PCM_FORMAT, 1, w.sample_rate, w.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    return header + pcm


def read_wav_file(path) -> Waveform:
    with open(path, "rb") as fh:
        return parse_wav(fh.read())


def write_wav_file(path, w: Waveform) -> None:
    with open(path, "wb") as fh:
        fh.write(write_wav(w))


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.sample_rate, w.samples.copy())
    n = len(w)
    if n < 2:
        raise EmptyInput("need at least two samples to resample")
    n_out = (n * target_rate) // w.sample_rate
    pos = np.arange(n_out, dtype=np.float64) * (w.sample_rate / target_rate)
    # positions past the last sample hold the final value
    out = np.interp(pos, np.arange(n, dtype=np.float64), w.samples.astype(np.float64))
    return Waveform(target_rate, out.astype(np.float32))


def standardize(w: Waveform) -> Waveform:
    """Zero-mean, unit-variance copy. The result is a model input, not audio."""
    if len(w) == 0:
        raise EmptyInput("cannot standardize an empty waveform")
    x = w.samples.astype(np.float64)
    out = (x - x.mean()) / np.sqrt(x.var() + STANDARDIZE_EPS)
    return Waveform(w.sample_rate, out.astype(np.float32))


def load_for_model(data: bytes, rate: int = CANONICAL_RATE) -> Waveform:
    """parse -> resample to ``rate`` -> standardize."""
    w = parse_wav(data)
    if w.sample_rate != rate:
        w = resample_linear(w, rate)
    return standardize(w)
