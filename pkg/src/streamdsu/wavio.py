"""16-bit mono PCM WAV I/O.

Samples are floats on the int16 grid (k / 32768). Writing rounds to that
grid, so any array that already lies on it round-trips exactly.
"""
from __future__ import annotations

import struct
import wave
from pathlib import Path
from typing import BinaryIO

import numpy as np

SAMPLE_RATE = 16000
SCALE = 32768.0


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples, dtype=np.float64) * SCALE), -32768, 32767).astype("<i2")


def quantize(samples: np.ndarray) -> np.ndarray:
    """Snap float samples onto the int16 grid."""
    return to_pcm16(samples).astype(np.float64) / SCALE


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(to_pcm16(samples).tobytes())


def read_wav(path: str | Path, expect_rate: int | None = SAMPLE_RATE) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        if expect_rate is not None and w.getframerate() != expect_rate:
            raise ValueError(f"{path}: sample rate {w.getframerate()} != {expect_rate}")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / SCALE


class PcmReader:
    """Incremental reader for raw or RIFF-wrapped 16-bit PCM from a byte stream.

    A leading RIFF/WAVE header is parsed and skipped; anything else is taken
    as headerless little-endian int16 samples.
    """

    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self._pending = b""
        self._started = False

    def _skip_header(self) -> None:
        self._started = True
        head = self._read_exact(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            self._pending = head
            return
        while True:
            chunk = self._read_exact(8)
            if len(chunk) < 8:
                return
            cid, size = chunk[:4], struct.unpack("<I", chunk[4:])[0]
            if cid == b"data":
                return
            body = self._read_exact(size + (size & 1))
            if cid == b"fmt ":
                fmt, channels, _, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if fmt != 1 or channels != 1 or bits != 16:
                    raise ValueError("stream must be 16-bit mono PCM")

    def _read_exact(self, n: int) -> bytes:
        parts, got = [], 0
        while got < n:
            b = self.stream.read(n - got)
            if not b:
                break
            parts.append(b)
            got += len(b)
        return b"".join(parts)

    def read(self, n_samples: int) -> np.ndarray:
        """Up to ``n_samples`` samples; an empty array means end of stream."""
        if not self._started:
            self._skip_header()
        want = 2 * n_samples - len(self._pending)
        data = self._pending + (self._read_exact(want) if want > 0 else b"")
        usable = min(len(data) - (len(data) & 1), 2 * n_samples)
        self._pending = data[usable:]
        return np.frombuffer(data[:usable], dtype="<i2").astype(np.float64) / SCALE
