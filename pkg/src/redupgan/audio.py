"""Mono 16-bit PCM WAV I/O (stdlib wave module, deterministic output)."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np


class AudioIOError(IOError):
    pass


def write_wav(path, samples, sample_rate):
    """Write float samples in [-1, 1] as mono 16-bit little-endian PCM."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise AudioIOError(f"expected a 1-D buffer, got shape {x.shape}")
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit WAV into float32 in [-1, 1]; returns (samples, rate)."""
    path = Path(path)
    if not path.exists():
        raise AudioIOError(f"audio file not found: {path}")
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise AudioIOError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    return samples, rate


def wav_length(path) -> int:
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes()
