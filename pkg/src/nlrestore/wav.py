"""WAV (RIFF) reading and writing at the float64 boundary."""

from __future__ import annotations

import warnings
import wave
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import Signal

SUPPORTED_BIT_DEPTHS = (16, 24, 32)


class WavError(ValueError):
    """Raised for malformed, truncated or unsupported WAV files."""


def read_wav(path, channel: int | None = None) -> Signal:
    """Read a mono WAV file as a float64 :class:`Signal` in [-1, 1].

    Supports 16/24/32-bit PCM and 32/64-bit float. Multichannel files raise
    unless ``channel`` selects one of them.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            # scipy only warns on truncated data; treat it as fatal
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, wavfile.WavFileWarning, EOFError, OSError) as err:
        raise WavError(f"{path}: cannot read WAV file ({err})") from err
    except Exception as err:  # struct.error and friends on mangled headers
        raise WavError(f"{path}: malformed WAV header ({err})") from err

    if data.ndim == 2:
        if channel is None:
            raise WavError(f"{path}: {data.shape[1]} channels found; select one with channel=")
        if not 0 <= channel < data.shape[1]:
            raise WavError(f"{path}: channel {channel} out of range for {data.shape[1]} channels")
        data = data[:, channel]
    elif channel not in (None, 0):
        raise WavError(f"{path}: mono file has no channel {channel}")

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 2**15
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2**31
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample format {data.dtype}")
    if x.size == 0:
        raise WavError(f"{path}: file contains no samples")
    return Signal(x, int(rate))


def write_wav(path, signal: Signal, bit_depth: int = 32) -> None:
    """Write ``signal`` as 16/24-bit PCM or 32-bit float.

    PCM output is clipped to the representable range; float output that
    would overflow float32 raises :class:`WavError`.
    """
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise WavError(f"unsupported bit depth {bit_depth}; choose one of {SUPPORTED_BIT_DEPTHS}")
    x = signal.samples
    path = Path(path)
    if bit_depth == 32:
        if np.max(np.abs(x), initial=0.0) > np.finfo(np.float32).max:
            raise WavError(f"{path}: samples exceed the float32 range")
        wavfile.write(path, signal.sample_rate, x.astype(np.float32))
    elif bit_depth == 16:
        q = np.clip(np.round(x * 2**15), -(2**15), 2**15 - 1).astype(np.int16)
        wavfile.write(path, signal.sample_rate, q)
    else:
        q = np.clip(np.round(x * 2**23), -(2**23), 2**23 - 1).astype("<i4")
        raw = q.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(3)
            fh.setframerate(signal.sample_rate)
            fh.writeframes(raw)
