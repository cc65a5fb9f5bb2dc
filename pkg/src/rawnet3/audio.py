"""Waveforms, pre-processing, crops, multi-crop views, augmentation and a synthetic corpus."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import lfilter

SAMPLE_RATE = 16000


class AudioError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioError("a waveform is a non-empty mono sequence")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class LabeledUtterance:
    waveform: Waveform
    speaker_id: int | None = None
    path: str | None = None


@dataclass
class SyntheticSpeakerSpec:
    f0: float
    formants: list[float]
    bandwidths: list[float]
    jitter: float
    tilt: float = 0.0

    def __post_init__(self):
        if not 60.0 <= self.f0 <= 400.0:
            raise AudioError(f"f0 {self.f0} outside [60, 400] Hz")
        if max(self.formants) >= SAMPLE_RATE / 2:
            raise AudioError("formants must lie below Nyquist")


@dataclass
class AugmentConfig:
    enabled: bool = True
    snr_range: tuple[float, float] = (5.0, 20.0)
    gain_range: tuple[float, float] = (-6.0, 0.0)

    def __post_init__(self):
        lo, hi = self.snr_range
        if lo > hi:
            raise AudioError(f"snr_range must satisfy lo <= hi, got {self.snr_range}")
        if self.gain_range[0] > self.gain_range[1]:
            raise AudioError(f"gain_range must satisfy lo <= hi, got {self.gain_range}")


@dataclass
class ViewConfig:
    global_seconds: float = 4.0
    local_seconds: float = 2.0
    n_local: int = 5
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.global_seconds <= 0 or self.local_seconds <= 0:
            raise AudioError("view durations must be positive")
        if self.n_local < 1:
            raise AudioError("n_local must be >= 1")


@dataclass
class ViewSet:
    globals: list[Waveform]
    locals: list[Waveform]

    @property
    def all(self) -> list[Waveform]:
        return self.globals + self.locals


# --------------------------------------------------------------------------- WAV I/O


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read 16-bit PCM mono 16 kHz WAV; anything else is rejected."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise AudioError(f"{path}: only 16-bit PCM mono is supported")
        if f.getframerate() != SAMPLE_RATE:
            raise AudioError(f"{path}: sample rate {f.getframerate()} Hz, expected {SAMPLE_RATE}")
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, SAMPLE_RATE)


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def read_manifest(path: str | os.PathLike) -> list[tuple[str, int | None]]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) == 1:
            entries.append((parts[0], None))
        elif len(parts) == 2:
            entries.append((parts[0], int(parts[1])))
        else:
            raise AudioError(f"{path}:{lineno}: expected '<path> [<speaker_id>]'")
    return entries


def write_manifest(path: str | os.PathLike, entries: Iterable[tuple[str, int | None]]) -> None:
    lines = [p if spk is None else f"{p} {spk}" for p, spk in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_corpus(manifest: str | os.PathLike, labeled: bool | None = None) -> list[LabeledUtterance]:
    """Load every utterance listed in a manifest; paths are relative to the manifest."""
    root = Path(manifest).parent
    corpus = []
    for rel, spk in read_manifest(manifest):
        full = root / rel
        if not full.exists():
            raise AudioError(f"missing audio file: {full}")
        if labeled is False:
            spk = None
        elif labeled and spk is None:
            raise AudioError(f"{manifest}: utterance {rel} has no speaker label")
        corpus.append(LabeledUtterance(read_wav(full), spk, rel))
    return corpus


# --------------------------------------------------------------------------- pre-processing


def pre_emphasis(w: Waveform, alpha: float = 0.97) -> Waveform:
    if not 0.0 <= alpha < 1.0:
        raise AudioError("pre-emphasis coefficient must be in [0, 1)")
    x = w.samples
    y = x.copy()
    y[1:] = x[1:] - alpha * x[:-1]
    return Waveform(y, w.sample_rate)


def instance_norm_wave(w: Waveform, eps: float = 1e-5) -> Waveform:
    x = w.samples
    return Waveform((x - x.mean()) / np.sqrt(x.var() + eps), w.sample_rate)


def random_crop(w: Waveform, duration: float, rng: np.random.Generator) -> Waveform:
    """Contiguous crop of ``duration`` seconds; short inputs are tiled first."""
    n = int(round(duration * w.sample_rate))
    x = w.samples
    if x.size < n:
        x = np.tile(x, -(-n // x.size))[:n]
        return Waveform(x, w.sample_rate)
    offset = int(rng.integers(0, x.size - n + 1))
    return Waveform(x[offset : offset + n].copy(), w.sample_rate)


def _draw(bounds: tuple[float, float], rng: np.random.Generator) -> float:
    lo, hi = bounds
    return lo if lo == hi else float(rng.uniform(lo, hi))


def augment(w: Waveform, cfg: AugmentConfig, rng: np.random.Generator) -> Waveform:
    """Additive white noise at a drawn SNR, then a drawn gain; clipped to [-1, 1]."""
    if not cfg.enabled:
        return w
    x = w.samples
    snr_db = _draw(cfg.snr_range, rng)
    gain_db = _draw(cfg.gain_range, rng)
    noise = rng.standard_normal(x.size)
    if np.isfinite(snr_db):
        p_sig = np.mean(x**2)
        p_noise = np.mean(noise**2)
        x = x + noise * np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    x = x * 10.0 ** (gain_db / 20.0)
    return Waveform(np.clip(x, -1.0, 1.0), w.sample_rate)


def make_views(w: Waveform, cfg: ViewConfig, rng: np.random.Generator) -> ViewSet:
    glob = [augment(random_crop(w, cfg.global_seconds, rng), cfg.augment, rng) for _ in range(2)]
    loc = [augment(random_crop(w, cfg.local_seconds, rng), cfg.augment, rng) for _ in range(cfg.n_local)]
    return ViewSet(glob, loc)


# --------------------------------------------------------------------------- synthetic speakers

# Relative formant shifts of a small vowel inventory shared by all speakers.
_VOWELS = np.array(
    [
        [1.00, 1.00, 1.00, 1.00],
        [0.55, 1.55, 1.10, 1.00],
        [1.35, 0.75, 0.95, 1.00],
        [0.60, 0.60, 0.90, 1.00],
        [0.85, 1.25, 1.05, 1.00],
    ]
)


def draw_speaker(rng: np.random.Generator) -> SyntheticSpeakerSpec:
    tract = rng.uniform(0.8, 1.25)
    base = np.array([650.0, 1500.0, 2500.0, 3500.0]) * tract
    formants = base * rng.uniform(0.9, 1.1, size=4)
    return SyntheticSpeakerSpec(
        f0=float(rng.uniform(80.0, 280.0)),
        formants=[float(f) for f in formants],
        bandwidths=[float(b) for b in rng.uniform(60.0, 160.0, size=4)],
        jitter=float(rng.uniform(0.005, 0.03)),
        tilt=float(rng.uniform(0.6, 0.95)),
    )


def _resonator(freq: float, bw: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a


def _peaking_eq(freq: float, gain_db: float, q: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2 * np.pi * freq / sr
    alpha = np.sin(w0) / (2 * q)
    b = np.array([1 + alpha * a_lin, -2 * np.cos(w0), 1 - alpha * a_lin])
    a = np.array([1 + alpha / a_lin, -2 * np.cos(w0), 1 - alpha / a_lin])
    return b / a[0], a / a[0]


def random_channel(x: np.ndarray, rng: np.random.Generator, sr: int = SAMPLE_RATE, bands: int = 2) -> np.ndarray:
    """Colour ``x`` with a few random peaking-EQ sections (a stand-in for microphone/room)."""
    for _ in range(bands):
        freq = float(np.exp(rng.uniform(np.log(150.0), np.log(6000.0))))
        b, a = _peaking_eq(freq, rng.uniform(-9.0, 9.0), rng.uniform(0.7, 2.0), sr)
        x = lfilter(b, a, x)
    return x


def synth_utterance(
    spk: SyntheticSpeakerSpec,
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = SAMPLE_RATE,
    noise_level: float = 0.003,
    f0_spread: float = 0.1,
    channel: bool = True,
) -> Waveform:
    """One utterance: jittered pulse train, vowel-by-vowel formant filtering, random channel, noise."""
    n = int(round(duration * sample_rate))
    # Glottal pulse train with a slow intonation contour and per-period jitter.
    t = np.arange(n) / sample_rate
    f0 = spk.f0 * rng.uniform(1.0 - f0_spread, 1.0 + f0_spread)
    contour = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * t + rng.uniform(0, 2 * np.pi))
    src = np.zeros(n)
    pos = rng.uniform(0, sample_rate / f0)
    while pos < n:
        i = int(pos)
        src[i] += 1.0
        period = sample_rate / (f0 * contour[i])
        pos += period * (1.0 + spk.jitter * rng.standard_normal())
    src = lfilter([1.0], [1.0, -spk.tilt], src)
    src += 0.02 * rng.standard_normal(n)

    # Segment into "syllables", each a vowel from the shared inventory.
    out = np.zeros(n)
    seg = int(0.2 * sample_rate)
    starts = range(0, n, seg)
    formants = np.asarray(spk.formants)
    states = [np.zeros(2) for _ in formants]
    for s in starts:
        chunk = src[s : s + seg]
        shift = _VOWELS[rng.integers(len(_VOWELS))]
        for k, (f, bw) in enumerate(zip(formants * shift, spk.bandwidths)):
            f = min(f, 0.45 * sample_rate)
            b, a = _resonator(f, bw, sample_rate)
            chunk, states[k] = lfilter(b, a, chunk, zi=states[k])
        env = np.hanning(chunk.size + 2)[1:-1] ** 0.5 * rng.uniform(0.5, 1.0)
        out[s : s + seg] = chunk * env
    if channel:
        out = random_channel(out, rng, sample_rate)
    out /= np.max(np.abs(out)) + 1e-12
    out = 0.5 * out + noise_level * rng.standard_normal(n)
    return Waveform(np.clip(out, -1.0, 1.0), sample_rate)


def synth_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    duration: float,
    rng: np.random.Generator | int,
    labeled: bool = True,
) -> list[LabeledUtterance]:
    """Deterministic corpus of formant-synthesized speakers, labels 0..n_speakers-1."""
    if n_speakers < 2:
        raise AudioError("a speaker corpus needs at least 2 speakers")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    speakers = [draw_speaker(rng) for _ in range(n_speakers)]
    corpus = []
    for spk_id, spk in enumerate(speakers):
        for u in range(utts_per_speaker):
            corpus.append(
                LabeledUtterance(
                    synth_utterance(spk, duration, rng),
                    spk_id if labeled else None,
                    f"spk{spk_id:03d}/utt{u:03d}.wav",
                )
            )
    return corpus


def write_corpus(corpus: list[LabeledUtterance], out_dir: str | os.PathLike, labeled: bool = True) -> Path:
    out = Path(out_dir)
    entries = []
    for utt in corpus:
        dest = out / utt.path
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_wav(dest, utt.waveform)
        entries.append((utt.path, utt.speaker_id if labeled else None))
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest
