"""Deterministic formant-synthesis corpus with a copying (reduplication) pattern.

Base words are C1 V2 C3 V4 (e.g. "pali"); reduplicated words prefix a copy of
the initial consonant plus a reduced vowel: C1 @ C1 V2 C3 V4 ("p@pali", with @
for the schwa).  Stress always falls on V2, realized as greater amplitude and
duration.  Words with initial [s] occur only as bare forms, which is the point:
downstream experiments probe whether a model trained on this corpus extends
copying to [s]-initial items it has never seen reduplicated.

Synthesis is source-filter: an impulse train or noise source through second-
order resonators, one segment per phone, each segment peak-normalized to a
class amplitude so syllable nuclei are cleanly separable by an energy
envelope.  Everything is a pure function of (config, seed): building the same
corpus twice yields byte-identical audio and manifests.
"""

from __future__ import annotations

import csv
import itertools
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import read_wav, wav_length, write_wav

SCHWA = "ə"  # ə

PHONE_CLASSES = {
    "p": "voiceless-stop", "t": "voiceless-stop", "k": "voiceless-stop",
    "b": "voiced-stop", "d": "voiced-stop", "g": "voiced-stop",
    "v": "fricative",
    "m": "nasal", "n": "nasal",
    "s": "sibilant",
    "l": "liquid-glide", "r": "liquid-glide", "j": "liquid-glide",
    "a": "vowel", "i": "vowel", "u": "vowel", SCHWA: "vowel",
}

VOWELS = ("a", "i", "u", SCHWA)

# Vowel and sonorant formant targets (Hz); two resonances each.
FORMANTS = {
    "a": (800.0, 1200.0),
    "i": (300.0, 2300.0),
    "u": (350.0, 800.0),
    SCHWA: (500.0, 1500.0),
    "l": (400.0, 1050.0),
    "r": (480.0, 1350.0),
    "j": (300.0, 2300.0),
    "m": (250.0, 900.0),
    "n": (280.0, 1100.0),
}

# Stop burst noise center/bandwidth by place (voiced stops share their
# voiceless counterpart's place spectrum).
BURSTS = {
    "p": (700.0, 800.0), "b": (700.0, 800.0),
    "t": (3800.0, 1200.0), "d": (3800.0, 1200.0),
    "k": (1900.0, 900.0), "g": (1900.0, 900.0),
}

ONSETS = ("p", "t", "k", "b", "d", "g", "v", "m", "n")
MEDIALS = ("l", "r", "j")
NUCLEI = ("a", "i", "u")
DEFAULT_EXCLUSIONS = (("t", "i"), ("t", "u"), ("k", "i"))
# Three [s]-items each miss one repetition so the preset token count lands
# on 132 (= 27 * 5 - 3).
DEFAULT_S_SKIPS = ("sala", "suru", "suju")


class CorpusError(ValueError):
    """Ill-formed phone sequence or inconsistent synthesis configuration."""


class DurationOverflowError(CorpusError):
    """The planned item does not fit in the configured slice length."""


class ManifestError(ValueError):
    """Unreadable, inconsistent, or incomplete corpus manifest."""


def phone_class(symbol: str) -> str:
    try:
        return PHONE_CLASSES[symbol]
    except KeyError:
        raise CorpusError(f"unknown phone {symbol!r}") from None


@dataclass(frozen=True)
class Phone:
    symbol: str

    def __post_init__(self):
        phone_class(self.symbol)

    @property
    def klass(self) -> str:
        return PHONE_CLASSES[self.symbol]

    @property
    def is_vowel(self) -> bool:
        return self.symbol in VOWELS


@dataclass
class SynthConfig:
    sample_rate: int = 16000
    slice_len: int = 4096
    f0: float = 140.0
    # Segment durations, milliseconds.
    vowel_ms: float = 40.0
    stressed_scale: float = 1.5
    schwa_ms: float = 28.0
    sonorant_ms: float = 30.0
    closure_ms: float = 16.0
    burst_ms: float = 14.0
    sibilant_ms: float = 72.0
    fricative_ms: float = 30.0
    edge_ms: float = 4.0
    # Peak amplitudes per class.
    vowel_amp: float = 1.0          # stressed; unstressed vowels get half (+6 dB contrast)
    sonorant_amp: float = 0.18
    nasal_amp: float = 0.18
    burst_amp: float = 0.35
    sibilant_amp: float = 0.40
    fricative_amp: float = 0.20
    voicebar_amp: float = 0.05
    # Per-token jitter.
    duration_jitter: float = 0.05
    pitch_jitter: float = 0.02
    # Corpus combinatorics.
    base_reps: int = 2
    redup_reps: int = 2
    s_reps: int = 5
    s_skips: tuple = DEFAULT_S_SKIPS
    exclusions: tuple = DEFAULT_EXCLUSIONS


def paper_preset() -> SynthConfig:
    """Full-length slices (16384 samples, just over a second at 16 kHz)."""
    cfg = SynthConfig(slice_len=16384)
    return replace(cfg, vowel_ms=110.0, schwa_ms=70.0, sonorant_ms=80.0,
                   closure_ms=45.0, burst_ms=24.0, sibilant_ms=160.0,
                   fricative_ms=80.0)


def desk_preset() -> SynthConfig:
    """Compressed segment durations fitting 4096-sample slices."""
    return SynthConfig()


PRESETS = {"desk": desk_preset, "paper": paper_preset}


@dataclass(frozen=True)
class CorpusItem:
    phones: tuple
    reduplicated: bool
    stress_index: int
    audio_path: str
    token_index: int

    def __post_init__(self):
        if self.reduplicated:
            syms = self.phones
            if len(syms) < 6 or syms[0] != syms[2] or syms[1] != SCHWA:
                raise CorpusError(
                    f"reduplicated item {''.join(syms)!r} must copy its onset "
                    "with a reduced vowel")
            if syms[0] == "s":
                raise CorpusError("[s]-initial items are never reduplicated")

    @property
    def phones_str(self) -> str:
        return "".join(self.phones)


@dataclass
class CorpusManifest:
    items: list
    sample_rate: int
    slice_len: int
    seed: int
    root: Path = field(default_factory=Path)

    def audio_file(self, item: CorpusItem) -> Path:
        return self.root / item.audio_path


# ---------------------------------------------------------------------------
# segment synthesis

def _ramp(seg, edge_samples):
    n = len(seg)
    e = min(edge_samples, n // 2)
    if e > 0:
        win = 0.5 - 0.5 * np.cos(np.pi * np.arange(e) / e)
        seg[:e] *= win
        seg[n - e:] *= win[::-1]
    return seg


def _normalize(seg, amp):
    peak = np.max(np.abs(seg))
    if peak > 0:
        seg = seg * (amp / peak)
    return seg


def _impulse_train(n, f0, sr):
    period = max(2, int(round(sr / f0)))
    src = np.zeros(n)
    src[::period] = 1.0
    return src


def _resonator(x, freq, bw, sr):
    dt = 1.0 / sr
    c = -np.exp(-2.0 * np.pi * bw * dt)
    b = 2.0 * np.exp(-np.pi * bw * dt) * np.cos(2.0 * np.pi * freq * dt)
    a = 1.0 - b - c
    return lfilter([a], [1.0, -b, -c], x)


def _voiced_segment(sym, n, f0, sr):
    src = _impulse_train(n, f0, sr)
    f1, f2 = FORMANTS[sym]
    y = _resonator(src, f1, 90.0, sr) + 0.7 * _resonator(src, f2, 120.0, sr)
    return y


def _noise_band(n, center, bw, sr, rng):
    return _resonator(rng.standard_normal(n), center, bw, sr)


def _segment(sym, cfg: SynthConfig, stressed, f0, dur_scale, rng):
    """Synthesize one phone; returns a peak-normalized, edge-ramped buffer."""
    sr = cfg.sample_rate
    ms = lambda v: max(1, int(round(v * dur_scale * sr / 1000.0)))
    edge = int(round(cfg.edge_ms * sr / 1000.0))
    klass = phone_class(sym)
    if klass == "vowel":
        dur = cfg.schwa_ms if sym == SCHWA else cfg.vowel_ms
        amp = cfg.vowel_amp if stressed else 0.5 * cfg.vowel_amp
        if stressed:
            dur *= cfg.stressed_scale
        seg = _normalize(_voiced_segment(sym, ms(dur), f0, sr), amp)
    elif klass == "liquid-glide":
        seg = _normalize(_voiced_segment(sym, ms(cfg.sonorant_ms), f0, sr),
                         cfg.sonorant_amp)
    elif klass == "nasal":
        y = _voiced_segment(sym, ms(cfg.sonorant_ms), f0, sr)
        y = _resonator(y, 300.0, 250.0, sr)  # murmur: kill the upper band
        seg = _normalize(y, cfg.nasal_amp)
    elif klass == "sibilant":
        seg = _normalize(_noise_band(ms(cfg.sibilant_ms), 6000.0, 1500.0, sr, rng),
                         cfg.sibilant_amp)
    elif klass == "fricative":
        n = ms(cfg.fricative_ms)
        voiced = _voiced_segment("u", n, f0, sr)
        noise = _noise_band(n, 3500.0, 1200.0, sr, rng)
        seg = _normalize(_normalize(voiced, 0.6) + _normalize(noise, 0.4),
                         cfg.fricative_amp)
    elif klass in ("voiceless-stop", "voiced-stop"):
        closure = np.zeros(ms(cfg.closure_ms))
        if klass == "voiced-stop":
            closure = _normalize(
                _resonator(_impulse_train(len(closure), f0, sr), 180.0, 80.0, sr),
                cfg.voicebar_amp)
        center, bw = BURSTS[sym]
        burst = _normalize(_noise_band(ms(cfg.burst_ms), center, bw, sr, rng),
                           cfg.burst_amp)
        return np.concatenate([closure, _ramp(burst, edge)])
    else:  # pragma: no cover
        raise CorpusError(f"no synthesis rule for {sym!r}")
    return _ramp(seg, edge)


def _validate_phones(phones):
    syms = [p.symbol if isinstance(p, Phone) else str(p) for p in phones]
    if not syms:
        raise CorpusError("empty phone sequence")
    for s in syms:
        phone_class(s)
    if len(syms) % 2 != 0:
        raise CorpusError(f"expected CV syllables, got odd length {''.join(syms)!r}")
    for i, s in enumerate(syms):
        want_vowel = i % 2 == 1
        if (s in VOWELS) != want_vowel:
            raise CorpusError(
                f"position {i} of {''.join(syms)!r} should be a "
                f"{'vowel' if want_vowel else 'consonant'}")
    return syms


def synth_item(phones, stress_index, cfg: SynthConfig, seed) -> np.ndarray:
    """Synthesize one word; returns exactly ``cfg.slice_len`` samples in [-1, 1].

    ``seed`` may be an int or a ``SeedSequence``; identical inputs give
    byte-identical output.  The stressed syllable (``stress_index``, 0-based)
    gets double amplitude and 1.5x duration.
    """
    syms = _validate_phones(phones)
    n_syll = len(syms) // 2
    if not 0 <= stress_index < n_syll:
        raise CorpusError(f"stress index {stress_index} outside 0..{n_syll - 1}")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    dur_scale = 1.0 + cfg.duration_jitter * rng.uniform(-1.0, 1.0)
    f0 = cfg.f0 * (1.0 + cfg.pitch_jitter * rng.uniform(-1.0, 1.0))
    segments = []
    for i, sym in enumerate(syms):
        stressed = (i // 2 == stress_index) and sym in VOWELS
        segments.append(_segment(sym, cfg, stressed, f0, dur_scale, rng))
    # Overlap-add over the edge ramps so segment joins crossfade smoothly
    # instead of dipping to zero between every pair of phones.
    overlap = int(round(cfg.edge_ms * cfg.sample_rate / 1000.0))
    total = sum(len(s) for s in segments) - overlap * (len(segments) - 1)
    if total > cfg.slice_len:
        raise DurationOverflowError(
            f"item {''.join(syms)!r} needs {total} samples "
            f"but slice_len is {cfg.slice_len}")
    out = np.zeros(cfg.slice_len, dtype=np.float64)
    pos = 0
    for seg in segments:
        out[pos:pos + len(seg)] += seg
        pos += len(seg) - overlap
    np.clip(out, -1.0, 1.0, out=out)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# corpus enumeration

def enumerate_bases(cfg: SynthConfig):
    """All C1 V2 C3 V4 bases over the inventory minus excluded initial CVs."""
    excl = {tuple(e) for e in cfg.exclusions}
    out = []
    for c1, v2, c3, v4 in itertools.product(ONSETS, NUCLEI, MEDIALS, NUCLEI):
        if (c1, v2) in excl:
            continue
        out.append((c1, v2, c3, v4))
    return out


def enumerate_s_bases():
    return [("s", v2, c3, v4)
            for v2, c3, v4 in itertools.product(NUCLEI, MEDIALS, NUCLEI)]


def reduplicate(base: tuple) -> tuple:
    return (base[0], SCHWA) + tuple(base)


def _item_seed(seed, phones_str, reduplicated, token_index):
    return np.random.SeedSequence(
        (seed, zlib.crc32(phones_str.encode("utf-8")), int(reduplicated), token_index))


def _ascii_name(phones_str):
    return phones_str.replace(SCHWA, "@")


def plan_items(cfg: SynthConfig):
    """The (phones, reduplicated, stress_index, token_index) list for a config."""
    plan = []
    for base in enumerate_bases(cfg):
        for tok in range(cfg.base_reps):
            plan.append((base, False, 0, tok))
        redup = reduplicate(base)
        for tok in range(cfg.redup_reps):
            plan.append((redup, True, 1, tok))
    skips = set(cfg.s_skips)
    for base in enumerate_s_bases():
        reps = cfg.s_reps - (1 if "".join(base) in skips else 0)
        for tok in range(reps):
            plan.append((base, False, 0, tok))
    return plan


def build_corpus(cfg: SynthConfig, out_dir, seed: int) -> CorpusManifest:
    """Synthesize every item, write WAVs plus ``manifest.csv``; deterministic."""
    out = Path(out_dir)
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for phones, reduplicated, stress_index, tok in plan_items(cfg):
        phones_str = "".join(phones)
        name = f"{_ascii_name(phones_str)}_{'r' if reduplicated else 'b'}{tok}.wav"
        rel = f"audio/{name}"
        samples = synth_item(phones, stress_index, cfg,
                             _item_seed(seed, phones_str, reduplicated, tok))
        write_wav(out / rel, samples, cfg.sample_rate)
        items.append(CorpusItem(tuple(phones), reduplicated, stress_index, rel, tok))
    manifest = CorpusManifest(items, cfg.sample_rate, cfg.slice_len, seed, root=out)
    save_manifest(manifest, out / "manifest.csv")
    return manifest


MANIFEST_FIELDS = ("path", "phones", "reduplicated", "stress_index", "token_index", "seed")


def save_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for it in manifest.items:
            w.writerow([it.audio_path, it.phones_str, int(it.reduplicated),
                        it.stress_index, it.token_index, manifest.seed])


def load_manifest(path, validate_audio=True) -> CorpusManifest:
    """Parse a manifest CSV; validates schema, parses phones, checks audio."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    items = []
    seeds = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty manifest")
        if tuple(header) != MANIFEST_FIELDS:
            missing = set(MANIFEST_FIELDS) - set(header)
            raise ManifestError(
                f"{path}: bad header; missing field(s) {sorted(missing)}"
                if missing else f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_FIELDS):
                raise ManifestError(
                    f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, "
                    f"got {len(row)}")
            rel, phones_str, redup_s, stress_s, tok_s, seed_s = row
            try:
                reduplicated = bool(int(redup_s))
                stress_index = int(stress_s)
                token_index = int(tok_s)
                seeds.add(int(seed_s))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            phones = tuple(phones_str)
            for sym in phones:
                if sym not in PHONE_CLASSES:
                    raise ManifestError(f"{path}:{lineno}: unknown phone {sym!r}")
            items.append(CorpusItem(phones, reduplicated, stress_index, rel,
                                    token_index))
    if not items:
        raise ManifestError(f"{path}: manifest has no items")
    if len(seeds) != 1:
        raise ManifestError(f"{path}: inconsistent seed column")
    missing = [str(root / it.audio_path) for it in items
               if not (root / it.audio_path).exists()]
    if missing:
        raise ManifestError(
            f"{path}: {len(missing)} audio file(s) missing, e.g. {missing[:3]}")
    first = root / items[0].audio_path
    _, sample_rate = read_wav(first)
    slice_len = wav_length(first)
    if validate_audio:
        for it in items:
            n = wav_length(root / it.audio_path)
            if n != slice_len:
                raise ManifestError(
                    f"{root / it.audio_path}: {n} samples, expected {slice_len}")
    return CorpusManifest(items, sample_rate, slice_len, seeds.pop(), root=root)


def load_audio(manifest: CorpusManifest) -> np.ndarray:
    """All corpus audio as one (n_items, slice_len) float32 array."""
    out = np.empty((len(manifest.items), manifest.slice_len), dtype=np.float32)
    for i, it in enumerate(manifest.items):
        samples, _ = read_wav(manifest.audio_file(it))
        out[i] = samples
    return out
