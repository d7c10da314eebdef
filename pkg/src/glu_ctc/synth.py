"""Synthetic polyphonic clips with exact strong labels.

Each class is a simple synthetic sound (tone, chirp, band-limited noise or
amplitude-modulated tone) kept in its own frequency region so the tagging
task is learnable.  Sequential and weak labels are derived from the strong
labels, never annotated separately.
"""

import csv
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadTemplateError, PlacementFailed
from .features import write_wav
from .labels import (ClassTable, StrongLabel, sequential_from_strong, weak_from_sequential,
                     write_sequential_file, write_strong_file, write_weak_file)

KINDS = ("tone", "chirp", "noise", "am")
FADE_SECONDS = 0.01
MAX_TRIES = 200


@dataclass(frozen=True)
class EventTemplate:
    """How to synthesize one class.

    ``freq`` is the tone/carrier frequency, the chirp start or the lower
    noise band edge; ``freq_end`` is the chirp end or upper band edge.
    ``mod_freq`` is the modulation rate of an ``am`` tone.
    """

    name: str
    kind: str
    freq: float
    freq_end: float | None = None
    amplitude: float = 0.3
    mod_freq: float = 4.0


@dataclass(frozen=True)
class ClipSpec:
    clip_seconds: float = 4.0
    sample_rate: int = 8000
    min_events: int = 1
    max_events: int = 3
    min_duration: float = 0.5
    max_duration: float = 1.5
    allow_overlap: bool = True
    noise_dbfs: float = -30.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_events <= self.max_events:
            raise ValueError("need 1 <= min_events <= max_events")
        if not 0 < self.min_duration <= self.max_duration <= self.clip_seconds:
            raise ValueError("event durations must fit in the clip")


DESK_TEMPLATES = (
    EventTemplate("tone", "tone", 440.0),
    EventTemplate("chirp", "chirp", 1000.0, 2000.0),
    EventTemplate("noise", "noise", 3000.0, 3950.0),
    EventTemplate("am_tone", "am", 600.0, mod_freq=8.0),
)

# ten household sound classes at 16 kHz, each in its own band
FULL_TEMPLATES = (
    EventTemplate("Speech", "am", 300.0, mod_freq=5.0),
    EventTemplate("Dog", "tone", 550.0),
    EventTemplate("Cat", "chirp", 800.0, 1100.0),
    EventTemplate("Alarm_bell_ringing", "am", 1400.0, mod_freq=6.0),
    EventTemplate("Dishes", "noise", 1800.0, 2300.0),
    EventTemplate("Blender", "noise", 2700.0, 3300.0),
    EventTemplate("Vacuum_cleaner", "chirp", 3700.0, 4100.0),
    EventTemplate("Electric_shaver_toothbrush", "am", 4400.0, mod_freq=30.0),
    EventTemplate("Running_water", "noise", 4900.0, 5800.0),
    EventTemplate("Frying", "noise", 6500.0, 7600.0),
)

PRESETS = {
    "desk": (ClipSpec(), DESK_TEMPLATES),
    "full": (ClipSpec(clip_seconds=10.0, sample_rate=16000, max_events=4, max_duration=3.0),
             FULL_TEMPLATES),
}


def class_table(templates):
    return ClassTable(t.name for t in templates)


def check_template(template, sample_rate):
    nyquist = sample_rate / 2
    if template.kind not in KINDS:
        raise BadTemplateError(f"{template.name}: unknown kind {template.kind!r}")
    freqs = [template.freq] + ([template.freq_end] if template.freq_end is not None else [])
    if template.kind in ("chirp", "noise") and template.freq_end is None:
        raise BadTemplateError(f"{template.name}: {template.kind} needs freq_end")
    if any(not 0 < f < nyquist for f in freqs):
        raise BadTemplateError(f"{template.name}: frequencies must lie in (0, {nyquist})")
    if template.kind == "noise" and template.freq_end <= template.freq:
        raise BadTemplateError(f"{template.name}: empty noise band")
    if not 0 <= template.amplitude <= 1:
        raise BadTemplateError(f"{template.name}: amplitude must lie in [0, 1]")


def fade(n_samples, sample_rate):
    """Raised-cosine envelope with 10 ms ramps at both ends."""
    n_fade = min(int(round(FADE_SECONDS * sample_rate)), n_samples // 2)
    env = np.ones(n_samples)
    if n_fade:
        ramp = 0.5 * (1.0 - np.cos(np.pi * (np.arange(n_fade) + 0.5) / n_fade))
        env[:n_fade] = ramp
        env[n_samples - n_fade:] = ramp[::-1]
    return env


def render_event(template, duration, sample_rate, rng=None):
    """Synthesize ``duration`` seconds of ``template``, peak at most its amplitude."""
    check_template(template, sample_rate)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    if template.kind == "tone":
        wave_ = np.sin(2 * np.pi * template.freq * t)
    elif template.kind == "chirp":
        rate = (template.freq_end - template.freq) / max(duration, 1e-9)
        wave_ = np.sin(2 * np.pi * (template.freq * t + 0.5 * rate * t * t))
    elif template.kind == "am":
        carrier = np.sin(2 * np.pi * template.freq * t)
        wave_ = carrier * 0.5 * (1.0 + np.sin(2 * np.pi * template.mod_freq * t))
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spectrum[(freqs < template.freq) | (freqs > template.freq_end)] = 0
        wave_ = np.fft.irfft(spectrum, n)
        peak = np.abs(wave_).max()
        wave_ = wave_ / peak if peak > 0 else wave_
    return template.amplitude * wave_ * fade(n, sample_rate)


@dataclass
class ClipRecord:
    clip_id: str
    samples: np.ndarray
    sample_rate: int
    strong: list
    sequential: list = field(default_factory=list)
    weak: set = field(default_factory=set)


def _conflicts(placed, cls, start, stop, allow_overlap):
    for other_cls, s, e in placed:
        if s < stop and start < e and (other_cls == cls or not allow_overlap):
            return True
    return False


def generate_clip(spec, templates, rng, clip_id="clip"):
    """Place random events, mix them over white noise and derive all labels."""
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr))
    table = class_table(templates)
    n_events = int(rng.integers(spec.min_events, spec.max_events + 1))
    placed = []
    for _ in range(n_events):
        for _ in range(MAX_TRIES):
            cls = int(rng.integers(len(templates)))
            length = int(round(rng.uniform(spec.min_duration, spec.max_duration) * sr))
            start = int(rng.integers(0, n - length + 1))
            if not _conflicts(placed, cls, start, start + length, spec.allow_overlap):
                placed.append((cls, start, start + length))
                break
        else:
            raise PlacementFailed(f"{clip_id}: no room for event {len(placed) + 1} "
                                  f"after {MAX_TRIES} tries")
    placed.sort(key=lambda p: (p[1], p[0]))

    noise_rms = 10.0 ** (spec.noise_dbfs / 20.0)
    mix = noise_rms * rng.standard_normal(n)
    for cls, start, stop in placed:
        mix[start:stop] += render_event(templates[cls], (stop - start) / sr, sr, rng)
    mix = np.clip(mix, -1.0, 1.0)

    strong = [StrongLabel(cls, start / sr, stop / sr) for cls, start, stop in placed]
    seq = sequential_from_strong(strong, table, spec.clip_seconds)
    return ClipRecord(clip_id, mix, sr, strong, seq, weak_from_sequential(seq))


def clip_rng(seed, clip_id):
    """Per-clip generator from ``(seed, crc32(clip_id))``; independent of order."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(clip_id.encode())]))


def _generate_one(args):
    spec, templates, seed, clip_id = args
    return generate_clip(spec, templates, clip_rng(seed, clip_id), clip_id)


def generate_dataset(out_dir, spec, templates, n_clips, seed, prefix="clip", workers=1):
    """Write ``n_clips`` WAVs plus strong/sequential/weak label files and a manifest.

    Layout::

        out_dir/audio/<clip_id>.wav
        out_dir/strong.tsv  sequential.tsv  weak.tsv  manifest.csv
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    for t in templates:
        check_template(t, spec.sample_rate)
    width = max(4, len(str(n_clips - 1)))
    jobs = [(spec, templates, seed, f"{prefix}_{i:0{width}d}") for i in range(n_clips)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_generate_one, jobs))
    else:
        records = [_generate_one(job) for job in jobs]

    table = class_table(templates)
    for rec in records:
        write_wav(out_dir / "audio" / f"{rec.clip_id}.wav", rec.samples, rec.sample_rate)
    write_strong_file(out_dir / "strong.tsv", [(r.clip_id, r.strong) for r in records], table)
    write_sequential_file(out_dir / "sequential.tsv", [(r.clip_id, r.sequential) for r in records],
                          table)
    write_weak_file(out_dir / "weak.tsv", [(r.clip_id, r.weak) for r in records], table)
    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "n_events", "classes"])
        for r in records:
            writer.writerow([r.clip_id, len(r.strong), ";".join(table.names[k] for k in sorted(r.weak))])
    return records
