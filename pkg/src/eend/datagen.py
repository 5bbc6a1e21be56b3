"""Synthetic two-speaker conversations, features, labels and file formats.

The simulator is a deliberately small stand-in for a full conversation
simulator: speakers alternate, turn and pause lengths are exponential, and
some transitions overlap. Features are synthesized directly in log-Mel-like
space (one Gaussian profile per speaker, summed when speakers overlap, plus
isotropic noise) at 10 ms, then stacked and subsampled exactly as real
features would be.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

FRAME_PERIOD = 0.1  # seconds per model frame
BASE_SHIFT = 0.01  # seconds per log-Mel frame
BASE_DIM = 23
STACK = 15
SUBSAMPLE = 10
FEATURE_MAGIC = b"EENDFEAT"
# overlaps cut ``rho * min(adjacent turns) / 2`` with rho ~ U(0.5, 1)
_RHO_LOW, _RHO_HIGH = 0.5, 1.0
MIN_TURN = 0.2


class SimulationError(ValueError):
    """The requested simulation statistics cannot be produced."""


class RttmError(ValueError):
    """Malformed RTTM input."""


@dataclass(frozen=True)
class Segment:
    speaker: str
    onset: float
    duration: float

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class SegmentAnnotation:
    recording_id: str
    entries: list[Segment] = field(default_factory=list)

    def speakers(self) -> list[str]:
        """Speaker ids in order of first appearance."""
        return list(dict.fromkeys(s.speaker for s in sorted(self.entries, key=lambda s: s.onset)))

    def by_speaker(self) -> dict[str, list[tuple[float, float]]]:
        """Merged (onset, offset) intervals per speaker."""
        out: dict[str, list[tuple[float, float]]] = {}
        for spk in self.speakers():
            spans = sorted((s.onset, s.offset) for s in self.entries if s.speaker == spk)
            merged = []
            for a, b in spans:
                if merged and a <= merged[-1][1]:
                    merged[-1] = (merged[-1][0], max(merged[-1][1], b))
                else:
                    merged.append((a, b))
            out[spk] = merged
        return out

    def end(self) -> float:
        return max((s.offset for s in self.entries), default=0.0)


@dataclass
class FeatureSequence:
    data: np.ndarray  # input_dim x T
    recording_id: str = ""
    frame_period: float = FRAME_PERIOD

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]


@dataclass
class SimConfig:
    num_speakers: int = 2
    target_duration: float = 60.0
    mean_turn: float = 3.0
    mean_pause: float = 0.5
    overlap_ratio_target: float = 0.08
    speaker_profile_separation: float = 2.0
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers != 2:
            raise SimulationError("the simulator produces two-speaker conversations only")
        for name in ("target_duration", "mean_turn", "mean_pause", "speaker_profile_separation",
                     "noise_std"):
            if not getattr(self, name) > 0:
                raise SimulationError(f"{name} must be positive")
        if not 0.0 <= self.overlap_ratio_target <= 0.5:
            raise SimulationError("overlap_ratio_target must lie in [0, 0.5]")
        if self.mean_turn <= MIN_TURN:
            raise SimulationError(f"mean_turn must exceed the minimum turn of {MIN_TURN} s")

    def overlap_probability(self) -> float:
        """Chance that a speaker change overlaps, chosen so the expected
        overlapped share of speech time equals ``overlap_ratio_target``."""
        r = self.overlap_ratio_target
        # turns are MIN_TURN + Exp(mean_turn - MIN_TURN); the min of two such turns
        # has mean MIN_TURN + (mean_turn - MIN_TURN) / 2
        mean_min = MIN_TURN + (self.mean_turn - MIN_TURN) / 2
        mean_cut = 0.5 * (_RHO_LOW + _RHO_HIGH) / 2 * mean_min
        # overlap / speech = E[o] / (mean_turn - E[o]) with E[o] = q * mean_cut
        q = r * self.mean_turn / ((1 + r) * mean_cut)
        if q > 1:
            limit = mean_cut / (self.mean_turn - mean_cut)
            raise SimulationError(
                f"overlap target {r} unreachable with these turn statistics (max {limit:.3f})"
            )
        return q


def sample_turns(cfg: SimConfig, rng: np.random.Generator, recording_id: str) -> SegmentAnnotation:
    q = cfg.overlap_probability()
    speakers = [f"{recording_id}_spk{k}" for k in range(cfg.num_speakers)]
    # work in integer 10 ms ticks so boundaries are exact
    total = int(round(cfg.target_duration / BASE_SHIFT))
    tick = lambda sec: int(round(sec / BASE_SHIFT))  # noqa: E731
    start = tick(rng.exponential(cfg.mean_pause))
    who = int(rng.integers(cfg.num_speakers))
    length = tick(MIN_TURN + rng.exponential(cfg.mean_turn - MIN_TURN))
    prev_cut = 0
    turns = []
    while start < total:
        nxt = tick(MIN_TURN + rng.exponential(cfg.mean_turn - MIN_TURN))
        end = start + length
        turns.append((speakers[who], start, min(end, total)))
        if rng.random() < q:
            rho = rng.uniform(_RHO_LOW, _RHO_HIGH)
            cut = int(math.floor(rho * min(length, nxt) / 2))
            # keeps the previous turn of the next speaker from touching it
            cut = min(cut, length - prev_cut - 1)
            cut = max(cut, 0)
            next_start = end - cut
        else:
            cut = 0
            next_start = end + tick(rng.exponential(cfg.mean_pause))
        prev_cut = cut
        start, length, who = next_start, nxt, (who + 1) % cfg.num_speakers
    entries = [
        Segment(spk, round(a * BASE_SHIFT, 6), round((b - a) * BASE_SHIFT, 6))
        for spk, a, b in turns
        if b > a
    ]
    return SegmentAnnotation(recording_id, entries)


def speaker_profiles(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal per-speaker mean vectors with pairwise distance = separation."""
    basis, _ = np.linalg.qr(rng.normal(size=(BASE_DIM, cfg.num_speakers)))
    return basis.T * (cfg.speaker_profile_separation / math.sqrt(2.0))


def simulate_conversation(cfg: SimConfig, recording_id: str | None = None
                          ) -> tuple[SegmentAnnotation, FeatureSequence]:
    """Draw one conversation; bit-reproducible for a given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    recording_id = recording_id or f"sim{cfg.seed:06d}"
    ann = sample_turns(cfg, rng, recording_id)
    profiles = speaker_profiles(cfg, rng)
    n_base = int(round(cfg.target_duration / BASE_SHIFT))
    speakers = [f"{recording_id}_spk{k}" for k in range(cfg.num_speakers)]
    active = labels_from_segments(ann, BASE_SHIFT, n_base, speakers)
    base = profiles.T @ active + cfg.noise_std * rng.normal(size=(BASE_DIM, n_base))
    feats = stack_subsample(base, STACK, SUBSAMPLE)
    return ann, FeatureSequence(feats, recording_id)


# ---------------------------------------------------------------- features


def _mel(f):
    return 1127.0 * np.log1p(np.asarray(f) / 700.0)


def _mel_inv(m):
    return 700.0 * np.expm1(np.asarray(m) / 1127.0)


def mel_filterbank(num_bins: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters equally spaced on the HTK mel scale, shape (bins, n_fft//2+1)."""
    edges = _mel_inv(np.linspace(_mel(0.0), _mel(sample_rate / 2), num_bins + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


def logmel(audio: np.ndarray, sample_rate: int = 8000, num_bins: int = BASE_DIM,
           win_sec: float = 0.025, hop_sec: float = 0.01, floor: float = 1e-10) -> np.ndarray:
    """Log mel-filterbank magnitudes, ``num_bins x T'``.

    Frames are 25 ms Hann windows every 10 ms with no padding, so
    ``T' = 1 + (N - win) // hop`` (98 frames per second of 8 kHz audio).
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size == 0:
        raise ValueError("logmel expects a non-empty mono waveform")
    win = int(round(win_sec * sample_rate))
    hop = int(round(hop_sec * sample_rate))
    if audio.size < win:
        audio = np.pad(audio, (0, win - audio.size))
    n_fft = 1 << (win - 1).bit_length()
    frames = np.lib.stride_tricks.sliding_window_view(audio, win)[::hop]
    spec = np.abs(np.fft.rfft(frames * np.hanning(win), n=n_fft, axis=1))
    fb = mel_filterbank(num_bins, n_fft, sample_rate)
    return np.log(np.maximum(fb @ spec.T, floor))


def stack_subsample(features: np.ndarray, stack: int = STACK, hop_frames: int = SUBSAMPLE) -> np.ndarray:
    """Splice ``stack`` neighbouring frames around every ``hop_frames``-th frame.

    Column t holds frames ``hop*t - ctx .. hop*t + ctx`` (ctx = (stack-1)/2),
    with out-of-range indices clamped to the first/last frame.
    """
    if stack % 2 != 1:
        raise ValueError("stack width must be odd")
    dim, n = features.shape
    ctx = (stack - 1) // 2
    centers = np.arange(0, n, hop_frames)
    idx = np.clip(centers[:, None] + np.arange(-ctx, ctx + 1)[None, :], 0, n - 1)
    # (T, stack, dim) -> (stack*dim, T), each context frame a contiguous block
    return features.T[idx].reshape(len(centers), stack * dim).T.copy()


def labels_from_segments(ann: SegmentAnnotation, frame_period: float, num_frames: int,
                         speaker_order: list[str] | None = None) -> np.ndarray:
    """Binary C x T activity: a frame is active if it intersects any segment."""
    order = speaker_order if speaker_order is not None else ann.speakers()
    index = {s: i for i, s in enumerate(order)}
    labels = np.zeros((len(order), num_frames), dtype=np.float64)
    for seg in ann.entries:
        if seg.speaker not in index:
            raise KeyError(f"speaker {seg.speaker!r} is not in the speaker order")
        # frame t covers [t*fp, (t+1)*fp); round to absorb float noise at boundaries
        first = math.floor(round(seg.onset / frame_period, 6))
        last = math.ceil(round(seg.offset / frame_period, 6))
        first, last = max(first, 0), min(last, num_frames)
        if last > first:
            labels[index[seg.speaker], first:last] = 1.0
    return labels


def segments_from_labels(labels: np.ndarray, frame_period: float, recording_id: str,
                         speakers: list[str]) -> SegmentAnnotation:
    """Maximal runs of active frames become segments."""
    entries = []
    for row, spk in zip(np.asarray(labels) > 0.5, speakers):
        padded = np.concatenate([[False], row, [False]])
        change = np.flatnonzero(padded[1:] != padded[:-1])
        for a, b in zip(change[::2], change[1::2]):
            entries.append(Segment(spk, a * frame_period, (b - a) * frame_period))
    entries.sort(key=lambda s: (s.onset, s.speaker))
    return SegmentAnnotation(recording_id, entries)


# ---------------------------------------------------------------- overlap statistics


def overlap_stats(ann: SegmentAnnotation) -> tuple[float, float]:
    """(overlapped seconds, speech seconds) by an exact boundary sweep."""
    events = []
    for spans in ann.by_speaker().values():
        for a, b in spans:
            events.append((a, 1))
            events.append((b, -1))
    events.sort()
    overlap = speech = 0.0
    active, last = 0, 0.0
    for t, delta in events:
        if active >= 1:
            speech += t - last
        if active >= 2:
            overlap += t - last
        active += delta
        last = t
    return overlap, speech


def overlap_stats_frames(ann: SegmentAnnotation, resolution: float = BASE_SHIFT) -> tuple[float, float]:
    """Frame-counting estimate of :func:`overlap_stats` (exact on a matching grid)."""
    n = int(math.ceil(round(ann.end() / resolution, 6)))
    count = labels_from_segments(ann, resolution, n).sum(axis=0)
    return float((count >= 2).sum() * resolution), float((count >= 1).sum() * resolution)


def overlap_ratio(anns: list[SegmentAnnotation], frames: bool = False) -> float:
    """Dataset-level overlapped share of speech time."""
    fn = overlap_stats_frames if frames else overlap_stats
    ov = sp = 0.0
    for a in anns:
        o, s = fn(a)
        ov += o
        sp += s
    return ov / sp if sp else 0.0


# ---------------------------------------------------------------- RTTM


def _fmt_time(x: float) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def format_rttm(annotations: list[SegmentAnnotation]) -> str:
    lines = []
    for ann in sorted(annotations, key=lambda a: a.recording_id):
        for seg in sorted(ann.entries, key=lambda s: (s.onset, s.speaker)):
            lines.append(
                f"SPEAKER {ann.recording_id} 1 {_fmt_time(seg.onset)} {_fmt_time(seg.duration)} "
                f"<NA> <NA> {seg.speaker} <NA> <NA>"
            )
    return "".join(line + "\n" for line in lines)


def parse_rttm(text: str, source: str = "<rttm>") -> list[SegmentAnnotation]:
    recordings: dict[str, SegmentAnnotation] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmError(f"{source}:{lineno}: expected at least 8 fields, got {len(fields)}")
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError:
            raise RttmError(f"{source}:{lineno}: onset/duration are not numbers") from None
        if onset < 0 or duration < 0 or not math.isfinite(onset + duration):
            raise RttmError(f"{source}:{lineno}: negative or non-finite time")
        rec = recordings.setdefault(fields[1], SegmentAnnotation(fields[1]))
        if duration > 0:
            rec.entries.append(Segment(fields[7], onset, duration))
    return list(recordings.values())


def rttm_write(annotations: list[SegmentAnnotation] | SegmentAnnotation, path):
    if isinstance(annotations, SegmentAnnotation):
        annotations = [annotations]
    Path(path).write_text(format_rttm(annotations))


def rttm_read(path) -> list[SegmentAnnotation]:
    return parse_rttm(Path(path).read_text(), str(path))


# ---------------------------------------------------------------- feature files and manifests


def write_features(path, data: np.ndarray):
    data = np.ascontiguousarray(data, dtype="<f4")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(data.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not an EEND feature file")
    rows, cols = struct.unpack("<QQ", raw[8:24])
    payload = raw[24:]
    if len(payload) != rows * cols * 4:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {rows * cols * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


@dataclass
class ManifestEntry:
    recording_id: str
    feature_path: Path
    rttm_path: Path


def write_manifest(path, entries: list[ManifestEntry]):
    base = Path(path).parent
    with open(path, "w") as fh:
        for e in entries:
            feat = Path(e.feature_path)
            rttm = Path(e.rttm_path)
            feat = feat.relative_to(base) if feat.is_relative_to(base) else feat
            rttm = rttm.relative_to(base) if rttm.is_relative_to(base) else rttm
            fh.write(f"{e.recording_id}\t{feat}\t{rttm}\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Tab- or space-separated ``id feature_path rttm_path`` lines; relative
    paths resolve against the manifest's directory."""
    base = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        rec, feat, rttm = fields
        entries.append(ManifestEntry(rec, base / feat, base / rttm))
    return entries


@dataclass
class Recording:
    recording_id: str
    features: np.ndarray  # input_dim x T
    labels: np.ndarray  # C x T
    speakers: list[str]
    annotation: SegmentAnnotation


def load_recordings(manifest_path, num_speakers: int = 2) -> list[Recording]:
    out = []
    for e in read_manifest(manifest_path):
        feats = read_features(e.feature_path)
        anns = {a.recording_id: a for a in rttm_read(e.rttm_path)}
        ann = anns.get(e.recording_id, SegmentAnnotation(e.recording_id))
        speakers = ann.speakers()
        if len(speakers) > num_speakers:
            raise ValueError(f"{e.recording_id}: {len(speakers)} speakers, model handles {num_speakers}")
        speakers += [f"<none{k}>" for k in range(num_speakers - len(speakers))]
        labels = labels_from_segments(ann, FRAME_PERIOD, feats.shape[1], speakers)
        out.append(Recording(e.recording_id, feats, labels, speakers, ann))
    return out
