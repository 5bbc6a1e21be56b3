"""Posterior decoding and diarization error rate scoring."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import median_filter
from scipy.optimize import linear_sum_assignment

from eend.datagen import FRAME_PERIOD, Recording, SegmentAnnotation, segments_from_labels
from eend.model import ModelConfig, forward
from eend.nncore import ParameterStore

DEFAULT_COLLAR = 0.25
MAX_MAPPED_SPEAKERS = 8


@dataclass
class DerReport:
    der: float
    miss: float
    fa: float
    confusion: float
    sad_miss: float
    sad_fa: float
    scored_speech_seconds: float
    # absolute error times, kept so reports can be pooled over recordings
    miss_seconds: float = 0.0
    fa_seconds: float = 0.0
    confusion_seconds: float = 0.0
    sad_miss_seconds: float = 0.0
    sad_fa_seconds: float = 0.0

    @classmethod
    def from_seconds(cls, speech, miss, fa, conf, sad_miss, sad_fa) -> "DerReport":
        def frac(x):
            if speech > 0:
                return x / speech
            return 0.0 if x == 0 else math.inf

        return cls(
            der=frac(miss + fa + conf), miss=frac(miss), fa=frac(fa), confusion=frac(conf),
            sad_miss=frac(sad_miss), sad_fa=frac(sad_fa), scored_speech_seconds=speech,
            miss_seconds=miss, fa_seconds=fa, confusion_seconds=conf,
            sad_miss_seconds=sad_miss, sad_fa_seconds=sad_fa,
        )


def aggregate(reports: Sequence[DerReport]) -> DerReport:
    """Pool error time over recordings (a time-weighted, not per-file, average)."""
    return DerReport.from_seconds(
        sum(r.scored_speech_seconds for r in reports),
        sum(r.miss_seconds for r in reports),
        sum(r.fa_seconds for r in reports),
        sum(r.confusion_seconds for r in reports),
        sum(r.sad_miss_seconds for r in reports),
        sum(r.sad_fa_seconds for r in reports),
    )


# ---------------------------------------------------------------- decoding


def decode_posteriors(y: np.ndarray, threshold: float = 0.5, median_frames: int = 11,
                      recording_id: str = "rec", speakers: Sequence[str] | None = None,
                      frame_period: float = FRAME_PERIOD) -> SegmentAnnotation:
    """Threshold, median-filter along time, and turn runs of 1s into segments."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if median_frames < 1 or median_frames % 2 == 0:
        raise ValueError("median_frames must be a positive odd number")
    y = np.atleast_2d(np.asarray(y))
    active = (y > threshold).astype(np.uint8)
    if median_frames > 1:
        active = median_filter(active, size=(1, median_frames), mode="nearest")
    speakers = list(speakers) if speakers is not None else [f"spk{c}" for c in range(y.shape[0])]
    return segments_from_labels(active, frame_period, recording_id, speakers)


# ---------------------------------------------------------------- segment-based scoring


def _no_score_zones(ref: SegmentAnnotation, collar: float) -> list[tuple[float, float]]:
    if collar <= 0:
        return []
    bounds = sorted({t for spans in ref.by_speaker().values() for s in spans for t in s})
    zones = []
    for b in bounds:
        a, z = b - collar, b + collar
        if zones and a <= zones[-1][1]:
            zones[-1] = (zones[-1][0], z)
        else:
            zones.append((a, z))
    return zones


def _activity(spans_by_speaker: dict, mids: np.ndarray) -> np.ndarray:
    """Boolean (speakers, intervals) activity at interval midpoints."""
    out = np.zeros((len(spans_by_speaker), len(mids)), dtype=bool)
    for i, spans in enumerate(spans_by_speaker.values()):
        if not spans:
            continue
        starts = np.array([a for a, _ in spans])
        ends = np.array([b for _, b in spans])
        k = np.searchsorted(starts, mids, side="right") - 1
        out[i] = (k >= 0) & (mids < ends[np.maximum(k, 0)])
    return out


def der(ref: SegmentAnnotation, hyp: SegmentAnnotation, collar: float = DEFAULT_COLLAR) -> DerReport:
    """Diarization error rate with a no-score collar around reference boundaries.

    Speakers are mapped one-to-one to maximize jointly active scored time.
    Overlapped speech is scored in full.
    """
    if ref.recording_id != hyp.recording_id:
        raise ValueError(f"recording ids differ: {ref.recording_id!r} vs {hyp.recording_id!r}")
    ref_spans, hyp_spans = ref.by_speaker(), hyp.by_speaker()
    if len(ref_spans) > MAX_MAPPED_SPEAKERS or len(hyp_spans) > MAX_MAPPED_SPEAKERS:
        raise ValueError(f"at most {MAX_MAPPED_SPEAKERS} speakers per side are supported")
    zones = _no_score_zones(ref, collar)
    edges = {t for spans in (*ref_spans.values(), *hyp_spans.values()) for s in spans for t in s}
    edges.update(t for z in zones for t in z)
    edges = np.array(sorted(edges))
    if len(edges) < 2:
        return DerReport.from_seconds(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    mids = 0.5 * (edges[:-1] + edges[1:])
    dur = np.diff(edges)
    if zones:
        zs = np.array(zones)
        k = np.searchsorted(zs[:, 0], mids, side="right") - 1
        in_zone = (k >= 0) & (mids < zs[np.maximum(k, 0), 1])
        dur = np.where(in_zone, 0.0, dur)
    r_act = _activity(ref_spans, mids)
    h_act = _activity(hyp_spans, mids)
    n_ref = r_act.sum(axis=0)
    n_hyp = h_act.sum(axis=0)
    correct = np.zeros_like(dur)
    if len(ref_spans) and len(hyp_spans):
        joint = (r_act[:, None, :] & h_act[None, :, :]) @ dur  # (R, H) co-active seconds
        rows, cols = linear_sum_assignment(joint, maximize=True)
        correct = (r_act[rows] & h_act[cols]).sum(axis=0)
    speech = float(dur @ n_ref)
    miss = float(dur @ np.maximum(n_ref - n_hyp, 0))
    fa = float(dur @ np.maximum(n_hyp - n_ref, 0))
    conf = float(dur @ (np.minimum(n_ref, n_hyp) - correct))
    sad_miss = float(dur @ ((n_ref > 0) & (n_hyp == 0)))
    sad_fa = float(dur @ ((n_ref == 0) & (n_hyp > 0)))
    return DerReport.from_seconds(speech, miss, fa, conf, sad_miss, sad_fa)


# ---------------------------------------------------------------- frame-level oracle


def der_frames(ref: SegmentAnnotation, hyp: SegmentAnnotation, collar: float = DEFAULT_COLLAR,
               step: float = 0.01) -> DerReport:
    """Brute-force DER on a fixed frame grid, for cross-checking :func:`der`.

    Each ``step``-long frame is judged at its centre; the speaker mapping is
    found by trying every injective assignment.
    """
    end = max(ref.end(), hyp.end()) + collar + step
    n = int(math.ceil(end / step))
    centers = (np.arange(n) + 0.5) * step

    def rasterize(ann):
        spk = ann.speakers()
        act = np.zeros((len(spk), n), dtype=bool)
        for seg in ann.entries:
            act[spk.index(seg.speaker)] |= (centers >= seg.onset) & (centers < seg.offset)
        return act

    r_act, h_act = rasterize(ref), rasterize(hyp)
    # boundaries are where a reference speaker switches on or off, so touching
    # segments of one speaker do not open a collar between them
    padded = np.pad(r_act, ((0, 0), (1, 1)))
    flips = np.nonzero((padded[:, 1:] != padded[:, :-1]).any(axis=0))[0]
    scored = np.ones(n, dtype=bool)
    for b in flips * step:
        scored &= np.abs(centers - b) > collar
    r_act, h_act = r_act[:, scored], h_act[:, scored]
    n_ref, n_hyp = r_act.sum(axis=0), h_act.sum(axis=0)
    best = 0
    nr, nh = len(r_act), len(h_act)
    if nr and nh:
        if nr <= nh:
            for perm in itertools.permutations(range(nh), nr):
                best = max(best, int(sum((r_act[i] & h_act[j]).sum() for i, j in enumerate(perm))))
        else:
            for perm in itertools.permutations(range(nr), nh):
                best = max(best, int(sum((r_act[i] & h_act[j]).sum() for j, i in enumerate(perm))))
    speech = n_ref.sum() * step
    miss = np.maximum(n_ref - n_hyp, 0).sum() * step
    fa = np.maximum(n_hyp - n_ref, 0).sum() * step
    conf = (np.minimum(n_ref, n_hyp).sum() - best) * step
    sad_miss = ((n_ref > 0) & (n_hyp == 0)).sum() * step
    sad_fa = ((n_ref == 0) & (n_hyp > 0)).sum() * step
    return DerReport.from_seconds(float(speech), float(miss), float(fa), float(conf),
                                  float(sad_miss), float(sad_fa))


# ---------------------------------------------------------------- model evaluation


@dataclass
class DecodeConfig:
    threshold: float = 0.5
    median_frames: int = 11
    collar: float = DEFAULT_COLLAR


def infer_recording(config: ModelConfig, params: ParameterStore, features: np.ndarray
                    ) -> list[np.ndarray]:
    """Posteriors for every tap and the final output (C x T each)."""
    out = forward(config, params, features, train=False)
    return out.per_layer_posteriors()


def score_per_layer(config: ModelConfig, params: ParameterStore, recordings: Sequence[Recording],
                    decode: DecodeConfig | None = None) -> list[DerReport]:
    """Pooled DER for each intermediate tap followed by the final output."""
    if not config.taps:
        raise ValueError("per-layer scoring needs a model with intermediate taps (inter_loss on)")
    decode = decode or DecodeConfig()
    per_layer: list[list[DerReport]] = [[] for _ in range(len(config.taps) + 1)]
    for rec in recordings:
        for i, y in enumerate(infer_recording(config, params, rec.features)):
            hyp = decode_posteriors(y, decode.threshold, decode.median_frames, rec.recording_id)
            per_layer[i].append(der(rec.annotation, hyp, decode.collar))
    return [aggregate(reports) for reports in per_layer]


def score_recordings(config: ModelConfig, params: ParameterStore, recordings: Sequence[Recording],
                     decode: DecodeConfig | None = None) -> DerReport:
    decode = decode or DecodeConfig()
    reports = []
    for rec in recordings:
        y = infer_recording(config, params, rec.features)[-1]
        hyp = decode_posteriors(y, decode.threshold, decode.median_frames, rec.recording_id)
        reports.append(der(rec.annotation, hyp, decode.collar))
    return aggregate(reports)


# ---------------------------------------------------------------- report output

TABLE_COLUMNS = ("DER", "Miss", "FA", "CF", "SAD-Miss", "SAD-FA")


def format_table(rows: Sequence[tuple[str, DerReport]]) -> str:
    """Fixed-width table of percentages, one row per system or layer."""
    width = max([len("System")] + [len(name) for name, _ in rows])
    head = f"{'System':<{width}}" + "".join(f"{c:>10}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, r in rows:
        vals = (r.der, r.miss, r.fa, r.confusion, r.sad_miss, r.sad_fa)
        lines.append(f"{name:<{width}}" + "".join(f"{100 * v:>10.2f}" for v in vals))
    return "\n".join(lines)


def report_record(name: str, report: DerReport) -> str:
    return json.dumps({"name": name, **asdict(report)}, sort_keys=True)
