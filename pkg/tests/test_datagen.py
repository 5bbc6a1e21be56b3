import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eend.datagen import (BASE_DIM, ManifestEntry, RttmError, Segment, SegmentAnnotation, SimConfig,
                          SimulationError, format_rttm, labels_from_segments, load_recordings,
                          logmel, mel_filterbank, overlap_ratio, overlap_stats,
                          overlap_stats_frames, parse_rttm, read_features, read_manifest,
                          rttm_read, rttm_write, segments_from_labels, simulate_conversation,
                          stack_subsample, write_features, write_manifest)


def sim(**kw):
    base = dict(target_duration=30.0, seed=0)
    base.update(kw)
    return simulate_conversation(SimConfig(**base))


# ---------------------------------------------------------------- simulator


def test_simulator_shapes_and_duration():
    ann, feats = sim(target_duration=60.0)
    assert feats.data.shape == (345, 600)
    assert abs(feats.num_frames * feats.frame_period - 60.0) <= 0.1
    assert ann.end() <= 60.0
    assert np.all(np.isfinite(feats.data))


def test_simulator_is_bit_reproducible():
    a1, f1 = sim(seed=5)
    a2, f2 = sim(seed=5)
    assert a1 == a2 and np.array_equal(f1.data, f2.data)
    _, f3 = sim(seed=6)
    assert not np.array_equal(f1.data, f3.data)


def test_zero_overlap_target():
    for seed in range(5):
        ann, _ = sim(overlap_ratio_target=0.0, seed=seed)
        assert overlap_stats(ann)[0] == 0.0


@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.08, 0.2]))
@settings(max_examples=25, deadline=None)
def test_speakers_never_self_overlap(seed, target):
    ann, _ = sim(overlap_ratio_target=target, seed=seed)
    for spk in ann.speakers():
        segs = sorted((s.onset, s.offset) for s in ann.entries if s.speaker == spk)
        assert all(b1 < a2 for (_, b1), (a2, _) in zip(segs, segs[1:]))
        assert all(s.duration > 0 for s in ann.entries)


def test_overlap_statistic_hits_target():
    anns = [sim(target_duration=60.0, overlap_ratio_target=0.08, seed=s)[0] for s in range(100)]
    assert abs(overlap_ratio(anns) - 0.08) <= 0.05


def test_overlap_estimators_agree():
    anns = [sim(overlap_ratio_target=0.15, seed=s)[0] for s in range(20)]
    assert abs(overlap_ratio(anns) - overlap_ratio(anns, frames=True)) <= 1e-9
    for a in anns[:5]:
        assert overlap_stats(a) == pytest.approx(overlap_stats_frames(a), abs=1e-9)


def test_unreachable_overlap_target():
    with pytest.raises(SimulationError, match="unreachable"):
        SimConfig(overlap_ratio_target=0.45).overlap_probability()
    with pytest.raises(SimulationError):
        SimConfig(overlap_ratio_target=0.6)
    with pytest.raises(SimulationError):
        SimConfig(noise_std=0.0)


def test_features_separate_speakers():
    ann, feats = sim(noise_std=0.01, overlap_ratio_target=0.0)
    spk = ann.speakers()
    labels = labels_from_segments(ann, 0.1, feats.num_frames, spk)
    center = feats.data[7 * BASE_DIM:8 * BASE_DIM]  # the un-shifted context slot
    only0 = (labels[0] == 1) & (labels[1] == 0)
    only1 = (labels[1] == 1) & (labels[0] == 0)
    m0, m1 = center[:, only0].mean(axis=1), center[:, only1].mean(axis=1)
    assert np.linalg.norm(m0 - m1) == pytest.approx(2.0, rel=0.1)


# ---------------------------------------------------------------- features


def test_logmel_frame_count_and_silence():
    out = logmel(np.zeros(8000))
    assert out.shape == (23, 98)
    assert np.all(out == np.log(1e-10))


def test_logmel_sine_peak():
    t = np.arange(8000) / 8000
    out = logmel(np.sin(2 * np.pi * 1000 * t))
    fb = mel_filterbank(23, 256, 8000)
    freqs = np.arange(129) * 8000 / 256
    centers = freqs[np.argmax(fb, axis=1)]
    expected = int(np.argmin(np.abs(centers - 1000)))
    assert np.bincount(out.argmax(axis=0)).argmax() == expected


def test_logmel_rejects_empty():
    with pytest.raises(ValueError):
        logmel(np.zeros(0))


def test_stack_subsample_contract():
    x = np.arange(2 * 100, dtype=float).reshape(2, 100)
    out = stack_subsample(x, 15, 10)
    assert out.shape == (30, 10)
    for t in range(1, 9):  # interior columns
        assert np.array_equal(out[7 * 2:8 * 2, t], x[:, 10 * t])
        assert np.array_equal(out[:2, t], x[:, 10 * t - 7])
    assert stack_subsample(np.zeros((23, 101))).shape == (345, 11)
    const = stack_subsample(np.full((3, 25), 4.0), 15, 10)
    assert np.all(const == 4.0)


# ---------------------------------------------------------------- labels


def test_labels_hand_example():
    ann = SegmentAnnotation("r", [Segment("A", 0.0, 0.35)])
    assert labels_from_segments(ann, 0.1, 5, ["A"]).tolist() == [[1, 1, 1, 1, 0]]


def test_labels_empty_and_overlap():
    assert not labels_from_segments(SegmentAnnotation("r"), 0.1, 4, ["A", "B"]).any()
    ann = SegmentAnnotation("r", [Segment("A", 0.2, 0.3), Segment("B", 0.2, 0.3)])
    y = labels_from_segments(ann, 0.1, 6, ["A", "B"])
    assert y[:, 2:5].all() and not y[:, :2].any()


def test_labels_unknown_speaker():
    with pytest.raises(KeyError):
        labels_from_segments(SegmentAnnotation("r", [Segment("Z", 0, 1)]), 0.1, 10, ["A"])


@given(st.lists(st.lists(st.booleans(), min_size=12, max_size=12), min_size=1, max_size=3))
def test_labels_segments_idempotent(rows):
    y = np.array(rows, dtype=float)
    spk = [f"s{i}" for i in range(len(rows))]
    ann = segments_from_labels(y, 0.1, "r", spk)
    assert np.array_equal(labels_from_segments(ann, 0.1, 12, spk), y)


# ---------------------------------------------------------------- RTTM


def test_rttm_parse_line():
    (ann,) = parse_rttm("SPEAKER rec1 1 0.000 1.500 <NA> <NA> spkA <NA> <NA>\n")
    assert ann.recording_id == "rec1"
    assert ann.entries == [Segment("spkA", 0.0, 1.5)]


def test_rttm_round_half_up():
    text = format_rttm([SegmentAnnotation("r", [Segment("A", 0.0005, 1.0)])])
    assert text.split()[3] == "0.001"


def test_rttm_malformed_line_number():
    text = "SPEAKER r 1 0.0 1.0 <NA> <NA> A <NA> <NA>\nSPEAKER r 1 abc 1.0 <NA> <NA> A\n"
    with pytest.raises(RttmError, match=":2:"):
        parse_rttm(text)


def test_rttm_skips_other_lines():
    text = "SPKR-INFO r 1 <NA> <NA> <NA> unknown A <NA> <NA>\nSPEAKER r 1 1.0 2.0 <NA> <NA> A <NA> <NA>\n"
    (ann,) = parse_rttm(text)
    assert len(ann.entries) == 1


def test_rttm_sorted_output():
    ann = SegmentAnnotation("b", [Segment("X", 5.0, 1.0), Segment("Y", 1.0, 1.0)])
    lines = format_rttm([ann, SegmentAnnotation("a", [Segment("Z", 9.0, 1.0)])]).splitlines()
    assert [(l.split()[1], l.split()[3]) for l in lines] == [("a", "9.000"), ("b", "1.000"), ("b", "5.000")]


def test_rttm_round_trip_random(tmp_path):
    rng = np.random.default_rng(0)
    anns = []
    for i in range(50):
        entries = [Segment(f"s{rng.integers(3)}", float(rng.uniform(0, 100)), float(rng.uniform(0.01, 10)))
                   for _ in range(rng.integers(1, 8))]
        anns.append(SegmentAnnotation(f"rec{i:02d}", entries))
    path = tmp_path / "x.rttm"
    rttm_write(anns, path)
    back = {a.recording_id: a for a in rttm_read(path)}
    for a in anns:
        got = sorted((s.speaker, s.onset, s.duration) for s in back[a.recording_id].entries)
        want = sorted((s.speaker, s.onset, s.duration) for s in a.entries)
        for g, w in zip(got, want):
            assert g[0] == w[0]
            assert abs(g[1] - w[1]) <= 0.0005 + 1e-12 and abs(g[2] - w[2]) <= 0.0005 + 1e-12


# ---------------------------------------------------------------- files


def test_feature_file_round_trip(tmp_path):
    x = np.random.default_rng(1).normal(size=(5, 7)).astype(np.float32)
    write_features(tmp_path / "f.feat", x)
    raw = (tmp_path / "f.feat").read_bytes()
    assert raw[:8] == b"EENDFEAT" and len(raw) == 24 + 5 * 7 * 4
    assert np.array_equal(read_features(tmp_path / "f.feat"), x.astype(np.float64))
    (tmp_path / "g.feat").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_features(tmp_path / "g.feat")


def test_manifest_and_recordings(tmp_path):
    ann, feats = sim(target_duration=12.0)
    write_features(tmp_path / "r.feat", feats.data)
    rttm_write(ann, tmp_path / "r.rttm")
    write_manifest(tmp_path / "m.tsv", [ManifestEntry(ann.recording_id, tmp_path / "r.feat",
                                                      tmp_path / "r.rttm")])
    assert "\tr.feat\t" in (tmp_path / "m.tsv").read_text()
    (entry,) = read_manifest(tmp_path / "m.tsv")
    assert entry.feature_path == tmp_path / "r.feat"
    (rec,) = load_recordings(tmp_path / "m.tsv")
    assert rec.labels.shape == (2, 120)
    assert rec.features.shape == (345, 120)
