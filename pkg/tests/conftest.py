import numpy as np
import pytest

from eend.datagen import Recording, SimConfig, labels_from_segments, simulate_conversation
from eend.model import ModelConfig


def make_recordings(n, duration=20.0, overlap=0.15, seed=0, **sim_kw):
    out = []
    for i in range(n):
        ann, feats = simulate_conversation(
            SimConfig(target_duration=duration, overlap_ratio_target=overlap, seed=seed + i, **sim_kw))
        spk = [f"{ann.recording_id}_spk{k}" for k in range(2)]
        labels = labels_from_segments(ann, 0.1, feats.num_frames, spk)
        out.append(Recording(ann.recording_id, feats.data, labels, spk, ann))
    return out


def tiny_config(variant="NA", **kw):
    base = dict(variant=variant, num_layers=2, model_dim=8, heads=2, ff_dim=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_recordings():
    return make_recordings(3, duration=20.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    lines = getattr(request.config, "_eend_verdicts", None)
    if lines is None:
        lines = request.config._eend_verdicts = []
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_eend_verdicts", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
