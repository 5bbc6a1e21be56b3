import os
import subprocess
import sys

import numpy as np
import pytest

from eend import _kernels_py, kernels, nncore as nn
from eend.model import build_params, eda_attractors

from conftest import tiny_config

compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                              reason="compiled extension not built")


def _inputs(rng, b, t, d, dtype=np.float64):
    return tuple(a.astype(dtype) for a in (
        rng.normal(size=(b, t, 4 * d)), rng.normal(size=(4 * d, d)) / np.sqrt(d),
        rng.normal(size=(b, d)), rng.normal(size=(b, d)), rng.normal(size=(b, t, d)),
        rng.normal(size=(b, d)), rng.normal(size=(b, d))))


@compiled
@pytest.mark.parametrize("b, t, d", [(1, 1, 1), (2, 7, 3), (4, 50, 16)])
def test_compiled_matches_python(b, t, d):
    from eend import _lstm

    gates, w_hh, h0, c0, dh, dh_last, dc_last = _inputs(np.random.default_rng(t), b, t, d)
    fwd = [m.lstm_forward(gates, w_hh, h0, c0) for m in (_kernels_py, _lstm)]
    for x, y in zip(*fwd):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
    _, cs, acts = fwd[0]
    bwd = [m.lstm_backward(dh, dh_last, dc_last, w_hh, h0, c0, cs, acts) for m in (_kernels_py, _lstm)]
    for x, y in zip(*bwd):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


@compiled
def test_compiled_float32():
    from eend import _lstm

    gates, w_hh, h0, c0, *_ = _inputs(np.random.default_rng(0), 2, 20, 8, np.float32)
    hs_py = _kernels_py.lstm_forward(gates, w_hh, h0, c0)[0]
    hs_c = _lstm.lstm_forward(gates, w_hh, h0, c0)[0]
    assert hs_c.dtype == np.float32
    np.testing.assert_allclose(hs_c, hs_py, atol=1e-5)


def test_use_backend_round_trip():
    before = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.lstm_forward is _kernels_py.lstm_forward
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(before)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_eda_gradients_per_backend(backend):
    before = kernels.BACKEND
    kernels.use_backend(backend)
    try:
        cfg = tiny_config("EDA", model_dim=4, heads=2)
        params = build_params(cfg)
        eda = params.group("eda")
        e = np.random.default_rng(1).normal(size=(4, 6))
        store = nn.ParameterStore()
        for k, v in eda.items():
            store.add(k, v.data)

        def fn():
            a, logits = eda_attractors(e, {k: store[k] for k in store}, 2)
            return nn.add(nn.sum_all(nn.mul(a, a)), nn.sum_all(logits))

        assert nn.grad_check(fn, store) < 1e-6
    finally:
        kernels.use_backend(before)


def test_env_forces_python():
    env = dict(os.environ, EEND_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from eend import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
