"""Backend selection for the LSTM recurrence.

The compiled extension ``eend._lstm`` is used when it imports; otherwise the
numpy implementation in ``eend._kernels_py`` takes over. Setting
``EEND_PURE_PYTHON=1`` forces the fallback.
"""
import os

from eend import _kernels_py

BACKEND = "python"
lstm_forward = _kernels_py.lstm_forward
lstm_backward = _kernels_py.lstm_backward

if os.environ.get("EEND_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from eend import _lstm
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "compiled"
        lstm_forward = _lstm.lstm_forward
        lstm_backward = _lstm.lstm_backward


def use_backend(name: str):
    """Switch backends at runtime (used by the benchmark and tests)."""
    global BACKEND, lstm_forward, lstm_backward
    if name == "python":
        lstm_forward, lstm_backward = _kernels_py.lstm_forward, _kernels_py.lstm_backward
    elif name == "compiled":
        from eend import _lstm

        lstm_forward, lstm_backward = _lstm.lstm_forward, _lstm.lstm_backward
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from eend import _lstm  # noqa: F401
    except ImportError:
        return names
    return names + ["compiled"]
