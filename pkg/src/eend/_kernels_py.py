"""Pure-numpy LSTM recurrence; the reference the compiled kernel must match."""
import numpy as np


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_forward(gates_in, w_hh, h0, c0):
    """Forward recurrence.

    gates_in: (B, T, 4D) input-side gate pre-activations (biases included).
    Returns hidden states, cell states (both (B, T, D)) and the activated
    gates (B, T, 4D) in i, f, g, o order for the backward pass.
    """
    b, t_len, four_d = gates_in.shape
    d = four_d // 4
    hs = np.empty((b, t_len, d), dtype=gates_in.dtype)
    cs = np.empty_like(hs)
    acts = np.empty_like(gates_in)
    w_t = w_hh.T
    h, c = h0, c0
    for t in range(t_len):
        z = gates_in[:, t] + h @ w_t
        a = acts[:, t]
        a[:, : 2 * d] = _sigmoid(z[:, : 2 * d])
        a[:, 2 * d : 3 * d] = np.tanh(z[:, 2 * d : 3 * d])
        a[:, 3 * d :] = _sigmoid(z[:, 3 * d :])
        c = a[:, d : 2 * d] * c + a[:, :d] * a[:, 2 * d : 3 * d]
        h = a[:, 3 * d :] * np.tanh(c)
        hs[:, t] = h
        cs[:, t] = c
    return hs, cs, acts


def lstm_backward(dh_seq, dh_last, dc_last, w_hh, h0, c0, cs, acts):
    """Backward recurrence; returns (dgates (B, T, 4D), dh0, dc0)."""
    b, t_len, d = cs.shape
    dgates = np.empty((b, t_len, 4 * d), dtype=cs.dtype)
    dh_next = dh_last.copy()
    dc_next = dc_last.copy()
    for t in range(t_len - 1, -1, -1):
        a = acts[:, t]
        i, f, g, o = a[:, :d], a[:, d : 2 * d], a[:, 2 * d : 3 * d], a[:, 3 * d :]
        tc = np.tanh(cs[:, t])
        c_prev = cs[:, t - 1] if t > 0 else c0
        dh = dh_seq[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dgates[:, t]
        dz[:, :d] = dc * g * i * (1.0 - i)
        dz[:, d : 2 * d] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * d : 3 * d] = dc * i * (1.0 - g * g)
        dz[:, 3 * d :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ w_hh
    return dgates, dh_next, dc_next
