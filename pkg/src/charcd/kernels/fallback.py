"""Pure-numpy batched scoring kernels.

Both entry points score M candidate character sets at once against one
word's precomputed context, returning the relevant-part logit contribution
for every (candidate, output column) pair.  Work is chunked over candidates
to bound temporary memory.
"""

from __future__ import annotations

import numpy as np

NAME = "fallback"


def _sig(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _relu_share(a, p, q):
    """Relevant share of relu(a + p + q) under the ordering average."""
    return (2.0 * _relu(a)
            + (_relu(a + p) - _relu(p))
            + (_relu(a + q) - _relu(q))
            + 2.0 * (_relu(a + p + q) - _relu(p + q))) / 6.0


def _gate_shares(zr, zi, b, f, f0):
    """Three-way share of f(zr + zi + b); bias share absorbs f(0)."""
    fr, fi, fb = f(zr), f(zi), f(b)
    fri = f(zr + zi)
    frb = f(zr + b)
    fib = f(zi + b)
    ft = f(zr + zi + b)
    lr = (2.0 * (fr - f0) + (fri - fi) + (frb - fb) + 2.0 * (ft - fib)) / 6.0
    li = (2.0 * (fi - f0) + (fri - fr) + (fib - fb) + 2.0 * (ft - frb)) / 6.0
    lb = (2.0 * (fb - f0) + (frb - fr) + (fib - fi) + 2.0 * (ft - fri)) / 6.0 + f0
    return lr, li, lb, ft


def cnn_cd_scores(win_pos, win_contrib, total, bias, masks, wcols,
                  chunk: int = 2048) -> np.ndarray:
    """(M, C) relevant scores for the pooled-CNN head columns."""
    masks_f = np.asarray(masks, dtype=np.float64)
    M = masks_f.shape[0]
    K = win_pos.shape[1]
    safe = np.where(win_pos >= 0, win_pos, 0)
    contrib = np.where(win_pos >= 0, win_contrib, 0.0)
    out = np.empty((M, wcols.shape[1]))
    for s in range(0, M, chunk):
        mk = masks_f[s:s + chunk]
        beta = np.zeros((mk.shape[0], win_pos.shape[0]))
        for k in range(K):
            beta += mk[:, safe[:, k]] * contrib[None, :, k]
        gamma = total[None, :] - beta
        bc = _relu_share(beta, gamma, bias[None, :])
        out[s:s + chunk] = bc @ wcols
    return out


def _lstm_direction(xw, V, b, mk, reverse: bool) -> np.ndarray:
    m = mk.shape[0]
    T = xw.shape[0]
    H = V.shape[0]
    sl = {"i": slice(0, H), "f": slice(H, 2 * H),
          "g": slice(2 * H, 3 * H), "o": slice(3 * H, 4 * H)}
    beta_c = np.zeros((m, H))
    gamma_c = np.zeros((m, H))
    beta_h = np.zeros((m, H))
    gamma_h = np.zeros((m, H))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        vr = beta_h @ V
        vi = gamma_h @ V
        w = mk[:, t:t + 1]
        zr = vr + w * xw[t]
        zi = vi + (1.0 - w) * xw[t]
        ri, ii, bi, _ = _gate_shares(zr[:, sl["i"]], zi[:, sl["i"]],
                                     b[sl["i"]], _sig, 0.5)
        rf, if_, bf, ft = _gate_shares(zr[:, sl["f"]], zi[:, sl["f"]],
                                       b[sl["f"]], _sig, 0.5)
        rg, ig, bg, _ = _gate_shares(zr[:, sl["g"]], zi[:, sl["g"]],
                                     b[sl["g"]], np.tanh, 0.0)
        ro, io, bo, ot = _gate_shares(zr[:, sl["o"]], zi[:, sl["o"]],
                                      b[sl["o"]], _sig, 0.5)
        new_bc = (rf + bf) * beta_c + ri * (rg + bg) + bi * rg
        new_gc = (if_ * beta_c + ft * gamma_c
                  + ri * ig + ii * (rg + ig + bg) + bi * (ig + bg))
        beta_c, gamma_c = new_bc, new_gc
        th_sum = np.tanh(beta_c + gamma_c)
        tb = 0.5 * (np.tanh(beta_c) + th_sum - np.tanh(gamma_c))
        tg = 0.5 * (np.tanh(gamma_c) + th_sum - np.tanh(beta_c))
        beta_h = (ro + bo) * tb
        gamma_h = io * tb + ot * tg
    return beta_h


def lstm_cd_scores(xw_fw, wh_fw, b_fw, xw_bw, wh_bw, b_bw, masks, wcols,
                   chunk: int = 1024) -> np.ndarray:
    """(M, C) relevant scores for the BiLSTM head columns."""
    masks_f = np.asarray(masks, dtype=np.float64)
    M = masks_f.shape[0]
    out = np.empty((M, wcols.shape[1]))
    for s in range(0, M, chunk):
        mk = masks_f[s:s + chunk]
        bh_f = _lstm_direction(xw_fw, wh_fw, b_fw, mk, reverse=False)
        bh_b = _lstm_direction(xw_bw, wh_bw, b_bw, mk, reverse=True)
        out[s:s + chunk] = np.hstack([bh_f, bh_b]) @ wcols
    return out
