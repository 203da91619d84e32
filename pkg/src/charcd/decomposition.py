"""Exact additive decomposition of encoder outputs into relevant/irrelevant parts.

Given a trained model, an encoded word and a set of character positions S,
every intermediate activation is split as ``z = beta + gamma`` where ``beta``
collects what is attributable to the characters in S and ``gamma`` the rest
(including biases).  Nonlinearities are shared out with a permutation-average
linearization, so the split is exact: the two parts always sum back to the
original activation (up to float rounding).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .corpus import PAD_ID
from .models import (
    CnnForward, TaggerModel, _sigmoid, _window_index, bilstm_forward,
    cnn_forward,
)

__all__ = [
    "DecompositionError",
    "linearize_activation",
    "validate_index_set",
    "relevance_mask",
    "WordDecomposition",
    "ClassContribution",
    "conv_preactivation_split",
    "cd_cnn",
    "cd_lstm",
    "decompose",
    "class_contribution",
    "CnnKernelContext",
    "LstmKernelContext",
    "cnn_kernel_context",
    "lstm_kernel_context",
]

MAX_LINEARIZE_PARTS = 6


class DecompositionError(ValueError):
    pass


def linearize_activation(parts, f) -> list[np.ndarray]:
    """Share f(sum(parts)) - f(0) among the parts.

    Each part's share is the average, over every ordering of the parts, of
    how much f grows when that part is added to the running sum.  The shares
    telescope: they always total f(sum) - f(0), and a part that is exactly
    zero receives exactly zero.  Cost is len(parts)! evaluations, hence the
    hard cap.
    """
    n = len(parts)
    if n == 0:
        raise DecompositionError("need at least one part")
    if n > MAX_LINEARIZE_PARTS:
        raise DecompositionError(
            f"{n} parts would need {math.factorial(n)} orderings "
            f"(cap: {MAX_LINEARIZE_PARTS})")
    arrs = [np.asarray(p, dtype=np.float64) for p in parts]
    shape = np.broadcast_shapes(*(a.shape for a in arrs))
    shares = [np.zeros(shape) for _ in range(n)]
    for perm in itertools.permutations(range(n)):
        prefix = np.zeros(shape)
        for k in perm:
            nxt = prefix + arrs[k]
            shares[k] += f(nxt) - f(prefix)
            prefix = nxt
    fact = math.factorial(n)
    return [s / fact for s in shares]


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def validate_index_set(index_set, ids) -> frozenset[int]:
    """Check S against the encoded sequence: in range and never padding."""
    s = frozenset(index_set)
    T = len(ids)
    for i in s:
        if not isinstance(i, (int, np.integer)):
            raise DecompositionError(f"index {i!r} is not an integer")
        if i < 0 or i >= T:
            raise DecompositionError(
                f"index {i} outside encoded sequence of length {T}")
        if ids[i] == PAD_ID:
            raise DecompositionError(
                f"index {i} is a padding position and cannot carry relevance")
    return s


def relevance_mask(index_set, T: int) -> np.ndarray:
    mask = np.zeros(T, dtype=bool)
    for i in index_set:
        mask[i] = True
    return mask


@dataclass(frozen=True)
class WordDecomposition:
    """Split of the word representation; beta + gamma == representation."""

    beta: np.ndarray   # (d2,)
    gamma: np.ndarray  # (d2,)

    @property
    def total(self) -> np.ndarray:
        return self.beta + self.gamma


# ---------------------------------------------------------------------------
# CNN path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSplit:
    """Pre-activation split at each filter's pooled window."""

    beta: np.ndarray      # (d2,) relevant window share, no bias
    gamma: np.ndarray     # (d2,) irrelevant window share, no bias
    bias: np.ndarray      # (d2,)
    win_pos: np.ndarray   # (d2, max_width) int, -1 where unused
    win_contrib: np.ndarray  # (d2, max_width) per-offset dot products


def conv_preactivation_split(model: TaggerModel, fwd: CnnForward,
                             mask: np.ndarray) -> ConvSplit:
    """Split each winning window's pre-activation by character membership.

    A filter of width n at start position t reads characters t..t+n-1; the
    dot products with the per-offset weight blocks route to beta when the
    character is in S and to gamma otherwise.  Only the argmax window of
    each filter matters because pooling discards the rest, and the argmax
    does not depend on S.
    """
    cfg = model.config
    T = fwd.embedded.shape[0]
    max_n = max(cfg.widths)
    betas, gammas, biases = [], [], []
    all_pos = np.full((cfg.d2, max_n), -1, dtype=np.int64)
    all_contrib = np.zeros((cfg.d2, max_n))
    offset = 0
    for n, count in zip(cfg.widths, cfg.counts):
        wmat = model.params[f"conv{n}:w"]
        arg = fwd.argmax[offset:offset + count]
        xwin = fwd.embedded[_window_index(T, n)][arg]      # (count, n, d1)
        wr = wmat.reshape(n, cfg.embed_dim, count)
        contrib = np.einsum("fnd,ndf->fn", xwin, wr)       # (count, n)
        pos = arg[:, None] + np.arange(n)[None, :]
        in_s = mask[pos]
        betas.append((contrib * in_s).sum(axis=1))
        gammas.append((contrib * ~in_s).sum(axis=1))
        biases.append(model.params[f"conv{n}:b"].copy())
        all_pos[offset:offset + count, :n] = pos
        all_contrib[offset:offset + count, :n] = contrib
        offset += count
    return ConvSplit(beta=np.concatenate(betas), gamma=np.concatenate(gammas),
                     bias=np.concatenate(biases), win_pos=all_pos,
                     win_contrib=all_contrib)


def cd_cnn(model: TaggerModel, ids, index_set) -> WordDecomposition:
    """Relevant/irrelevant split of the pooled CNN representation."""
    s = validate_index_set(index_set, ids)
    fwd = cnn_forward(model, ids)
    split = conv_preactivation_split(model, fwd, relevance_mask(s, len(ids)))
    b_share, g_share, bias_share = linearize_activation(
        [split.beta, split.gamma, split.bias], _relu)
    return WordDecomposition(beta=b_share, gamma=g_share + bias_share)


# ---------------------------------------------------------------------------
# BiLSTM path
# ---------------------------------------------------------------------------

def _gate_shares(z_rel: np.ndarray, z_irr: np.ndarray, bias: np.ndarray,
                 f, f_zero: float):
    """Three-way gate split; the bias share absorbs f(0) so the three sum to
    the gate value itself, not the offset from f(0)."""
    rel, irr, b = linearize_activation([z_rel, z_irr, bias], f)
    return rel, irr, b + f_zero


def _cd_lstm_direction(model: TaggerModel, X: np.ndarray, mask: np.ndarray,
                       direction: str, reverse: bool):
    H = model.config.hidden
    wx = model.params[f"{direction}:wx"]
    V = model.params[f"{direction}:wh"]
    b = model.params[f"{direction}:b"]
    xw = X @ wx  # (T, 4H)
    gate_slices = {"i": slice(0, H), "f": slice(H, 2 * H),
                   "g": slice(2 * H, 3 * H), "o": slice(3 * H, 4 * H)}
    beta_c = np.zeros(H)
    gamma_c = np.zeros(H)
    beta_h = np.zeros(H)
    gamma_h = np.zeros(H)
    T = X.shape[0]
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        vh_rel = beta_h @ V
        vh_irr = gamma_h @ V
        if mask[t]:
            z_rel = xw[t] + vh_rel
            z_irr = vh_irr
        else:
            z_rel = vh_rel
            z_irr = xw[t] + vh_irr
        z_total = z_rel + z_irr + b
        shares = {}
        for name, sl in gate_slices.items():
            f = np.tanh if name == "g" else _sigmoid
            f0 = 0.0 if name == "g" else 0.5
            shares[name] = _gate_shares(z_rel[sl], z_irr[sl], b[sl], f, f0)
        ri, ii, bi = shares["i"]
        rf, if_, bf = shares["f"]
        rg, ig, bg = shares["g"]
        ro, io, bo = shares["o"]
        f_total = _sigmoid(z_total[gate_slices["f"]])
        o_total = _sigmoid(z_total[gate_slices["o"]])

        new_beta_c = (rf + bf) * beta_c + ri * (rg + bg) + bi * rg
        new_gamma_c = (if_ * beta_c + f_total * gamma_c
                       + ri * ig + ii * (rg + ig + bg) + bi * (ig + bg))
        beta_c, gamma_c = new_beta_c, new_gamma_c

        t_beta, t_gamma = linearize_activation([beta_c, gamma_c], np.tanh)
        beta_h = (ro + bo) * t_beta
        gamma_h = io * t_beta + o_total * t_gamma
    return beta_h, gamma_h


def cd_lstm(model: TaggerModel, ids, index_set) -> WordDecomposition:
    """Relevant/irrelevant split of the BiLSTM representation.

    Gate pre-activations are split three ways (input term by membership of
    the current position in S, recurrent term by the split of the previous
    hidden state, bias) and products of shares are routed so that bias-only
    interactions always land in gamma.  With S empty, beta is exactly zero.
    """
    s = validate_index_set(index_set, ids)
    X = model.params["embedding"][np.asarray(ids, dtype=np.intp)]
    mask = relevance_mask(s, len(ids))
    b_fw, g_fw = _cd_lstm_direction(model, X, mask, "fw", reverse=False)
    b_bw, g_bw = _cd_lstm_direction(model, X, mask, "bw", reverse=True)
    return WordDecomposition(beta=np.concatenate([b_fw, b_bw]),
                             gamma=np.concatenate([g_fw, g_bw]))


def decompose(model: TaggerModel, ids, index_set) -> WordDecomposition:
    if model.arch == "cnn":
        return cd_cnn(model, ids, index_set)
    if model.arch == "bilstm":
        return cd_lstm(model, ids, index_set)
    raise DecompositionError(f"unknown architecture {model.arch!r}")


# ---------------------------------------------------------------------------
# Class-level contributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassContribution:
    """Per-label split of one classifier head's logits.

    ``relevant + irrelevant + bias`` reproduces the logits the model actually
    produced for the word; ``relevant`` is the attribution score of S.
    """

    class_name: str
    labels: tuple[str, ...]
    relevant: np.ndarray
    irrelevant: np.ndarray
    bias: np.ndarray
    logits: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.logits - (self.relevant + self.irrelevant + self.bias)

    def score(self, label: str) -> float:
        return float(self.relevant[self.labels.index(label)])


def class_contribution(model: TaggerModel, ids, index_set,
                       class_name: str) -> ClassContribution:
    if class_name not in model.schema.class_names:
        raise DecompositionError(f"unknown feature class {class_name!r}")
    decomp = decompose(model, ids, index_set)
    w, b = model.head(class_name)
    rep = model.representation(ids)
    return ClassContribution(
        class_name=class_name,
        labels=tuple(model.schema.labels(class_name)),
        relevant=decomp.beta @ w,
        irrelevant=decomp.gamma @ w,
        bias=b.copy(),
        logits=rep @ w + b)


# ---------------------------------------------------------------------------
# Flattened contexts for the batched scoring kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CnnKernelContext:
    """Everything a kernel needs to score many candidate sets for one word."""

    win_pos: np.ndarray       # (d2, max_width) int32, -1 padded
    win_contrib: np.ndarray   # (d2, max_width) float64
    total: np.ndarray         # (d2,) window pre-activation without bias
    bias: np.ndarray          # (d2,)
    seq_len: int


@dataclass(frozen=True)
class LstmKernelContext:
    xw_fw: np.ndarray  # (T, 4H)
    wh_fw: np.ndarray  # (H, 4H)
    b_fw: np.ndarray   # (4H,)
    xw_bw: np.ndarray
    wh_bw: np.ndarray
    b_bw: np.ndarray
    hidden: int
    seq_len: int


def cnn_kernel_context(model: TaggerModel, ids) -> CnnKernelContext:
    fwd = cnn_forward(model, ids)
    split = conv_preactivation_split(
        model, fwd, np.zeros(len(ids), dtype=bool))
    return CnnKernelContext(
        win_pos=split.win_pos.astype(np.int32),
        win_contrib=np.ascontiguousarray(split.win_contrib),
        total=split.win_contrib.sum(axis=1),
        bias=split.bias,
        seq_len=len(ids))


def lstm_kernel_context(model: TaggerModel, ids) -> LstmKernelContext:
    X = model.params["embedding"][np.asarray(ids, dtype=np.intp)]
    return LstmKernelContext(
        xw_fw=np.ascontiguousarray(X @ model.params["fw:wx"]),
        wh_fw=np.ascontiguousarray(model.params["fw:wh"]),
        b_fw=model.params["fw:b"],
        xw_bw=np.ascontiguousarray(X @ model.params["bw:wx"]),
        wh_bw=np.ascontiguousarray(model.params["bw:wh"]),
        b_bw=model.params["bw:b"],
        hidden=model.config.hidden,
        seq_len=len(ids))
