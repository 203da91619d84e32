"""Backend dispatch for the batched candidate-scoring kernels.

At import time the compiled extension is preferred when present; the
``CHARCD_KERNEL`` environment variable forces a choice (``compiled``,
``fallback`` or ``auto``).  Both backends implement the same contract and
agree to float rounding; ``backend_name()`` reports which one is active.
"""

from __future__ import annotations

import os

import numpy as np

from . import fallback as _fallback

__all__ = [
    "KernelError",
    "backend_name",
    "compiled_available",
    "cnn_cd_scores",
    "lstm_cd_scores",
]


class KernelError(RuntimeError):
    pass


def _load_compiled():
    try:
        from . import _fastcd  # noqa: PLC0415
    except ImportError:
        return None
    return _fastcd


_choice = os.environ.get("CHARCD_KERNEL", "auto")
if _choice not in ("auto", "compiled", "fallback"):
    raise KernelError(
        f"CHARCD_KERNEL={_choice!r} not understood "
        "(expected auto, compiled or fallback)")
if _choice == "fallback":
    _impl = _fallback
else:
    _compiled = _load_compiled()
    if _compiled is None:
        if _choice == "compiled":
            raise KernelError(
                "CHARCD_KERNEL=compiled but the extension is not built")
        _impl = _fallback
    else:
        _impl = _compiled


def backend_name() -> str:
    return _impl.NAME


def compiled_available() -> bool:
    return _load_compiled() is not None


def _check_masks(masks: np.ndarray, seq_len: int) -> np.ndarray:
    masks = np.ascontiguousarray(masks, dtype=bool)
    if masks.ndim != 2 or masks.shape[1] != seq_len:
        raise KernelError(
            f"masks must be (M, {seq_len}), got {masks.shape}")
    return masks


def cnn_cd_scores(ctx, masks, wcols, impl=None) -> np.ndarray:
    """Relevant scores (M, C) for M candidate masks against head columns."""
    impl = impl or _impl
    masks = _check_masks(masks, ctx.seq_len)
    wcols = np.ascontiguousarray(wcols, dtype=np.float64)
    if wcols.ndim != 2 or wcols.shape[0] != ctx.win_pos.shape[0]:
        raise KernelError(
            f"wcols must be ({ctx.win_pos.shape[0]}, C), got {wcols.shape}")
    if impl is _fallback:
        return impl.cnn_cd_scores(ctx.win_pos, ctx.win_contrib, ctx.total,
                                  ctx.bias, masks, wcols)
    return impl.cnn_cd_scores(ctx.win_pos, ctx.win_contrib, ctx.total,
                              ctx.bias, masks.view(np.uint8), wcols)


def lstm_cd_scores(ctx, masks, wcols, impl=None) -> np.ndarray:
    impl = impl or _impl
    masks = _check_masks(masks, ctx.seq_len)
    wcols = np.ascontiguousarray(wcols, dtype=np.float64)
    if wcols.ndim != 2 or wcols.shape[0] != 2 * ctx.hidden:
        raise KernelError(
            f"wcols must be ({2 * ctx.hidden}, C), got {wcols.shape}")
    return impl.lstm_cd_scores(ctx.xw_fw, ctx.wh_fw, ctx.b_fw,
                               ctx.xw_bw, ctx.wh_bw, ctx.b_bw, masks, wcols)
