"""Deterministic run artifacts: manifests, JSONL records, SVG heatmaps.

Artifacts carry no timestamps or machine-specific fields, so re-running the
same command on the same inputs reproduces them byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .kernels import backend_name

__all__ = [
    "sha256_file",
    "RunManifest",
    "write_jsonl",
    "read_jsonl",
    "heatmap_svg",
    "matrix_text",
]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    """What produced an artifact: command, arguments, input digests."""

    command: str
    arguments: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # name -> sha256 hex
    version: str = __version__
    kernel_backend: str = ""

    def __post_init__(self):
        if not self.kernel_backend:
            self.kernel_backend = backend_name()

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = sha256_file(path)

    def to_dict(self) -> dict:
        return {
            "record": "manifest",
            "command": self.command,
            "arguments": dict(sorted(self.arguments.items())),
            "inputs": dict(sorted(self.inputs.items())),
            "version": self.version,
            "kernel_backend": self.kernel_backend,
        }


def _canonical(obj):
    """Make records JSON-stable: sort keys, convert numpy scalars/arrays."""
    if isinstance(obj, dict):
        return {k: _canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_canonical(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_jsonl(path, manifest: RunManifest, records) -> None:
    """Manifest first, then one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_canonical(manifest.to_dict()), sort_keys=True)
                 + "\n")
        for rec in records:
            fh.write(json.dumps(_canonical(rec), sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "manifest":
        raise ValueError(f"{path}: missing manifest record")
    return lines[0], lines[1:]


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------

_NEG = (0x21, 0x66, 0xAC)   # saturated blue for the most negative score
_POS = (0xB2, 0x18, 0x2B)   # saturated red for the most positive score
_CELL = 30
_PAD_LEFT = 86
_PAD_TOP = 46
_BAR_H = 14


def _blend(target, frac: float) -> str:
    r = round(255 + (target[0] - 255) * frac)
    g = round(255 + (target[1] - 255) * frac)
    b = round(255 + (target[2] - 255) * frac)
    return f"#{r:02x}{g:02x}{b:02x}"


def _cell_color(v: float, vmax: float) -> str:
    if vmax <= 0.0:
        return "#ffffff"
    frac = min(abs(v) / vmax, 1.0)
    return _blend(_POS if v >= 0.0 else _NEG, frac)


def heatmap_svg(row_labels, col_labels, matrix, bold_cols=(),
                title: str = "") -> str:
    """Symmetric diverging heatmap (white at zero) as a standalone SVG.

    ``bold_cols`` column indices are emphasized (used for annotated
    ground-truth characters).  Output is deterministic: fixed layout,
    fixed number formatting.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape != (len(row_labels), len(col_labels)):
        raise ValueError(
            f"matrix shape {m.shape} does not match labels "
            f"({len(row_labels)} x {len(col_labels)})")
    vmax = float(np.abs(m).max()) if m.size else 0.0
    bold = set(int(c) for c in bold_cols)
    width = _PAD_LEFT + _CELL * len(col_labels) + 20
    height = _PAD_TOP + _CELL * len(row_labels) + 70
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="monospace" font-size="13">',
        '<rect width="100%" height="100%" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{_PAD_LEFT}" y="18" font-size="14">'
                   f'{_escape(title)}</text>')
    for j, lab in enumerate(col_labels):
        x = _PAD_LEFT + j * _CELL + _CELL // 2
        weight = ' font-weight="bold"' if j in bold else ""
        out.append(f'<text x="{x}" y="{_PAD_TOP - 8}" '
                   f'text-anchor="middle"{weight}>{_escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        y = _PAD_TOP + i * _CELL + _CELL // 2 + 4
        out.append(f'<text x="{_PAD_LEFT - 6}" y="{y}" '
                   f'text-anchor="end">{_escape(str(lab))}</text>')
        for j in range(len(col_labels)):
            x = _PAD_LEFT + j * _CELL
            yy = _PAD_TOP + i * _CELL
            color = _cell_color(float(m[i, j]), vmax)
            out.append(f'<rect x="{x}" y="{yy}" width="{_CELL}" '
                       f'height="{_CELL}" fill="{color}" '
                       f'stroke="#cccccc" stroke-width="1"/>')
    bar_y = _PAD_TOP + _CELL * len(row_labels) + 18
    bar_w = _CELL * len(col_labels)
    out.append('<defs><linearGradient id="scale" x1="0" x2="1" y1="0" y2="0">'
               f'<stop offset="0" stop-color="{_blend(_NEG, 1.0)}"/>'
               '<stop offset="0.5" stop-color="#ffffff"/>'
               f'<stop offset="1" stop-color="{_blend(_POS, 1.0)}"/>'
               '</linearGradient></defs>')
    out.append(f'<rect x="{_PAD_LEFT}" y="{bar_y}" width="{bar_w}" '
               f'height="{_BAR_H}" fill="url(#scale)" stroke="#888888"/>')
    label_y = bar_y + _BAR_H + 16
    out.append(f'<text x="{_PAD_LEFT}" y="{label_y}" text-anchor="middle">'
               f'{-vmax:.4f}</text>')
    out.append(f'<text x="{_PAD_LEFT + bar_w // 2}" y="{label_y}" '
               'text-anchor="middle">0</text>')
    out.append(f'<text x="{_PAD_LEFT + bar_w}" y="{label_y}" '
               f'text-anchor="middle">{vmax:.4f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def matrix_text(row_labels, col_labels, matrix) -> str:
    """Tab-separated twin of the heatmap for diffing and grepping."""
    m = np.asarray(matrix, dtype=np.float64)
    lines = ["\t" + "\t".join(str(c) for c in col_labels)]
    for lab, row in zip(row_labels, m):
        lines.append(str(lab) + "\t"
                     + "\t".join(f"{v:+.6f}" for v in row))
    return "\n".join(lines) + "\n"
