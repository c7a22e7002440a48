"""Hand-emitted SVG loss curves; no plotting dependency."""

from __future__ import annotations

import math
from pathlib import Path

from .errors import ContractError
from .harness import RunLog

SERIES = ("loss_src", "loss_scc", "loss_hdce", "loss_gan_g", "loss_gan_d", "loss_total")
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#17becf")

_W, _H = 960, 520
_ML, _MR, _MT, _MB = 64, 160, 24, 44


def _ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * max(abs(hi), 1.0):
        out.append(round(v, 12))
        v += step
    return out or [lo, hi]


def loss_curves_svg(rows: list[dict]) -> str:
    """One polyline per loss term, linear axes, inline legend."""
    if not rows:
        raise ContractError("loss_curves_svg: empty log")
    steps = [r["step"] for r in rows]
    values = [v for name in SERIES for v in (r[name] for r in rows) if math.isfinite(v)]
    x_lo, x_hi = min(steps), max(steps)
    y_lo, y_hi = min(values), max(values)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    inner_w = _W - _ML - _MR
    inner_h = _H - _MT - _MB

    def sx(v):
        return _ML + inner_w * (v - x_lo) / (x_hi - x_lo)

    def sy(v):
        return _MT + inner_h * (1.0 - (v - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    for t in _ticks(y_lo, y_hi):
        y = sy(t)
        parts.append(
            f'<line x1="{_ML}" y1="{y:.1f}" x2="{_W - _MR}" y2="{y:.1f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(f'<text x="{_ML - 6}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    for t in _ticks(x_lo, x_hi):
        x = sx(t)
        parts.append(
            f'<line x1="{x:.1f}" y1="{_MT}" x2="{x:.1f}" y2="{_H - _MB}" '
            f'stroke="#eeeeee" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{_H - _MB + 16}" text-anchor="middle">{t:g}</text>'
        )
    parts.append(
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>'
    )
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>')
    parts.append(
        f'<text x="{_ML + inner_w / 2:.1f}" y="{_H - 8}" text-anchor="middle">step</text>'
    )
    for name, color in zip(SERIES, COLORS):
        pts = " ".join(
            f"{sx(r['step']):.2f},{sy(r[name]):.2f}" for r in rows if math.isfinite(r[name])
        )
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
    for i, (name, color) in enumerate(zip(SERIES, COLORS)):
        y = _MT + 16 + 18 * i
        x = _W - _MR + 12
        parts.append(
            f'<line x1="{x}" y1="{y - 4}" x2="{x + 22}" y2="{y - 4}" '
            f'stroke="{color}" stroke-width="3"/>'
        )
        parts.append(f'<text x="{x + 28}" y="{y}">{name[5:]}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_loss_plot(log_csv, out_svg) -> None:
    rows = RunLog.read_csv(log_csv)
    Path(out_svg).write_text(loss_curves_svg(rows) + "\n")
