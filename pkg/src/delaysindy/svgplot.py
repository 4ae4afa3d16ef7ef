"""Self-contained line plots written as scalable vector graphics.

No plotting dependency: each figure is a handful of polyline primitives with
axes, ticks, and a legend. Every plot a command emits is paired with a CSV of
the plotted data so the figure can be re-rendered by any tool.
"""

import numpy as np

PALETTE = ("#1f6fb2", "#d1495b", "#3a7d44", "#8a5fbf", "#e0823d",
           "#2a9d8f", "#7f7f7f", "#b5179e")

_MARGIN = {"left": 64, "right": 16, "top": 34, "bottom": 44}


def _nice_ticks(lo, hi, target=5):
    if not np.isfinite(lo) or not np.isfinite(hi):
        return [0.0, 1.0]
    if hi <= lo:
        pad = 1.0 if lo == 0 else abs(lo) * 0.5
        lo, hi = lo - pad, hi + pad
    raw = (hi - lo) / target
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = np.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 0.5 * step:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks or [lo, hi]


def _fmt_tick(v):
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e4 or a < 1e-3:
        return "%.1e" % v
    return ("%.4f" % v).rstrip("0").rstrip(".")


def line_plot(path, series, title="", xlabel="", ylabel="", width=640, height=420,
              logy=False):
    """Write an SVG line plot.

    series: list of (label, x, y) with 1-D arrays; non-finite points break the
    line. logy drops nonpositive values and draws a log10 axis.
    """
    W, H = width, height
    x0, y0 = _MARGIN["left"], _MARGIN["top"]
    x1, y1 = W - _MARGIN["right"], H - _MARGIN["bottom"]

    prepped = []
    for label, x, y in series:
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        keep = np.isfinite(x) & np.isfinite(y)
        if logy:
            keep &= y > 0
        prepped.append((label, x, y, keep))

    xs = np.concatenate([x[k] for _, x, _, k in prepped if k.any()] or [np.array([0.0, 1.0])])
    ys = np.concatenate([y[k] for _, _, y, k in prepped if k.any()] or [np.array([0.0, 1.0])])
    if logy:
        ys = np.log10(ys)
    xlo, xhi = float(xs.min()), float(xs.max())
    ylo, yhi = float(ys.min()), float(ys.max())
    if xhi <= xlo:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    if yhi <= ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    ypad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - ypad, yhi + ypad

    def sx(v):
        return x0 + (v - xlo) / (xhi - xlo) * (x1 - x0)

    def sy(v):
        return y1 - (v - ylo) / (yhi - ylo) * (y1 - y0)

    out = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
               f'viewBox="0 0 {W} {H}">')
    out.append(f'<rect width="{W}" height="{H}" fill="white"/>')
    out.append(f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
               f'fill="none" stroke="#444" stroke-width="1"/>')
    if title:
        out.append(f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{title}</text>')

    for t in _nice_ticks(xlo, xhi):
        if not xlo <= t <= xhi:
            continue
        px = sx(t)
        out.append(f'<line x1="{px:.1f}" y1="{y1}" x2="{px:.1f}" y2="{y1 + 4}" '
                   f'stroke="#444" stroke-width="1"/>')
        out.append(f'<text x="{px:.1f}" y="{y1 + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{_fmt_tick(t)}</text>')
    for t in _nice_ticks(ylo, yhi):
        if not ylo <= t <= yhi:
            continue
        py = sy(t)
        out.append(f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" '
                   f'stroke="#444" stroke-width="1"/>')
        label = _fmt_tick(10.0 ** t) if logy else _fmt_tick(t)
        out.append(f'<text x="{x0 - 6}" y="{py + 3:.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{label}</text>')
    if xlabel:
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{H - 8}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12" '
                   f'transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">{ylabel}</text>')

    for i, (label, x, y, keep) in enumerate(prepped):
        color = PALETTE[i % len(PALETTE)]
        pts = []
        for xv, yv, ok in zip(x, y, keep):
            if not ok:
                if len(pts) > 1:
                    out.append(_polyline(pts, color))
                pts = []
                continue
            yy = np.log10(yv) if logy else yv
            pts.append((sx(xv), sy(yy)))
        if len(pts) > 1:
            out.append(_polyline(pts, color))

    ly = y0 + 12
    for i, (label, _, _, _) in enumerate(prepped):
        if not label:
            continue
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{x1 - 110}" y1="{ly - 4}" x2="{x1 - 90}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 - 85}" y="{ly}" font-family="sans-serif" '
                   f'font-size="10">{label}</text>')
        ly += 14

    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _polyline(pts, color):
    coords = " ".join(f"{px:.2f},{py:.2f}" for px, py in pts)
    return (f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="1.2"/>')


def write_plot_data(path, columns):
    """CSV companion for a plot: columns is a list of (name, values)."""
    names = [c[0] for c in columns]
    cols = [np.asarray(c[1], dtype=float).ravel() for c in columns]
    rows = max(len(c) for c in cols)
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(rows):
            cells = ["%.17g" % c[i] if i < len(c) else "" for c in cols]
            fh.write(",".join(cells) + "\n")
