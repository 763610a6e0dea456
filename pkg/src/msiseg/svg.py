"""Tiny dependency-free SVG charts for run reports."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _doc(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n{body}</svg>\n')


def line_chart(series: dict, title: str, xlabel: str = "epoch", ylabel: str = "", width=480, height=300) -> str:
    """``series`` maps a legend name to a list of (x, y) points."""
    pts = [p for s in series.values() for p in s if p[1] == p[1]]
    left, right, top, bottom = 50, 130, 30, 40
    pw, ph = width - left - right, height - top - bottom
    body = [f'<text x="{width / 2:.0f}" y="18" text-anchor="middle">{escape(title)}</text>']
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
        x1 = x1 if x1 > x0 else x0 + 1
        y1 = y1 if y1 > y0 else y0 + 1
        sx = lambda x: left + (x - x0) / (x1 - x0) * pw
        sy = lambda y: top + ph - (y - y0) / (y1 - y0) * ph
        body.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>')
        for v, y in ((y0, top + ph), (y1, top)):
            body.append(f'<text x="{left - 4}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
        for v, x in ((x0, left), (x1, left + pw)):
            body.append(f'<text x="{x:.1f}" y="{top + ph + 14}" text-anchor="middle">{v:.3g}</text>')
        for i, (name, s) in enumerate(series.items()):
            color = PALETTE[i % len(PALETTE)]
            good = [p for p in s if p[1] == p[1]]
            if good:
                path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in good)
                body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            ly = top + 12 + 16 * i
            body.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" '
                        f'stroke="{color}" stroke-width="2"/>')
            body.append(f'<text x="{left + pw + 32}" y="{ly}">{escape(name)}</text>')
    body.append(f'<text x="{left + pw / 2:.0f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        body.append(f'<text x="12" y="{top + ph / 2:.0f}" transform="rotate(-90 12 {top + ph / 2:.0f})" '
                    f'text-anchor="middle">{escape(ylabel)}</text>')
    return _doc(width, height, "\n".join(body) + "\n")


def heatmap(matrix, labels, title: str, cell=28) -> str:
    """Row-normalized matrix (values in [0, 1]) as a blue heat map with percentages."""
    n = len(labels)
    left, top = 110, 40
    width, height = left + cell * n + 10, top + cell * n + 90
    body = [f'<text x="{width / 2:.0f}" y="18" text-anchor="middle">{escape(title)}</text>']
    for i in range(n):
        body.append(f'<text x="{left - 4}" y="{top + cell * i + cell / 2 + 4:.1f}" text-anchor="end">'
                    f'{escape(str(labels[i]))}</text>')
        cx = left + cell * i + cell / 2
        cy = top + cell * n + 6
        body.append(f'<text x="{cx:.1f}" y="{cy:.1f}" transform="rotate(60 {cx:.1f} {cy:.1f})">'
                    f'{escape(str(labels[i]))}</text>')
        for j in range(n):
            v = float(matrix[i][j])
            shade = int(round(255 * (1 - min(max(v, 0.0), 1.0))))
            fill = f"rgb({shade},{shade},255)"
            x, y = left + cell * j, top + cell * i
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#ccc"/>')
            ink = "white" if v > 0.6 else "black"
            body.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                        f'font-size="9" fill="{ink}">{100 * v:.0f}</text>')
    return _doc(width, height, "\n".join(body) + "\n")


def bar_chart(values: dict, title: str, ylabel: str = "", width=420, height=260) -> str:
    left, top, bottom = 50, 30, 40
    pw, ph = width - left - 20, height - top - bottom
    vmax = max([v for v in values.values()] + [1e-12])
    n = max(len(values), 1)
    bw = pw / n
    body = [f'<text x="{width / 2:.0f}" y="18" text-anchor="middle">{escape(title)}</text>',
            f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#888"/>']
    for i, (name, v) in enumerate(values.items()):
        h = ph * v / vmax
        x = left + i * bw + bw * 0.15
        body.append(f'<rect x="{x:.1f}" y="{top + ph - h:.1f}" width="{bw * 0.7:.1f}" height="{h:.1f}" '
                    f'fill="{PALETTE[0]}"/>')
        body.append(f'<text x="{x + bw * 0.35:.1f}" y="{top + ph - h - 4:.1f}" text-anchor="middle">{v:.3g}</text>')
        body.append(f'<text x="{x + bw * 0.35:.1f}" y="{top + ph + 14}" text-anchor="middle">{escape(name)}</text>')
    if ylabel:
        body.append(f'<text x="12" y="{top + ph / 2:.0f}" transform="rotate(-90 12 {top + ph / 2:.0f})" '
                    f'text-anchor="middle">{escape(ylabel)}</text>')
    return _doc(width, height, "\n".join(body) + "\n")
