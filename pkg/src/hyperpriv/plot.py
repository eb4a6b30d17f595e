"""Dependency-free SVG rendering of Kaplan-Meier curve pairs.

Two step curves (low risk blue, high risk red), censor tick marks on each
curve, axes with round tick labels and the log-rank p annotation.  Output is a
plain SVG string built with fixed-precision coordinates, so identical inputs
render byte-identical files.
"""

from .metrics import EndpointReport, KMTable

WIDTH, HEIGHT = 560, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 20, 38, 52
COLOR_LOW, COLOR_HIGH = "#2b6cb0", "#c53030"


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _x_ticks(t_max: float, n: int = 6):
    if t_max <= 0:
        return [0.0]
    raw = t_max / n
    magnitude = 10 ** len(str(int(raw))) / 10 if raw >= 1 else 1.0
    step = max(round(raw / magnitude) * magnitude, magnitude)
    ticks = []
    t = 0.0
    while t <= t_max * 1.001:
        ticks.append(t)
        t += step
    return ticks


class _Frame:
    def __init__(self, t_max: float):
        self.t_max = max(t_max, 1e-9)

    def x(self, t: float) -> float:
        span = WIDTH - MARGIN_L - MARGIN_R
        return MARGIN_L + span * min(t, self.t_max) / self.t_max

    def y(self, s: float) -> float:
        span = HEIGHT - MARGIN_T - MARGIN_B
        return MARGIN_T + span * (1.0 - s)


def _step_path(km: KMTable, frame: _Frame) -> str:
    pts = [(0.0, 1.0)]
    s = 1.0
    for t, s_next in zip(km.times, km.survival):
        pts.append((float(t), s))
        pts.append((float(t), float(s_next)))
        s = float(s_next)
    tail = max(float(km.censor_times[-1]) if km.censor_times.size else 0.0, frame.t_max)
    pts.append((tail, s))
    head = f"M {_fmt(frame.x(pts[0][0]))} {_fmt(frame.y(pts[0][1]))}"
    rest = " ".join(f"L {_fmt(frame.x(t))} {_fmt(frame.y(s))}" for t, s in pts[1:])
    return f"{head} {rest}"


def _censor_ticks(km: KMTable, frame: _Frame, color: str) -> list:
    marks = []
    for t in km.censor_times:
        x = _fmt(frame.x(float(t)))
        y = frame.y(km.survival_at(float(t)))
        marks.append(
            f'<line x1="{x}" y1="{_fmt(y - 5)}" x2="{x}" y2="{_fmt(y + 5)}" '
            f'stroke="{color}" stroke-width="1.2"/>'
        )
    return marks


def km_plot_svg(report: EndpointReport, endpoint_label: str) -> str:
    """Render one endpoint's stratified KM pair as an SVG document."""
    tails = [km.times[-1] if km.times.size else 0.0 for km in (report.km_low, report.km_high)]
    tails += [km.censor_times[-1] if km.censor_times.size else 0.0 for km in (report.km_low, report.km_high)]
    frame = _Frame(float(max(tails)))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Helvetica, Arial, sans-serif">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="15">'
        f"{endpoint_label} by predicted risk stratum</text>",
    ]

    x0, y0 = MARGIN_L, HEIGHT - MARGIN_B
    x1, y1 = WIDTH - MARGIN_R, MARGIN_T
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')

    for s in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = frame.y(s)
        parts.append(f'<line x1="{x0 - 4}" y1="{_fmt(y)}" x2="{x0}" y2="{_fmt(y)}" stroke="black"/>')
        parts.append(
            f'<text x="{x0 - 8}" y="{_fmt(y + 4)}" text-anchor="end" font-size="11">{s:g}</text>'
        )
        if s > 0:
            parts.append(
                f'<line x1="{x0}" y1="{_fmt(y)}" x2="{x1}" y2="{_fmt(y)}" '
                f'stroke="#dddddd" stroke-width="0.6"/>'
            )
    for t in _x_ticks(frame.t_max):
        x = frame.x(t)
        parts.append(f'<line x1="{_fmt(x)}" y1="{y0}" x2="{_fmt(x)}" y2="{y0 + 4}" stroke="black"/>')
        parts.append(
            f'<text x="{_fmt(x)}" y="{y0 + 18}" text-anchor="middle" font-size="11">{t:g}</text>'
        )

    parts.append(
        f'<text x="{(x0 + x1) / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-size="12">time (months)</text>'
    )
    parts.append(
        f'<text x="16" y="{(y0 + y1) / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2:.0f})">survival probability</text>'
    )

    for km, color in ((report.km_low, COLOR_LOW), (report.km_high, COLOR_HIGH)):
        parts.append(
            f'<path d="{_step_path(km, frame)}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        parts.extend(_censor_ticks(km, frame, color))

    lx = x0 + 14
    parts.append(
        f'<line x1="{lx}" y1="{y1 + 14}" x2="{lx + 26}" y2="{y1 + 14}" stroke="{COLOR_LOW}" stroke-width="2"/>'
    )
    parts.append(f'<text x="{lx + 32}" y="{y1 + 18}" font-size="12">low risk</text>')
    parts.append(
        f'<line x1="{lx}" y1="{y1 + 32}" x2="{lx + 26}" y2="{y1 + 32}" stroke="{COLOR_HIGH}" stroke-width="2"/>'
    )
    parts.append(f'<text x="{lx + 32}" y="{y1 + 36}" font-size="12">high risk</text>')
    parts.append(
        f'<text x="{x1 - 6}" y="{y1 + 18}" text-anchor="end" font-size="12">'
        f"log-rank p = {report.log_rank.p_value:.4g}</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
