"""Dependency-free SVG panels rendered from a run directory.

All numbers are written with fixed precision, so identical CSVs give
byte-identical SVGs.
"""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["SchemaError", "plot_run", "read_table"]

W, H = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 56, 16, 28, 44
PALETTE = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]


class SchemaError(ValueError):
    """A CSV lacks a column the plot needs."""


def read_table(path, required) -> dict:
    """Read a CSV into float columns, checking ``required`` column names.

    Columns that do not parse as numbers are returned as strings.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [row for row in r if row]
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    out = {}
    for j, name in enumerate(header):
        col = [row[j] for row in rows]
        try:
            out[name] = np.array([_num(s) for s in col], dtype=float)
        except ValueError:
            if name in required:
                raise SchemaError(f"{path}: column {name} is not numeric") from None
            out[name] = np.array(col, dtype=str)  # free text, e.g. notes
    return out


def _num(s: str) -> float:
    if s in ("", "nan"):
        return float("nan")
    if s in ("True", "False"):
        return float(s == "True")
    return float(s)


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    def __init__(self, title, xlim, ylim, xlabel, ylabel):
        self.xlim = xlim
        self.ylim = ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
            'font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W // 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        ]
        self._axes(xlabel, ylabel)

    def sx(self, x):
        a, b = self.xlim
        return LEFT + (np.asarray(x, float) - a) / (b - a) * (W - LEFT - RIGHT)

    def sy(self, y):
        a, b = self.ylim
        return H - BOTTOM - (np.asarray(y, float) - a) / (b - a) * (H - TOP - BOTTOM)

    def _axes(self, xlabel, ylabel):
        x0, x1 = LEFT, W - RIGHT
        y0, y1 = H - BOTTOM, TOP
        p = self.parts
        p.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>')
        for t in np.linspace(*self.xlim, 5):
            X = _f(self.sx(t))
            p.append(f'<line x1="{X}" y1="{y0}" x2="{X}" y2="{y0 + 4}" stroke="black"/>')
            p.append(f'<text x="{X}" y="{y0 + 16}" text-anchor="middle">{t:.3g}</text>')
        for t in np.linspace(*self.ylim, 5):
            Y = _f(self.sy(t))
            p.append(f'<line x1="{x0 - 4}" y1="{Y}" x2="{x0}" y2="{Y}" stroke="black"/>')
            p.append(f'<text x="{x0 - 6}" y="{Y}" text-anchor="end" dominant-baseline="middle">{t:.3g}</text>')
        p.append(f'<text x="{(x0 + x1) // 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>')
        p.append(
            f'<text x="14" y="{(y0 + y1) // 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {(y0 + y1) // 2})">{escape(ylabel)}</text>'
        )

    def polyline(self, x, y, color, width=1.5, dash=None):
        ok = np.isfinite(x) & np.isfinite(y)
        if ok.sum() < 2:
            return
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(self.sx(x[ok]), self.sy(y[ok])))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>')

    def band(self, x, lo, hi, color, opacity=0.25):
        lo = np.clip(lo, *self.ylim)
        hi = np.clip(hi, *self.ylim)
        ok = np.isfinite(lo) & np.isfinite(hi)
        if ok.sum() < 2:
            return
        xs, l, h = x[ok], lo[ok], hi[ok]
        pts = [f"{_f(a)},{_f(b)}" for a, b in zip(self.sx(xs), self.sy(h))]
        pts += [f"{_f(a)},{_f(b)}" for a, b in zip(self.sx(xs[::-1]), self.sy(l[::-1]))]
        self.parts.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="{opacity}" stroke="none"/>')

    def cells(self, x, y, dx, dy, color, opacity):
        for a, b in zip(x, y):
            X0, X1 = self.sx(a - dx / 2), self.sx(a + dx / 2)
            Y0, Y1 = self.sy(b + dy / 2), self.sy(b - dy / 2)
            self.parts.append(
                f'<rect x="{_f(X0)}" y="{_f(Y0)}" width="{_f(X1 - X0)}" height="{_f(Y1 - Y0)}" '
                f'fill="{color}" fill-opacity="{opacity}"/>'
            )

    def points(self, x, y, color, r=2.0):
        for a, b in zip(self.sx(x), self.sy(y)):
            self.parts.append(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="{r}" fill="{color}"/>')

    def legend(self, items):
        for k, (label, color) in enumerate(items):
            y = TOP + 12 + 14 * k
            self.parts.append(f'<rect x="{LEFT + 8}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{LEFT + 22}" y="{y}">{escape(label)}</text>')

    def save(self, path):
        Path(path).write_text("\n".join(self.parts + ["</svg>"]) + "\n")


def _certificates(run_dir: Path):
    files = sorted((run_dir / "certificates").glob("certificate_*.csv"))
    if not files:
        raise SchemaError(f"{run_dir / 'certificates'}: no certificate CSVs")
    return files


def _s0_states(run_dir: Path, d: int):
    """Distinct states of the initial safe set, from ``safe_set_final.csv``."""
    path = run_dir / "safe_set_final.csv"
    if not path.exists():
        return np.zeros((0, d))
    t = read_table(path, [f"x{i}" for i in range(d)] + ["in_s0"])
    X = np.stack([t[f"x{i}"] for i in range(d)], axis=1)[t["in_s0"] > 0]
    return np.unique(X, axis=0) if len(X) else X


def _safe_set_2d(run_dir: Path, out: Path, bins: int = 64) -> Path:
    files = _certificates(run_dir)
    c = _Canvas("Certified level sets", (-1, 1), (-1, 1), "x0 (normalized angle)", "x1 (normalized velocity)")
    dx = 2.0 / bins
    legend = []
    picks = files if len(files) <= 6 else [files[int(round(i))] for i in np.linspace(0, len(files) - 1, 6)]
    s0 = _s0_states(run_dir, 2)
    if len(s0):
        c.cells(*_binned(s0, bins), dx, dx, "#999999", 0.6)
        legend.append(("initial safe set", "#999999"))
    for k, f in enumerate(reversed(picks)):
        t = read_table(f, ["x0", "x1", "in_level_set"])
        X = np.stack([t["x0"], t["x1"]], axis=1)[t["in_level_set"] > 0]
        color = PALETTE[k % len(PALETTE)]
        if len(X):
            c.cells(*_binned(X, bins), dx, dx, color, 0.35)
        legend.append((f"{f.stem.split('_')[-1]}: {len(X)} cells", color))
    c.legend(legend)
    path = out / "safe_sets.svg"
    c.save(path)
    return path


def _binned(X, bins):
    """Centres of the coarse bins of ``[-1, 1]^2`` touched by ``X``."""
    idx = np.clip(np.floor((X + 1) / 2 * bins).astype(int), 0, bins - 1)
    idx = np.unique(idx[:, 0] * bins + idx[:, 1])
    centre = lambda i: -1 + (i + 0.5) * 2.0 / bins  # noqa: E731
    return centre(idx // bins), centre(idx % bins)


def _bands_1d(run_dir: Path, out: Path) -> Path:
    files = _certificates(run_dir)
    t = read_table(files[-1], ["x0", "v", "l_n", "u_n", "in_level_set"])
    o = np.argsort(t["x0"], kind="stable")
    x = t["x0"][o]
    top = max(float(np.nanmax(t["v"])), 1e-9)
    c = _Canvas(f"Confidence bands ({files[-1].stem})", (float(x.min()), float(x.max())), (0, top),
                "x", "v")
    c.band(x, t["l_n"][o], t["u_n"][o], PALETTE[2])
    c.polyline(x, t["v"][o], "black")
    inside = t["in_level_set"][o] > 0
    if inside.any():
        c.points(x[inside], np.zeros(inside.sum()), PALETTE[0], r=1.2)
    s0 = _s0_states(run_dir, 1)
    if len(s0):
        c.points(s0[:, 0], np.zeros(len(s0)), "#999999", r=1.2)
    c.legend([("v(x)", "black"), ("[l_n, u_n] of v(f(x, pi(x)))", PALETTE[2]), ("certified", PALETTE[0]),
              ("initial safe set", "#999999")])
    path = out / "confidence_bands.svg"
    c.save(path)
    return path


def _pairs_1d(run_dir: Path, out: Path) -> Path:
    t = read_table(run_dir / "safe_set_final.csv", ["x0", "u0", "in_s0"])
    lo, hi = _limits(np.concatenate([t["x0"], [0.0]]))
    ulo, uhi = _limits(np.concatenate([t["u0"], [0.0]]))
    c = _Canvas("Final safe set S_n", (lo, hi), (ulo, uhi), "x", "u")
    s0 = t["in_s0"] > 0
    c.points(t["x0"][~s0], t["u0"][~s0], PALETTE[0], r=1.2)
    c.points(t["x0"][s0], t["u0"][s0], "#999999", r=1.2)
    obs = run_dir / "observations.csv"
    if obs.exists():
        o = read_table(obs, ["x0", "u0"])
        c.points(o["x0"], o["u0"], PALETTE[1], r=2.5)
    c.legend([("safe pairs", PALETTE[0]), ("initial safe set", "#999999"), ("samples", PALETTE[1])])
    path = out / "safe_set_pairs.svg"
    c.save(path)
    return path


def _limits(v):
    v = v[np.isfinite(v)]
    if not len(v):
        return -1.0, 1.0
    a, b = float(v.min()), float(v.max())
    pad = 0.05 * (b - a) if b > a else 0.5
    return a - pad, b + pad


def _trajectories(run_dir: Path, out: Path, d: int) -> Path:
    cols = ["t"] + [f"x{i}" for i in range(d)]
    tables = {name: read_table(run_dir / f"trajectory_{name}.csv", cols) for name in ("prior", "learned")}
    allx = np.concatenate([tables[k][f"x{i}"] for k in tables for i in range(d)])
    tmax = max(float(tables[k]["t"].max()) for k in tables)
    c = _Canvas("Closed-loop trajectories", (0, tmax), _limits(allx), "step", "state")
    legend = []
    for k, name in enumerate(("prior", "learned")):
        for i in range(d):
            color = PALETTE[2 * k + i]
            c.polyline(tables[name]["t"], tables[name][f"x{i}"], color, dash="4 3" if name == "prior" else None)
            legend.append((f"{name} x{i}", color))
    c.legend(legend)
    path = out / "trajectories.svg"
    c.save(path)
    return path


def _growth(run_dir: Path, out: Path) -> Path:
    t = read_table(run_dir / "runlog.csv", ["n", "certified_cells", "safe_pairs"])
    n = t["n"]
    top = max(float(np.nanmax(t["certified_cells"])), float(np.nanmax(t["safe_pairs"])), 1.0)
    c = _Canvas("Safe-set growth", (0, max(float(n.max()), 1.0)), (0, top * 1.05), "iteration", "count")
    c.polyline(n, t["certified_cells"], PALETTE[0])
    c.polyline(n, t["safe_pairs"], PALETTE[1])
    c.legend([("certified cells", PALETTE[0]), ("safe pairs", PALETTE[1])])
    path = out / "growth.svg"
    c.save(path)
    return path


def plot_run(run_dir, output_dir=None) -> list:
    """Render every panel the run directory supports; returns the SVG paths."""
    run_dir = Path(run_dir)
    out = Path(output_dir) if output_dir is not None else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    header = read_table(_certificates(run_dir)[0], ["cell_index", "v", "l_n", "u_n", "in_level_set"])
    d = sum(1 for k in header if k.startswith("x") and k[1:].isdigit())
    paths = [_growth(run_dir, out)]
    if d == 2:
        paths.append(_safe_set_2d(run_dir, out))
    elif d == 1:
        paths.append(_bands_1d(run_dir, out))
        if (run_dir / "safe_set_final.csv").exists():
            paths.append(_pairs_1d(run_dir, out))
    else:
        raise SchemaError(f"{run_dir}: certificates have {d} state columns; only 1 or 2 are plotted")
    paths.append(_trajectories(run_dir, out, d))
    return paths
