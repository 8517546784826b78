"""Minimal SVG output (no plotting dependency) and marching-triangle contours."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .mesh import Mesh


class SvgCanvas:
    """Fixed-size canvas mapping the rectangle ``bounds`` with y pointing up."""

    def __init__(self, bounds, size: int = 600, margin: int = 20):
        self.bounds = tuple(float(b) for b in bounds)
        xmin, xmax, ymin, ymax = self.bounds
        self.scale = (size - 2 * margin) / max(xmax - xmin, ymax - ymin)
        self.margin = margin
        self.width = int(round(2 * margin + self.scale * (xmax - xmin)))
        self.height = int(round(2 * margin + self.scale * (ymax - ymin)))
        self.items: list[str] = []

    def _xy(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        xmin, _, _, ymax = self.bounds
        return np.column_stack([self.margin + self.scale * (pts[:, 0] - xmin),
                                self.margin + self.scale * (ymax - pts[:, 1])])

    @staticmethod
    def _fmt(p) -> str:
        return " ".join(f"{x:.2f},{y:.2f}" for x, y in p)

    def polyline(self, pts, stroke="black", width=1.0, closed=False, dash: str | None = None):
        tag = "polygon" if closed else "polyline"
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<{tag} points="{self._fmt(self._xy(pts))}" fill="none" '
                          f'stroke="{stroke}" stroke-width="{width}"{extra}/>')

    def polygon(self, pts, fill="cyan", opacity=1.0):
        self.items.append(f'<polygon points="{self._fmt(self._xy(pts))}" fill="{fill}" '
                          f'fill-opacity="{opacity}" stroke="none"/>')

    def segments(self, segs, stroke="gray", width=0.6):
        if len(segs) == 0:
            return
        a = self._xy(segs[:, 0])
        b = self._xy(segs[:, 1])
        d = " ".join(f"M{p[0]:.2f} {p[1]:.2f}L{q[0]:.2f} {q[1]:.2f}" for p, q in zip(a, b))
        self.items.append(f'<path d="{d}" stroke="{stroke}" stroke-width="{width}" fill="none"/>')

    def rect(self, center, half, fill="red", opacity=1.0):
        (x, y), = self._xy([center])
        h = half * self.scale
        self.items.append(f'<rect x="{x - h:.2f}" y="{y - h:.2f}" width="{2 * h:.2f}" height="{2 * h:.2f}" '
                          f'fill="{fill}" fill-opacity="{opacity}"/>')

    def circle(self, center, r_px=4.0, fill="magenta"):
        (x, y), = self._xy([center])
        self.items.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r_px}" fill="{fill}"/>')

    def text(self, pos, s, size=12):
        (x, y), = self._xy([pos])
        self.items.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}">{escape(s)}</text>')

    def frame(self):
        xmin, xmax, ymin, ymax = self.bounds
        self.polyline([(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)], closed=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}">\n')
            fh.write('<rect width="100%" height="100%" fill="white"/>\n')
            for item in self.items:
                fh.write(item + "\n")
            fh.write("</svg>\n")


def contour_segments(mesh: Mesh, values: np.ndarray, level: float) -> np.ndarray:
    """Line segments of the P1 iso-line ``values == level``, shape (k, 2, 2)."""
    v = np.asarray(values)[mesh.triangles] - level
    X = mesh.vertices[mesh.triangles]
    above = v > 0
    cut = above.any(1) & ~above.all(1)
    v, X, above = v[cut], X[cut], above[cut]
    # the odd vertex is the one whose side differs from the other two
    odd = np.where(above.sum(1) == 1, np.argmax(above, 1), np.argmin(above, 1))
    i0 = odd
    i1 = (odd + 1) % 3
    i2 = (odd + 2) % 3
    r = np.arange(len(v))

    def cross(a, b):
        va, vb = v[r, a], v[r, b]
        s = va / (va - vb)
        return X[r, a] + s[:, None] * (X[r, b] - X[r, a])
    return np.stack([cross(i0, i1), cross(i0, i2)], axis=1)
