"""Tiny SVG writer: polylines, filled paths and text, nothing else."""

from __future__ import annotations

from xml.sax.saxutils import escape


class SvgCanvas:
    def __init__(self, width: int = 640, height: int = 400, margin: int = 50):
        self.width, self.height, self.margin = width, height, margin
        self.items: list[str] = []
        self.xlim = (0.0, 1.0)
        self.ylim = (0.0, 1.0)

    def set_limits(self, xlim, ylim):
        self.xlim = (float(xlim[0]), float(xlim[1]))
        self.ylim = (float(ylim[0]), float(ylim[1]))

    def _px(self, x, y):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        w = self.width - 2 * self.margin
        h = self.height - 2 * self.margin
        px = self.margin + (x - x0) / (x1 - x0) * w
        py = self.height - self.margin - (y - y0) / (y1 - y0) * h
        return f"{px:.2f},{py:.2f}"

    def polyline(self, xs, ys, stroke="blue", width=2.0):
        pts = " ".join(self._px(x, y) for x, y in zip(xs, ys))
        self.items.append(f'<polyline fill="none" stroke="{stroke}" stroke-width="{width}" points="{pts}"/>')

    def filled(self, xs, ys, fill="red", opacity=0.3):
        pts = " ".join(self._px(x, y) for x, y in zip(xs, ys))
        self.items.append(f'<polygon fill="{fill}" fill-opacity="{opacity}" stroke="none" points="{pts}"/>')

    def text(self, x, y, label, size=12, anchor="middle"):
        px, py = self._px(x, y).split(",")
        self.items.append(
            f'<text x="{px}" y="{py}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{escape(label)}</text>'
        )

    def axes(self):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        self.polyline([x0, x1], [y0, y0], stroke="black", width=1)
        self.polyline([x0, x0], [y0, y1], stroke="black", width=1)

    def render(self) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">'
        )
        return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *self.items, "</svg>"]) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())
