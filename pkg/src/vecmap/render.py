"""SVG rendering of local maps.

Color convention: road boundaries green, lane dividers red, pedestrian
crossings blue. The ego vehicle sits at the canvas center as a triangle
pointing forward (+x up); the perception range rectangle is outlined in gray.
"""
from __future__ import annotations

from .map_model import LocalMap, PerceptionRange, Polyline

CLASS_COLORS = {
    "boundary": "green",
    "divider": "red",
    "ped_crossing": "blue",
}


def _to_px(x: float, y: float, r: PerceptionRange, scale: float) -> tuple[float, float]:
    """Ego metric -> SVG pixel: +x (forward) up, +y (left) to the left."""
    return (r.y_half - y) * scale, (r.x_half - x) * scale


def _path_d(polyline: Polyline, r: PerceptionRange, scale: float) -> str:
    cmds = []
    for i, (x, y) in enumerate(polyline.points):
        px, py = _to_px(x, y, r, scale)
        cmds.append(f"{'M' if i == 0 else 'L'} {px:.4f} {py:.4f}")
    if polyline.is_closed:
        cmds.append("Z")
    return " ".join(cmds)


def render_svg(local_map: LocalMap, scale: float = 8.0) -> str:
    """Render one frame to an SVG document string."""
    r = local_map.range
    width = 2.0 * r.y_half * scale
    height = 2.0 * r.x_half * scale
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.4f} {height:.4f}">',
        f'  <!-- frame {local_map.frame_id} -->',
        f'  <rect x="0" y="0" width="{width:.4f}" height="{height:.4f}" '
        f'fill="white" stroke="gray" stroke-width="1"/>',
    ]
    # Ego marker: triangle pointing forward.
    tip = _to_px(1.2, 0.0, r, scale)
    left = _to_px(-0.6, 0.6, r, scale)
    right = _to_px(-0.6, -0.6, r, scale)
    pts = " ".join(f"{px:.4f},{py:.4f}" for px, py in (tip, left, right))
    lines.append(f'  <polygon points="{pts}" fill="black"/>')
    for inst in local_map.instances:
        color = CLASS_COLORS[inst.class_id]
        d = _path_d(inst.polyline, r, scale)
        lines.append(
            f'  <path d="{d}" fill="none" stroke="{color}" stroke-width="1.5" '
            f'data-class="{inst.class_id}" data-confidence="{inst.confidence:.4f}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def px_to_metric(px: float, py: float, r: PerceptionRange, scale: float = 8.0) -> tuple[float, float]:
    """Inverse of the render mapping, for round-trip checks."""
    return r.x_half - py / scale, r.y_half - px / scale
