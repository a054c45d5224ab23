import math

from schemas.scene_model import BoundingBox

# Smallest decoded box extent in pixels.
MIN_BOX_EXTENT = 1e-3


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Intersection over union of two boxes in continuous pixel coordinates.
    Args:
        a (BoundingBox): First box.
        b (BoundingBox): Second box.
    Returns:
        float: Intersection area divided by union area, 0 when disjoint.
    """
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    intersection = inter_w * inter_h
    union = a.area + b.area - intersection
    return intersection / union


def cell_center(row: int, col: int, stride: int) -> tuple[float, float]:
    return ((col + 0.5) * stride, (row + 0.5) * stride)


def cell_of(box: BoundingBox, stride: int,
            grid_h: int, grid_w: int) -> tuple[int, int]:
    """Grid cell (row, col) containing the box center."""
    cx, cy = box.center
    col = min(max(int(math.floor(cx / stride)), 0), grid_w - 1)
    row = min(max(int(math.floor(cy / stride)), 0), grid_h - 1)
    return row, col


def encode_box(box: BoundingBox, row: int, col: int,
               stride: int) -> tuple[float, float, float, float]:
    """
    Distances (left, top, right, bottom) from the cell center to the box
    edges, in stride units.
    """
    cx, cy = cell_center(row, col, stride)
    return ((cx - box.x_min) / stride,
            (cy - box.y_min) / stride,
            (box.x_max - cx) / stride,
            (box.y_max - cy) / stride)


def decode_box(deltas: tuple[float, float, float, float], row: int, col: int,
               stride: int, width: float, height: float) -> BoundingBox:
    """
    Inverse of ``encode_box``, clipped to the image. Inverted or collapsed
    edges are reordered and widened to ``MIN_BOX_EXTENT``.
    """
    left, top, right, bottom = deltas
    cx, cy = cell_center(row, col, stride)
    x_lo, x_hi = sorted((cx - left * stride, cx + right * stride))
    y_lo, y_hi = sorted((cy - top * stride, cy + bottom * stride))
    x_lo, x_hi = _clip_span(x_lo, x_hi, width)
    y_lo, y_hi = _clip_span(y_lo, y_hi, height)
    return BoundingBox(x_min=x_lo, y_min=y_lo, x_max=x_hi, y_max=y_hi)


def _clip_span(lo: float, hi: float, limit: float) -> tuple[float, float]:
    lo = min(max(lo, 0.0), limit - MIN_BOX_EXTENT)
    hi = min(max(hi, lo + MIN_BOX_EXTENT), limit)
    return lo, hi
