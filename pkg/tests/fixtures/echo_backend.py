#!/usr/bin/env python3
"""Minimal test backend speaking the line-delimited JSON protocol.

Replies are deterministic: ``detect`` returns one fixed detection (or
the contents of ``<image>.det.json`` if present next to the image);
``segment`` fills each prompt box at the image's native size. The RLE
writer below is an independent pure-Python scan, deliberately not
importing the package under test.
"""

import json
import sys

from PIL import Image


def rle_counts(grid):
    """Row-major counts, background first, leading zero if (0,0) is set."""
    flat = [bool(v) for row in grid for v in row]
    counts = []
    current = False
    run = 0
    if flat and flat[0]:
        counts.append(0)
        current = True
    for value in flat:
        if value == current:
            run += 1
        else:
            counts.append(run)
            current = value
            run = 1
    counts.append(run)
    return counts


def box_fill_grid(width, height, box):
    import math

    x1, y1, x2, y2 = box
    c0 = max(0, math.ceil(x1 - 0.5))
    c1 = min(width - 1, math.floor(x2 - 0.5))
    r0 = max(0, math.ceil(y1 - 0.5))
    r1 = min(height - 1, math.floor(y2 - 0.5))
    grid = [[False] * width for _ in range(height)]
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            grid[r][c] = True
    return grid


def handle(request):
    op = request.get("op")
    if op == "detect":
        sidecar = request["image"] + ".det.json"
        try:
            with open(sidecar, encoding="utf-8") as fh:
                return json.load(fh)
        except OSError:
            pass
        return {
            "detections": [
                {"box": [2.0, 2.0, 10.0, 10.0], "score": 0.875, "label": request.get("prompt", "")}
            ]
        }
    if op == "segment":
        with Image.open(request["image"]) as img:
            width, height = img.width, img.height
        masks = []
        for box in request["boxes"]:
            grid = box_fill_grid(width, height, box)
            masks.append({"dims": [width, height], "rle": rle_counts(grid), "score": 0.99})
        return {"masks": masks}
    return {"error": f"unknown op {op!r}"}


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            reply = handle(request)
        except Exception as exc:  # malformed request: reply and continue
            reply = {"error": str(exc)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
