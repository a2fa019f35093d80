"""Boxes and masks: the two value types everything else builds on.

Walks through box format conversion, IoU, NMS, and the run-length mask
codec with printable, hand-checkable numbers.
"""

import numpy as np

from boxprompt import (
    BoxXYXY,
    Detection,
    ImageDims,
    box_iou,
    nms,
    rle_decode,
    rle_encode,
    to_absolute,
    to_normalized,
)

# A detector sees a bird at these pixel coordinates in a 500x375 photo.
dims = ImageDims(500, 375)
box = BoxXYXY(60, 27, 385, 331)
print("absolute box:", box)

# The label exporter wants normalized center/size form.
norm = to_normalized(box, dims)
print(f"normalized:   cx={norm.cx:.6f} cy={norm.cy:.6f} w={norm.w:.6f} h={norm.h:.6f}")

# Converting back is exact (well inside the 6-decimal label quantization).
back = to_absolute(norm, dims)
print("round trip:  ", back)

# IoU on continuous areas: the classic quarter-overlap pair.
a = BoxXYXY(0, 0, 2, 2)
b = BoxXYXY(1, 1, 3, 3)
print(f"\niou of unit-offset 2x2 boxes: {box_iou(a, b):.6f}  (= 1/7)")

# Greedy NMS: the weaker of two near-duplicates is suppressed.
dets = [
    Detection(BoxXYXY(0, 0, 10, 10), 0.9),
    Detection(BoxXYXY(1, 1, 10, 10), 0.8),
    Detection(BoxXYXY(40, 40, 50, 50), 0.7),
]
kept = nms(dets, iou_threshold=0.45)
print(f"nms kept {len(kept)} of {len(dets)} detections:")
for d in kept:
    print(f"  score={d.score}  box={d.box}")

# The mask codec: row-major counts, background first.
grid = np.zeros((4, 4), dtype=bool)
grid[0, :] = True
mask = rle_encode(grid)
print(f"\n4x4 mask with row 0 foreground -> counts {list(mask.counts)}")
assert np.array_equal(rle_decode(mask), grid)
print("decode(encode(m)) == m holds bit-exactly")
