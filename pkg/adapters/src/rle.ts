/**
 * Canonical run-length encoding helpers.
 *
 * The harness codec is row-major with counts alternating background /
 * foreground, starting with a background run; a leading 0 marks a mask
 * whose first pixel is foreground, and no other zero count may appear.
 */

/** Generic encoder over a row-major bit buffer. */
export function encodeCounts(bits: Uint8Array): number[] {
  if (bits.length === 0) {
    throw new Error("cannot encode an empty grid");
  }
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  if (bits[0]) {
    counts.push(0);
    current = 1;
  }
  for (const bit of bits) {
    const value = bit ? 1 : 0;
    if (value === current) {
      run += 1;
    } else {
      counts.push(run);
      current = value;
      run = 1;
    }
  }
  counts.push(run);
  return counts;
}

/**
 * Counts for a filled axis-aligned box rasterized over pixel centers:
 * pixel (row, col) is inside when x1 <= col + 0.5 <= x2 and
 * y1 <= row + 0.5 <= y2. Computed run-by-run without materializing the
 * grid, so megapixel images stay cheap.
 */
export function boxFillCounts(width: number, height: number, box: number[]): number[] {
  const [x1, y1, x2, y2] = box;
  const c0 = Math.max(0, Math.ceil(x1 - 0.5));
  const c1 = Math.min(width - 1, Math.floor(x2 - 0.5));
  const r0 = Math.max(0, Math.ceil(y1 - 0.5));
  const r1 = Math.min(height - 1, Math.floor(y2 - 0.5));
  const total = width * height;
  if (c0 > c1 || r0 > r1) {
    return [total];
  }
  const rowLen = c1 - c0 + 1;
  const lead = r0 * width + c0;
  const gap = width - rowLen;
  const trail = (height - 1 - r1) * width + (width - 1 - c1);

  const counts: number[] = [];
  counts.push(lead); // may be 0: canonical leading-zero form
  if (gap === 0) {
    // full-width rows merge into a single foreground run
    counts.push(rowLen * (r1 - r0 + 1));
  } else {
    counts.push(rowLen);
    for (let r = r0 + 1; r <= r1; r++) {
      counts.push(gap, rowLen);
    }
  }
  if (trail > 0) {
    counts.push(trail);
  }
  return counts;
}
