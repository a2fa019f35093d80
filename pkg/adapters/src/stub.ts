import * as fs from "fs";
import * as path from "path";

import { readPngDims } from "./png";
import {
  DetectReply,
  DetectRequest,
  ProtocolError,
  SegmentReply,
  SegmentRequest,
  makeDetection,
  makeMask,
} from "./protocol";
import { boxFillCounts } from "./rle";
import { ModelRunner } from "./runner";

/** Per-image canned entry: detections to echo, and optionally the image
 *  size so the stub never has to open the file. */
export interface StubFixtureEntry {
  dims?: [number, number];
  detections?: Array<{ box: [number, number, number, number]; score: number; label?: string }>;
}

export type StubFixtures = Record<string, StubFixtureEntry>;

export function loadStubFixtures(file: string): StubFixtures {
  const parsed = JSON.parse(fs.readFileSync(file, "utf-8"));
  if (typeof parsed !== "object" || parsed === null || Array.isArray(parsed)) {
    throw new Error(`${file}: stub fixtures must be an object keyed by image basename`);
  }
  return parsed as StubFixtures;
}

/**
 * Protocol-conformance runner that needs no model: detections come from
 * the canned fixtures (keyed by image basename; unknown images detect
 * nothing), and each prompt box is segmented as a filled box at the
 * image's native size. Fully deterministic, so transcripts can be
 * validated byte-for-byte.
 */
export class StubRunner implements ModelRunner {
  readonly name = "stub";
  private readonly fixtures: StubFixtures;
  private readonly maskScore = 0.99;

  constructor(fixtures: StubFixtures = {}) {
    this.fixtures = fixtures;
  }

  private entryFor(imagePath: string): StubFixtureEntry | undefined {
    return this.fixtures[path.basename(imagePath)];
  }

  private dimsFor(imagePath: string): { width: number; height: number } {
    const entry = this.entryFor(imagePath);
    if (entry?.dims) {
      return { width: entry.dims[0], height: entry.dims[1] };
    }
    let buffer: Buffer;
    try {
      buffer = fs.readFileSync(imagePath);
    } catch {
      throw new ProtocolError(`cannot read image ${imagePath} and no fixture dims given`);
    }
    return readPngDims(buffer);
  }

  async detect(request: DetectRequest): Promise<DetectReply> {
    const entry = this.entryFor(request.image);
    const detections = (entry?.detections ?? []).map((d) =>
      makeDetection(d.box, d.score, d.label ?? request.prompt)
    );
    return { detections };
  }

  async segment(request: SegmentRequest): Promise<SegmentReply> {
    if (request.boxes.length === 0) {
      return { masks: [] };
    }
    const { width, height } = this.dimsFor(request.image);
    const masks = request.boxes.map((box) =>
      makeMask([width, height], boxFillCounts(width, height, box), this.maskScore)
    );
    return { masks };
  }
}
