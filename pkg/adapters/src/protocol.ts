/**
 * Line-delimited JSON protocol spoken over standard streams.
 *
 * One request line yields exactly one reply line. Reply objects are
 * serialized with a fixed key order so transcripts are byte-stable:
 *   detect reply:  {"detections":[{"box":[...],"score":...,"label":"..."}]}
 *   segment reply: {"masks":[{"dims":[w,h],"rle":[...],"score":...}]}
 *   error reply:   {"error":"<message>"}
 */

export const PROTOCOL_VERSION = "1";

export interface DetectRequest {
  op: "detect";
  image: string;
  prompt: string;
  box_threshold: number;
  text_threshold: number;
}

export interface SegmentRequest {
  op: "segment";
  image: string;
  /** Prompt boxes as [x1, y1, x2, y2] in absolute pixels. */
  boxes: number[][];
}

export type WireRequest = DetectRequest | SegmentRequest;

export interface Detection {
  box: [number, number, number, number];
  score: number;
  label: string;
}

export interface MaskPayload {
  /** [width, height] of the mask, which must be the image's native size. */
  dims: [number, number];
  /** Canonical run-length counts: row-major, background first,
   *  leading zero when pixel (0,0) is foreground. */
  rle: number[];
  score: number;
}

export interface DetectReply {
  detections: Detection[];
}

export interface SegmentReply {
  masks: MaskPayload[];
}

export interface ErrorReply {
  error: string;
}

export type WireReply = DetectReply | SegmentReply | ErrorReply;

/** Request-level failure: reply with an error line and keep serving. */
export class ProtocolError extends Error {}

/** Unrecoverable failure: reply with an error line, then exit non-zero. */
export class FatalModelError extends Error {}

/** Build a detection with the canonical key order. */
export function makeDetection(
  box: [number, number, number, number],
  score: number,
  label: string
): Detection {
  return { box, score, label };
}

/** Build a mask payload with the canonical key order. */
export function makeMask(dims: [number, number], rle: number[], score: number): MaskPayload {
  return { dims, rle, score };
}

export function parseRequest(line: string): WireRequest {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    throw new ProtocolError("request is not valid JSON");
  }
  if (typeof raw !== "object" || raw === null) {
    throw new ProtocolError("request must be a JSON object");
  }
  const req = raw as Record<string, unknown>;
  if (req.op === "detect") {
    if (typeof req.image !== "string") {
      throw new ProtocolError("detect request needs an image path");
    }
    return {
      op: "detect",
      image: req.image,
      prompt: typeof req.prompt === "string" ? req.prompt : "",
      box_threshold: typeof req.box_threshold === "number" ? req.box_threshold : 0.3,
      text_threshold: typeof req.text_threshold === "number" ? req.text_threshold : 0.25,
    };
  }
  if (req.op === "segment") {
    if (typeof req.image !== "string") {
      throw new ProtocolError("segment request needs an image path");
    }
    if (!Array.isArray(req.boxes) || !req.boxes.every(isBox)) {
      throw new ProtocolError("segment request needs boxes as arrays of four numbers");
    }
    return { op: "segment", image: req.image, boxes: req.boxes as number[][] };
  }
  throw new ProtocolError(`unsupported op: ${String(req.op)}`);
}

function isBox(value: unknown): boolean {
  return Array.isArray(value) && value.length === 4 && value.every((v) => typeof v === "number");
}

export function serializeReply(reply: WireReply): string {
  return JSON.stringify(reply);
}
