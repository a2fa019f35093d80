import {
  DetectReply,
  DetectRequest,
  FatalModelError,
  ProtocolError,
  SegmentReply,
  SegmentRequest,
  makeDetection,
  makeMask,
} from "./protocol";
import { AdapterConfig, ModelRunner } from "./runner";

/**
 * Runner that forwards requests to a model inference service over HTTP.
 *
 * Checkpoint loading, device placement, and the heavy inference all
 * live behind the endpoint; this adapter only converts between the
 * stream protocol and the service API, never post-processing outputs.
 * Network-level failures are fatal (the model is gone); HTTP error
 * statuses are per-request errors and the serve loop continues.
 */
export class HttpRunner implements ModelRunner {
  readonly name: string;
  private readonly endpoint: string;
  private readonly config: AdapterConfig;
  private readonly timeoutMs: number;

  constructor(endpoint: string, config: AdapterConfig, timeoutMs = 60_000) {
    this.endpoint = endpoint.replace(/\/$/, "");
    this.config = config;
    this.timeoutMs = timeoutMs;
    this.name = `http(${this.endpoint})`;
  }

  private async post(route: string, body: Record<string, unknown>): Promise<unknown> {
    const controller = new AbortController();
    const timer = setTimeout(() => controller.abort(), this.timeoutMs);
    let response: Response;
    try {
      response = await fetch(`${this.endpoint}${route}`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({
          ...body,
          checkpoint: this.config.checkpoint,
          device: this.config.device,
        }),
        signal: controller.signal,
      });
    } catch (err) {
      throw new FatalModelError(`model service unreachable at ${this.endpoint}${route}: ${err}`);
    } finally {
      clearTimeout(timer);
    }
    if (!response.ok) {
      throw new ProtocolError(`model service replied ${response.status} for ${route}`);
    }
    return response.json();
  }

  async detect(request: DetectRequest): Promise<DetectReply> {
    const raw = (await this.post("/detect", {
      image: request.image,
      prompt: request.prompt,
      box_threshold: request.box_threshold,
      text_threshold: request.text_threshold,
    })) as { detections?: unknown };
    if (!Array.isArray(raw.detections)) {
      throw new ProtocolError("model service reply lacks a detections array");
    }
    const detections = raw.detections.map((d: any, i: number) => {
      if (!Array.isArray(d?.box) || d.box.length !== 4 || typeof d?.score !== "number") {
        throw new ProtocolError(`malformed detection ${i} from model service`);
      }
      return makeDetection(
        d.box as [number, number, number, number],
        d.score,
        typeof d.label === "string" ? d.label : request.prompt
      );
    });
    return { detections };
  }

  async segment(request: SegmentRequest): Promise<SegmentReply> {
    if (request.boxes.length === 0) {
      return { masks: [] };
    }
    const raw = (await this.post("/segment", {
      image: request.image,
      boxes: request.boxes,
    })) as { masks?: unknown };
    if (!Array.isArray(raw.masks)) {
      throw new ProtocolError("model service reply lacks a masks array");
    }
    if (raw.masks.length !== request.boxes.length) {
      throw new ProtocolError(
        `model service returned ${raw.masks.length} masks for ${request.boxes.length} boxes`
      );
    }
    const masks = raw.masks.map((m: any, i: number) => {
      if (
        !Array.isArray(m?.dims) ||
        m.dims.length !== 2 ||
        !Array.isArray(m?.rle) ||
        typeof m?.score !== "number"
      ) {
        throw new ProtocolError(`malformed mask ${i} from model service`);
      }
      return makeMask(m.dims as [number, number], m.rle as number[], m.score);
    });
    return { masks };
  }
}
