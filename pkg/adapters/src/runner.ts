import {
  DetectReply,
  DetectRequest,
  FatalModelError,
  PROTOCOL_VERSION,
  SegmentReply,
  SegmentRequest,
} from "./protocol";

/**
 * Configuration shared by every adapter kind. Checkpoint and device are
 * forwarded to whatever actually hosts the model; the protocol version
 * must match the harness's, and is checked before serving.
 */
export interface AdapterConfig {
  checkpoint?: string;
  device?: string;
  protocolVersion: string;
}

/** One model behind the protocol: a detector, a segmenter, or both. */
export interface ModelRunner {
  readonly name: string;
  detect(request: DetectRequest): Promise<DetectReply>;
  segment(request: SegmentRequest): Promise<SegmentReply>;
}

export function assertProtocolCompatible(config: AdapterConfig): void {
  if (config.protocolVersion !== PROTOCOL_VERSION) {
    throw new FatalModelError(
      `protocol version ${config.protocolVersion} not supported (this adapter speaks ${PROTOCOL_VERSION})`
    );
  }
}
