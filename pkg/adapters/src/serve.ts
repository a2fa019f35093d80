import * as readline from "readline";

import {
  FatalModelError,
  WireReply,
  parseRequest,
  serializeReply,
} from "./protocol";
import { ModelRunner } from "./runner";

/**
 * Strict request/reply loop: one reply line per request line, in order.
 * Requests are handled sequentially; there is never more than one in
 * flight. Malformed requests produce an error reply and the loop
 * continues; a fatal model error produces an error reply and a non-zero
 * exit code.
 */
export async function serveLoop(
  runner: ModelRunner,
  input: NodeJS.ReadableStream,
  output: NodeJS.WritableStream
): Promise<number> {
  const lines = readline.createInterface({ input, crlfDelay: Infinity });
  for await (const line of lines) {
    if (line.trim() === "") {
      continue;
    }
    let reply: WireReply;
    let fatal = false;
    try {
      const request = parseRequest(line);
      reply = request.op === "detect" ? await runner.detect(request) : await runner.segment(request);
    } catch (err) {
      fatal = err instanceof FatalModelError;
      reply = { error: err instanceof Error ? err.message : String(err) };
    }
    output.write(serializeReply(reply) + "\n");
    if (fatal) {
      return 1;
    }
  }
  return 0;
}
