import * as http from "http";
import { AddressInfo } from "net";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { HttpRunner } from "../src/http";
import { FatalModelError, ProtocolError } from "../src/protocol";

let server: http.Server;
let endpoint: string;
let lastBody: any = null;
let failNext: number | null = null;

beforeAll(async () => {
  server = http.createServer((req, res) => {
    let data = "";
    req.on("data", (chunk) => (data += chunk));
    req.on("end", () => {
      lastBody = JSON.parse(data);
      if (failNext !== null) {
        res.writeHead(failNext).end("boom");
        failNext = null;
        return;
      }
      res.setHeader("content-type", "application/json");
      if (req.url === "/detect") {
        res.end(
          JSON.stringify({
            detections: [{ box: [1, 2, 3, 4], score: 0.7, label: "bird" }],
          })
        );
      } else if (req.url === "/segment") {
        const boxes = lastBody.boxes as number[][];
        res.end(
          JSON.stringify({
            masks: boxes.map(() => ({ dims: [4, 4], rle: [16], score: 0.5 })),
          })
        );
      } else {
        res.writeHead(404).end();
      }
    });
  });
  await new Promise<void>((resolve) => server.listen(0, resolve));
  endpoint = `http://127.0.0.1:${(server.address() as AddressInfo).port}`;
});

afterAll(() => {
  server.close();
});

const config = { checkpoint: "weights/model.pt", device: "cuda:0", protocolVersion: "1" };

describe("HttpRunner", () => {
  it("forwards detect requests with checkpoint and device", async () => {
    const runner = new HttpRunner(endpoint, config);
    const reply = await runner.detect({
      op: "detect",
      image: "img.png",
      prompt: "bird",
      box_threshold: 0.3,
      text_threshold: 0.25,
    });
    expect(reply.detections).toEqual([{ box: [1, 2, 3, 4], score: 0.7, label: "bird" }]);
    expect(lastBody.checkpoint).toBe("weights/model.pt");
    expect(lastBody.device).toBe("cuda:0");
    expect(lastBody.prompt).toBe("bird");
  });

  it("returns one mask per box and validates the count", async () => {
    const runner = new HttpRunner(endpoint, config);
    const reply = await runner.segment({
      op: "segment",
      image: "img.png",
      boxes: [
        [0, 0, 2, 2],
        [1, 1, 3, 3],
      ],
    });
    expect(reply.masks).toHaveLength(2);
  });

  it("treats HTTP error statuses as per-request protocol errors", async () => {
    failNext = 500;
    const runner = new HttpRunner(endpoint, config);
    await expect(
      runner.detect({
        op: "detect",
        image: "img.png",
        prompt: "bird",
        box_threshold: 0.3,
        text_threshold: 0.25,
      })
    ).rejects.toBeInstanceOf(ProtocolError);
  });

  it("treats an unreachable service as fatal", async () => {
    const runner = new HttpRunner("http://127.0.0.1:9", config, 2000);
    await expect(
      runner.detect({
        op: "detect",
        image: "img.png",
        prompt: "bird",
        box_threshold: 0.3,
        text_threshold: 0.25,
      })
    ).rejects.toBeInstanceOf(FatalModelError);
  });
});
