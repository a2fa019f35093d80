import * as fs from "fs";
import * as path from "path";

import { serializeReply } from "./protocol";
import { ModelRunner } from "./runner";

export interface ExportEntry {
  imageId: string;
  imagePath: string;
}

export interface ExportOptions {
  prompt: string;
  boxThreshold: number;
  textThreshold: number;
}

export const DEFAULT_EXPORT_OPTIONS: ExportOptions = {
  prompt: "bird",
  boxThreshold: 0.3,
  textThreshold: 0.25,
};

/** Parse an image list file with one ``<image_id> <path>`` per line. */
export function readImageList(file: string): ExportEntry[] {
  const entries: ExportEntry[] = [];
  const text = fs.readFileSync(file, "utf-8");
  text.split("\n").forEach((raw, i) => {
    const line = raw.trim();
    if (line === "") {
      return;
    }
    const space = line.indexOf(" ");
    if (space <= 0) {
      throw new Error(`${file}:${i + 1}: expected '<image_id> <path>'`);
    }
    entries.push({ imageId: line.slice(0, space), imagePath: line.slice(space + 1) });
  });
  return entries;
}

/**
 * Write per-image reply files for the harness's precomputed mode:
 * ``<image_id>.det`` and ``<image_id>.seg``, holding exactly the lines
 * the serve loop would reply. Segmentation is prompted with the boxes
 * the detect pass produced, which is what the pipeline will ask for.
 * Overwrites are deterministic.
 */
export async function exportPrecomputed(
  runner: ModelRunner,
  entries: ExportEntry[],
  outDir: string,
  options: ExportOptions = DEFAULT_EXPORT_OPTIONS
): Promise<number> {
  fs.mkdirSync(outDir, { recursive: true });
  let written = 0;
  for (const entry of entries) {
    const detectReply = await runner.detect({
      op: "detect",
      image: entry.imagePath,
      prompt: options.prompt,
      box_threshold: options.boxThreshold,
      text_threshold: options.textThreshold,
    });
    fs.writeFileSync(
      path.join(outDir, `${entry.imageId}.det`),
      serializeReply(detectReply) + "\n"
    );
    const segmentReply = await runner.segment({
      op: "segment",
      image: entry.imagePath,
      boxes: detectReply.detections.map((d) => d.box),
    });
    fs.writeFileSync(
      path.join(outDir, `${entry.imageId}.seg`),
      serializeReply(segmentReply) + "\n"
    );
    written += 1;
  }
  return written;
}
