#!/usr/bin/env node
/**
 * Adapter entry point.
 *
 *   serve --stub [--fixtures file.json]
 *   serve --endpoint http://host:port [--checkpoint p] [--device d]
 *   export-precomputed --list images.txt --out dir (--stub ... | --endpoint ...)
 *       [--prompt bird] [--box-threshold 0.3] [--text-threshold 0.25]
 *
 * Exit codes: 0 ok, 1 fatal model error, 2 usage error.
 */

import { PROTOCOL_VERSION, FatalModelError } from "./protocol";
import { AdapterConfig, ModelRunner, assertProtocolCompatible } from "./runner";
import { HttpRunner } from "./http";
import { StubRunner, loadStubFixtures } from "./stub";
import { serveLoop } from "./serve";
import {
  DEFAULT_EXPORT_OPTIONS,
  exportPrecomputed,
  readImageList,
} from "./exportPrecomputed";

interface ParsedArgs {
  command: string;
  flags: Map<string, string | true>;
}

function parseArgs(argv: string[]): ParsedArgs {
  if (argv.length === 0) {
    throw new UsageError("missing command (serve | export-precomputed)");
  }
  const [command, ...rest] = argv;
  const flags = new Map<string, string | true>();
  for (let i = 0; i < rest.length; i++) {
    const arg = rest[i];
    if (!arg.startsWith("--")) {
      throw new UsageError(`unexpected argument ${arg}`);
    }
    const name = arg.slice(2);
    const next = rest[i + 1];
    if (next !== undefined && !next.startsWith("--")) {
      flags.set(name, next);
      i += 1;
    } else {
      flags.set(name, true);
    }
  }
  return { command, flags };
}

class UsageError extends Error {}

function stringFlag(flags: Map<string, string | true>, name: string): string | undefined {
  const value = flags.get(name);
  if (value === undefined) {
    return undefined;
  }
  if (value === true) {
    throw new UsageError(`--${name} needs a value`);
  }
  return value;
}

function buildRunner(flags: Map<string, string | true>): ModelRunner {
  const config: AdapterConfig = {
    checkpoint: stringFlag(flags, "checkpoint"),
    device: stringFlag(flags, "device"),
    protocolVersion: stringFlag(flags, "protocol-version") ?? PROTOCOL_VERSION,
  };
  assertProtocolCompatible(config);
  if (flags.has("stub")) {
    const fixturesFile = stringFlag(flags, "fixtures");
    return new StubRunner(fixturesFile ? loadStubFixtures(fixturesFile) : {});
  }
  const endpoint = stringFlag(flags, "endpoint");
  if (endpoint) {
    return new HttpRunner(endpoint, config);
  }
  throw new UsageError("pick a backend: --stub or --endpoint <url>");
}

async function main(argv: string[]): Promise<number> {
  const { command, flags } = parseArgs(argv);
  if (command === "serve") {
    const runner = buildRunner(flags);
    return serveLoop(runner, process.stdin, process.stdout);
  }
  if (command === "export-precomputed") {
    const runner = buildRunner(flags);
    const list = stringFlag(flags, "list");
    const out = stringFlag(flags, "out");
    if (!list || !out) {
      throw new UsageError("export-precomputed needs --list and --out");
    }
    const options = {
      prompt: stringFlag(flags, "prompt") ?? DEFAULT_EXPORT_OPTIONS.prompt,
      boxThreshold: Number(stringFlag(flags, "box-threshold") ?? DEFAULT_EXPORT_OPTIONS.boxThreshold),
      textThreshold: Number(stringFlag(flags, "text-threshold") ?? DEFAULT_EXPORT_OPTIONS.textThreshold),
    };
    const written = await exportPrecomputed(runner, readImageList(list), out, options);
    process.stderr.write(`exported ${written} reply pairs to ${out}\n`);
    return 0;
  }
  throw new UsageError(`unknown command ${command}`);
}

main(process.argv.slice(2))
  .then((code) => {
    process.exitCode = code;
  })
  .catch((err) => {
    if (err instanceof UsageError) {
      process.stderr.write(`usage error: ${err.message}\n`);
      process.exitCode = 2;
    } else if (err instanceof FatalModelError) {
      process.stderr.write(`fatal: ${err.message}\n`);
      process.exitCode = 1;
    } else {
      process.stderr.write(`error: ${err?.stack ?? err}\n`);
      process.exitCode = 1;
    }
  });
