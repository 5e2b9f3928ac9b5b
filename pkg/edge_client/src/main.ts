#!/usr/bin/env node
import { parseArgs } from "node:util";

import { TransportError, runEdge } from "./client.js";
import { ProtocolError } from "./cprv.js";
import { LoadError, loadPsf1 } from "./psf1.js";

const USAGE = `usage: edge-client --bundle <file.psf1> --input-dir <tds1 dir> [--host H] [--port P] [--limit N]

Loads a PSF1 sanitizer bundle, sanitizes every frame of a TDS1 dataset
locally, and streams the sanitized frames to the entity inference service.
Prints one JSON result line per frame.`;

async function main(): Promise<number> {
  let args;
  try {
    args = parseArgs({
      options: {
        bundle: { type: "string" },
        host: { type: "string", default: "127.0.0.1" },
        port: { type: "string", default: "7787" },
        "input-dir": { type: "string" },
        limit: { type: "string" },
        help: { type: "boolean", default: false },
      },
    });
  } catch (e) {
    console.error((e as Error).message);
    console.error(USAGE);
    return 1;
  }
  if (args.values.help) {
    console.log(USAGE);
    return 0;
  }
  const bundle = args.values.bundle;
  const inputDir = args.values["input-dir"];
  if (!bundle || !inputDir) {
    console.error("error: --bundle and --input-dir are required");
    console.error(USAGE);
    return 1;
  }
  const port = Number(args.values.port);
  if (!Number.isInteger(port) || port < 1 || port > 65535) {
    console.error(`error: invalid port ${args.values.port}`);
    return 1;
  }
  const limit = args.values.limit ? Number(args.values.limit) : undefined;

  try {
    const model = loadPsf1(bundle);
    const transcript = await runEdge(model, { host: args.values.host!, port, bundlePath: bundle, inputDir, limit });
    console.error(`done: ${transcript.results.length}/${transcript.sent} frames answered, ${transcript.serverErrors.length} server errors`);
    return 0;
  } catch (e) {
    if (e instanceof TransportError) {
      console.error(`transport error: ${e.message}`);
      return 2;
    }
    if (e instanceof ProtocolError) {
      console.error(`protocol error: ${e.message}`);
      return 3;
    }
    if (e instanceof LoadError) {
      console.error(`load error: ${e.message}`);
      return 1;
    }
    console.error(`error: ${(e as Error).message}`);
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
