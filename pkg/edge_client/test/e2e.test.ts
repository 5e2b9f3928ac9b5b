import { spawn, ChildProcess } from "node:child_process";
import * as fs from "node:fs";
import * as net from "node:net";
import * as path from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { runEdge } from "../src/client.js";
import { TYPE_ERROR, TYPE_RESULT, MessageReader, packMessage } from "../src/cprv.js";
import { loadPsf1 } from "../src/psf1.js";

const TESTDATA = path.join(path.dirname(fileURLToPath(import.meta.url)), "..", "testdata");

function freePort(): Promise<number> {
  return new Promise((resolve) => {
    const srv = net.createServer();
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as net.AddressInfo).port;
      srv.close(() => resolve(port));
    });
  });
}

describe("end-to-end against the entity service", () => {
  let proc: ChildProcess;
  let port: number;

  beforeAll(async () => {
    port = await freePort();
    proc = spawn(
      "python3",
      ["-m", "privsan.cli", "serve", "--run", path.join(TESTDATA, "entity"),
       "--port", String(port), "--topk", "16"],
      { cwd: path.join(TESTDATA, ".."), stdio: ["ignore", "pipe", "inherit"] },
    );
    await new Promise<void>((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error("server did not start")), 60_000);
      proc.stdout!.on("data", (chunk: Buffer) => {
        if (chunk.toString().includes("listening")) {
          clearTimeout(timer);
          resolve();
        }
      });
      proc.on("exit", (code) => reject(new Error(`server exited early: ${code}`)));
    });
  }, 90_000);

  afterAll(() => {
    proc?.kill();
  });

  it("20-frame run returns ordered results matching offline posteriors within 1e-4", async () => {
    const expected = JSON.parse(fs.readFileSync(path.join(TESTDATA, "expected_posteriors.json"), "utf-8"));
    const model = loadPsf1(path.join(TESTDATA, "golden.psf1"));
    const lines: string[] = [];
    const transcript = await runEdge(
      model,
      { host: "127.0.0.1", port, bundlePath: "", inputDir: path.join(TESTDATA, "inputs"), limit: 20 },
      (line) => lines.push(line),
      () => {},
    );
    expect(transcript.sent).toBe(20);
    expect(transcript.serverErrors).toHaveLength(0);
    expect(lines).toHaveLength(20);

    let worstPrivacy = 0;
    let worstUtility = 0;
    for (let i = 0; i < 20; i++) {
      const res = JSON.parse(lines[i]);
      expect(res.sanitized).toBe(true);
      const privacy: number[] = res.privacy_probs;
      for (let k = 0; k < 2; k++) {
        worstPrivacy = Math.max(worstPrivacy, Math.abs(privacy[k] - expected.privacy_probs[i][k]));
      }
      const posterior = new Array(expected.num_subjects).fill(0);
      for (const [id, p] of res.utility_topk) posterior[id] = p;
      for (let k = 0; k < expected.num_subjects; k++) {
        worstUtility = Math.max(worstUtility, Math.abs(posterior[k] - expected.utility_posteriors[i][k]));
      }
    }
    expect(worstPrivacy).toBeLessThanOrEqual(1e-4);
    expect(worstUtility).toBeLessThanOrEqual(1e-4);
  }, 180_000);

  it("refuses a stochastic bundle before touching the network", () => {
    expect(() => loadPsf1(path.join(TESTDATA, "stochastic.psf1"))).toThrow(/stochastic/);
  });
});

describe("server error handling", () => {
  it("surfaces 0xFF responses and continues with the next frame", async () => {
    // tiny in-process CPRV server: first frame -> error, rest -> fixed result
    const result = JSON.stringify({ utility_topk: [[0, 1.0]], privacy_probs: [0.5, 0.5], sanitized: true });
    const srv = net.createServer((sock) => {
      const reader = new MessageReader();
      let count = 0;
      sock.on("data", (chunk) => {
        reader.feed(chunk);
        let msg;
        while ((msg = reader.next()) !== null) {
          count += 1;
          if (count === 1) {
            sock.write(packMessage(TYPE_ERROR, Buffer.from(JSON.stringify({ error: "synthetic failure" }))));
          } else {
            sock.write(packMessage(TYPE_RESULT, Buffer.from(result)));
          }
        }
      });
    });
    await new Promise<void>((r) => srv.listen(0, "127.0.0.1", () => r()));
    const port = (srv.address() as net.AddressInfo).port;

    const model = loadPsf1(path.join(TESTDATA, "golden.psf1"));
    const warnings: string[] = [];
    const transcript = await runEdge(
      model,
      { host: "127.0.0.1", port, bundlePath: "", inputDir: path.join(TESTDATA, "inputs"), limit: 5 },
      () => {},
      (line) => warnings.push(line),
    );
    srv.close();
    expect(transcript.sent).toBe(5);
    expect(transcript.serverErrors).toEqual([{ frame: 0, reason: "synthetic failure" }]);
    expect(transcript.results).toHaveLength(4);
    expect(warnings[0]).toContain("synthetic failure");
  }, 60_000);

  it("exits with a transport error after three connection attempts", async () => {
    const model = loadPsf1(path.join(TESTDATA, "golden.psf1"));
    const deadPort = await freePort(); // bound then released: refuses connections
    const t0 = Date.now();
    await expect(
      runEdge(model, {
        host: "127.0.0.1",
        port: deadPort,
        bundlePath: "",
        inputDir: path.join(TESTDATA, "inputs"),
        limit: 1,
        retries: 3,
        backoffMs: 20,
        timeoutMs: 1_000,
      }),
    ).rejects.toThrow(/after 3 attempts/);
    expect(Date.now() - t0).toBeGreaterThanOrEqual(20 + 40 + 80 - 10);
  }, 30_000);
});
