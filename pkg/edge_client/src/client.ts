import * as net from "node:net";

import { MessageReader, Message, ProtocolError, TYPE_ERROR, TYPE_FRAME, TYPE_RESULT, encodeFrame, packMessage } from "./cprv.js";
import { forward } from "./forward.js";
import { LoadedSanitizer } from "./psf1.js";
import { loadTds1Dir } from "./tds1.js";

export class TransportError extends Error {}

export interface EdgeConfig {
  host: string;
  port: number;
  bundlePath: string;
  inputDir: string;
  limit?: number;
  retries?: number;
  backoffMs?: number;
  timeoutMs?: number;
}

interface Connection {
  socket: net.Socket;
  nextMessage(): Promise<Message>;
  close(): void;
}

function connectOnce(host: string, port: number, timeoutMs: number): Promise<Connection> {
  return new Promise((resolve, reject) => {
    const socket = net.createConnection({ host, port });
    socket.setNoDelay(true);
    socket.setTimeout(timeoutMs);
    const reader = new MessageReader();
    const waiters: Array<{ resolve: (m: Message) => void; reject: (e: Error) => void }> = [];
    let failure: Error | null = null;
    let connected = false;

    const flush = () => {
      try {
        let msg: Message | null;
        while (waiters.length > 0 && (msg = reader.next()) !== null) {
          waiters.shift()!.resolve(msg);
        }
      } catch (e) {
        fail(e as Error);
      }
    };
    const fail = (e: Error) => {
      failure = failure ?? e;
      // a failure before the connect event must reject the connect promise
      if (!connected) reject(failure);
      while (waiters.length > 0) waiters.shift()!.reject(failure);
      socket.destroy();
    };

    socket.on("connect", () => {
      connected = true;
      resolve({ socket, nextMessage, close: () => socket.destroy() });
    });
    socket.on("data", (chunk) => {
      reader.feed(Buffer.isBuffer(chunk) ? chunk : Buffer.from(chunk));
      flush();
    });
    socket.on("error", (e) => fail(new TransportError(`socket error: ${e.message}`)));
    socket.on("close", () => fail(new TransportError("connection closed by peer")));
    socket.on("timeout", () => fail(new TransportError(connected ? "socket timeout" : "connect timeout")));

    function nextMessage(): Promise<Message> {
      return new Promise((res, rej) => {
        if (failure) {
          rej(failure);
          return;
        }
        waiters.push({ resolve: res, reject: rej });
        flush();
      });
    }
  });
}

async function connectWithRetries(cfg: EdgeConfig): Promise<Connection> {
  const retries = cfg.retries ?? 3;
  const backoff = cfg.backoffMs ?? 300;
  let last: Error | null = null;
  for (let attempt = 0; attempt < retries; attempt++) {
    try {
      return await connectOnce(cfg.host, cfg.port, cfg.timeoutMs ?? 30_000);
    } catch (e) {
      last = e as Error;
      await new Promise((r) => setTimeout(r, backoff * 2 ** attempt));
    }
  }
  throw new TransportError(`could not connect to ${cfg.host}:${cfg.port} after ${retries} attempts: ${last?.message}`);
}

export interface EdgeTranscript {
  sent: number;
  results: string[]; // raw JSON result lines, order preserved
  serverErrors: Array<{ frame: number; reason: string }>;
}

/**
 * Sanitize every dataset frame locally with the loaded bundle and stream the
 * results to the entity server; prints one JSON line per inference result.
 */
export async function runEdge(model: LoadedSanitizer, cfg: EdgeConfig,
                              print: (line: string) => void = console.log,
                              warn: (line: string) => void = console.error): Promise<EdgeTranscript> {
  const dataset = loadTds1Dir(cfg.inputDir);
  const { c, h, w } = model.inputShape;
  if (dataset.imageShape.c !== c || dataset.imageShape.h !== h || dataset.imageShape.w !== w) {
    throw new Error(
      `dataset image shape (${dataset.imageShape.c}, ${dataset.imageShape.h}, ${dataset.imageShape.w}) does not match bundle (${c}, ${h}, ${w})`,
    );
  }
  const samples = cfg.limit ? dataset.samples.slice(0, cfg.limit) : dataset.samples;
  const conn = await connectWithRetries(cfg);
  const transcript: EdgeTranscript = { sent: 0, results: [], serverErrors: [] };
  try {
    for (let i = 0; i < samples.length; i++) {
      const sanitized = forward(model, samples[i].image);
      conn.socket.write(packMessage(TYPE_FRAME, encodeFrame(sanitized, true)));
      transcript.sent++;
      const msg = await conn.nextMessage();
      if (msg.type === TYPE_RESULT) {
        const line = msg.payload.toString("utf-8");
        transcript.results.push(line);
        print(line);
      } else if (msg.type === TYPE_ERROR) {
        const reason = JSON.parse(msg.payload.toString("utf-8")).error ?? "unknown";
        transcript.serverErrors.push({ frame: i, reason });
        warn(`frame ${i}: server error: ${reason}`);
      } else {
        throw new ProtocolError(`unexpected response type 0x${msg.type.toString(16)}`);
      }
    }
  } finally {
    conn.close();
  }
  return transcript;
}
