/**
 * CPRV wire protocol: every message is magic "CPRV" | u8 type | u32 payload
 * length (LE) | payload. Types: 0x01 image frame, 0x02 result (JSON),
 * 0xFF error (JSON). Frame payload: u8 flags (bit 0 = sanitized) | u16 height
 * | u16 width | u16 channels | u8 dtype (0 = f32) | f32 LE pixels,
 * channel-first row-major.
 */
import { Tensor, toBuffer } from "./tensor.js";

export const MAGIC = Buffer.from("CPRV", "latin1");
export const TYPE_FRAME = 0x01;
export const TYPE_RESULT = 0x02;
export const TYPE_ERROR = 0xff;

export class ProtocolError extends Error {}

export interface Message {
  type: number;
  payload: Buffer;
}

export function packMessage(type: number, payload: Buffer): Buffer {
  const header = Buffer.alloc(9);
  MAGIC.copy(header, 0);
  header.writeUInt8(type, 4);
  header.writeUInt32LE(payload.length, 5);
  return Buffer.concat([header, payload]);
}

export function encodeFrame(image: Tensor, sanitized: boolean): Buffer {
  const header = Buffer.alloc(8);
  header.writeUInt8(sanitized ? 0x01 : 0x00, 0);
  header.writeUInt16LE(image.h, 1);
  header.writeUInt16LE(image.w, 3);
  header.writeUInt16LE(image.c, 5);
  header.writeUInt8(0, 7); // dtype f32
  return Buffer.concat([header, toBuffer(image)]);
}

/** Incremental CPRV message parser over a byte stream. */
export class MessageReader {
  private buf: Buffer = Buffer.alloc(0);

  constructor(private maxPayload = 1 << 22) {}

  feed(chunk: Buffer): void {
    this.buf = this.buf.length === 0 ? chunk : Buffer.concat([this.buf, chunk]);
  }

  /** Returns the next complete message, or null if more bytes are needed. */
  next(): Message | null {
    if (this.buf.length < 9) return null;
    if (!this.buf.subarray(0, 4).equals(MAGIC)) {
      throw new ProtocolError(`bad magic ${JSON.stringify(this.buf.toString("latin1", 0, 4))}`);
    }
    const type = this.buf.readUInt8(4);
    const length = this.buf.readUInt32LE(5);
    if (length > this.maxPayload) {
      throw new ProtocolError(`payload length ${length} exceeds maximum ${this.maxPayload}`);
    }
    if (this.buf.length < 9 + length) return null;
    const payload = this.buf.subarray(9, 9 + length);
    this.buf = this.buf.subarray(9 + length);
    return { type, payload };
  }
}
