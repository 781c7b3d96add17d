/**
 * FTB1 binary feature-map format.
 *
 * magic "FTB1", then six u32 little-endian fields (hf, wf, channels, patch,
 * imgW, imgH), then hf*wf*channels float32 little-endian values in
 * [row][col][channel] order. imgW/imgH record the resolution the features
 * describe (the extractor's actual resize).
 */

import { promises as fs } from 'fs';

export interface FeatureGrid {
  hf: number;
  wf: number;
  channels: number;
  patch: number;
  imgW: number;
  imgH: number;
  /** Row-major [row][col][channel], length hf*wf*channels. */
  data: Float32Array;
}

const MAGIC = Buffer.from('FTB1', 'ascii');
const HEADER_BYTES = 4 + 6 * 4;

export function encodeFtb1(grid: FeatureGrid): Buffer {
  const expected = grid.hf * grid.wf * grid.channels;
  if (grid.data.length !== expected) {
    throw new Error(`payload length ${grid.data.length} != hf*wf*C = ${expected}`);
  }
  for (const v of grid.data) {
    if (!Number.isFinite(v)) throw new Error('non-finite feature value');
  }
  const buf = Buffer.alloc(HEADER_BYTES + 4 * expected);
  MAGIC.copy(buf, 0);
  const fields = [grid.hf, grid.wf, grid.channels, grid.patch, grid.imgW, grid.imgH];
  fields.forEach((v, i) => buf.writeUInt32LE(v >>> 0, 4 + 4 * i));
  for (let i = 0; i < expected; i++) buf.writeFloatLE(grid.data[i], HEADER_BYTES + 4 * i);
  return buf;
}

export function decodeFtb1(buf: Buffer): FeatureGrid {
  if (buf.length < HEADER_BYTES || !buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error('bad FTB1 magic or truncated header');
  }
  const [hf, wf, channels, patch, imgW, imgH] = Array.from({ length: 6 }, (_, i) =>
    buf.readUInt32LE(4 + 4 * i),
  );
  const count = hf * wf * channels;
  if (buf.length < HEADER_BYTES + 4 * count) throw new Error('truncated FTB1 payload');
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) data[i] = buf.readFloatLE(HEADER_BYTES + 4 * i);
  return { hf, wf, channels, patch, imgW, imgH, data };
}

export async function writeFtb1(path: string, grid: FeatureGrid): Promise<void> {
  await fs.writeFile(path, encodeFtb1(grid));
}

export async function readFtb1(path: string): Promise<FeatureGrid> {
  return decodeFtb1(await fs.readFile(path));
}
