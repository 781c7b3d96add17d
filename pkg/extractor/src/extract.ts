#!/usr/bin/env node
/**
 * Extract final-layer patch features from manifest images into FTB1 files.
 *
 *   ftb-extract --manifest m.json --model toy-vit:p14c16 --out dir/
 *                [--resize 518] [--patch N]
 *
 * One FTB1 per image plus extraction_log.json with per-file status; any
 * failure leaves a nonzero exit code. Features are raw (unnormalized); the
 * header records the actual processing resolution.
 */

import { promises as fs } from 'fs';
import path from 'path';
import process from 'process';

import { loadPng, resizeTo } from './image.js';
import { writeFtb1 } from './ftb1.js';
import { listImages } from './manifest.js';
import { loadModel } from './models.js';

interface Args {
  manifest: string;
  model: string;
  out: string;
  resize: number;
  patch?: number;
}

function parseArgs(argv: string[]): Args {
  const args: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith('--') || argv[i + 1] === undefined) {
      throw new Error(`bad argument ${key}`);
    }
    args[key.slice(2)] = argv[i + 1];
  }
  for (const req of ['manifest', 'model', 'out']) {
    if (!(req in args)) throw new Error(`--${req} is required`);
  }
  return {
    manifest: args.manifest,
    model: args.model,
    out: args.out,
    resize: args.resize ? Number(args.resize) : 518,
    patch: args.patch ? Number(args.patch) : undefined,
  };
}

interface LogEntry {
  image: string;
  output?: string;
  status: 'ok' | 'error';
  error?: string;
}

export async function runExtraction(args: Args): Promise<{ ok: number; failed: number }> {
  await fs.mkdir(args.out, { recursive: true });
  const log: LogEntry[] = [];
  let model;
  try {
    model = await loadModel(args.model, args.resize, args.patch);
  } catch (err) {
    log.push({ image: '*', status: 'error', error: `model load failed: ${err}` });
    await fs.writeFile(
      path.join(args.out, 'extraction_log.json'),
      JSON.stringify({ model: args.model, resize: args.resize, entries: log }, null, 2),
    );
    return { ok: 0, failed: 1 };
  }

  const images = await listImages(args.manifest);
  for (const entry of images) {
    try {
      const img = await loadPng(entry.path);
      const resized = resizeTo(img, args.resize);
      const feats = model.run(resized);
      const [hf, wf, channels] = feats.shape;
      const data = new Float32Array(await feats.data());
      feats.dispose();
      if (resized !== img.tensor) resized.dispose();
      img.tensor.dispose();
      const outName = `${entry.stem}.ftb`;
      await writeFtb1(path.join(args.out, outName), {
        hf,
        wf,
        channels,
        patch: model.patch,
        imgW: args.resize,
        imgH: args.resize,
        data,
      });
      log.push({ image: entry.path, output: outName, status: 'ok' });
    } catch (err) {
      log.push({ image: entry.path, status: 'error', error: String(err) });
    }
  }
  model.dispose();
  await fs.writeFile(
    path.join(args.out, 'extraction_log.json'),
    JSON.stringify(
      {
        model: args.model,
        patch: model.patch,
        resize: args.resize,
        entries: log,
      },
      null,
      2,
    ),
  );
  const failed = log.filter((e) => e.status === 'error').length;
  return { ok: log.length - failed, failed };
}

async function main(): Promise<number> {
  let args: Args;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (err) {
    console.error(`usage error: ${err}`);
    return 1;
  }
  try {
    const { ok, failed } = await runExtraction(args);
    console.log(`extracted ${ok} image(s), ${failed} failure(s)`);
    return failed === 0 ? 0 : 2;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

const entry = process.argv[1] ?? '';
if (entry.endsWith('extract.js') || entry.endsWith('ftb-extract')) {
  main().then((code) => process.exit(code));
}
