/**
 * Model registry: resolves a model id to a patch-feature extractor.
 *
 * Two kinds of ids are understood:
 *   - "toy-vit:p<patch>c<channels>[:seed]" - a built-in deterministic patch
 *     embedding (conv with kernel = stride = patch, weights derived from a
 *     splitmix64 stream). No downloads; used for tests and pipeline checks.
 *   - a path or file:// URL to a saved TFJS model (layers or graph format)
 *     whose output is the final-layer patch grid [1, hf, wf, C].
 *
 * Only the spatial patch grid is exported; class/register tokens are the
 * loaded model's business to drop. Features are written raw - the consumer
 * L2-normalizes at sampling time.
 */

import { promises as fs } from 'fs';
import path from 'path';

import * as tf from '@tensorflow/tfjs';

export interface LoadedModel {
  id: string;
  patch: number;
  channels: number;
  /** [S, S, 3] in [0,1] -> [hf, wf, C] final-layer patch features. */
  run(input: tf.Tensor3D): tf.Tensor3D;
  dispose(): void;
}

const GOLDEN = 0x9e3779b97f4a7c15n;
const MASK = (1n << 64n) - 1n;

function mix64(z: bigint): bigint {
  z &= MASK;
  z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK;
  z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK;
  return z ^ (z >> 31n);
}

/** Deterministic floats in [-1, 1), same stream contract as the toolkit RNG. */
function weightStream(seed: number, count: number): Float32Array {
  const base = mix64(BigInt(seed) ^ mix64(GOLDEN));
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    const u = mix64((base + BigInt(i + 1) * GOLDEN) & MASK);
    out[i] = Number(u >> 11n) * 2 ** -52 - 1.0;
  }
  return out;
}

function buildToyVit(patch: number, channels: number, seed: number): LoadedModel {
  const fanIn = patch * patch * 3;
  const kernel = tf.tensor4d(
    weightStream(seed, fanIn * channels).map((v) => v / Math.sqrt(fanIn)),
    [patch, patch, 3, channels],
  );
  const bias = tf.tensor1d(weightStream(seed + 1, channels).map((v) => v * 0.1));
  return {
    id: `toy-vit:p${patch}c${channels}`,
    patch,
    channels,
    run(input: tf.Tensor3D): tf.Tensor3D {
      return tf.tidy(() => {
        const x = input.expandDims(0) as tf.Tensor4D;
        const emb = tf.add(tf.conv2d(x, kernel as tf.Tensor4D, patch, 'same'), bias);
        return emb.squeeze([0]) as tf.Tensor3D;
      });
    },
    dispose() {
      kernel.dispose();
      bias.dispose();
    },
  };
}

/** Filesystem IOHandler: the browser-targeted tfjs build has no file://
 * router, so model.json + weight shards are read manually. */
async function fileLoadHandler(modelJsonPath: string): Promise<tf.io.IOHandler> {
  const dir = path.dirname(modelJsonPath);
  const json = JSON.parse(await fs.readFile(modelJsonPath, 'utf-8'));
  const weightSpecs: tf.io.WeightsManifestEntry[] = [];
  const shards: Buffer[] = [];
  for (const group of json.weightsManifest ?? []) {
    weightSpecs.push(...group.weights);
    for (const rel of group.paths) shards.push(await fs.readFile(path.join(dir, rel)));
  }
  const total = Buffer.concat(shards);
  const weightData = total.buffer.slice(total.byteOffset, total.byteOffset + total.byteLength);
  return {
    load: async () => ({
      modelTopology: json.modelTopology,
      format: json.format,
      generatedBy: json.generatedBy,
      convertedBy: json.convertedBy,
      weightSpecs,
      weightData,
    }),
  };
}

/** Write a LayersModel as model.json + weights.bin loadable by this package. */
export async function saveLayersModel(model: tf.LayersModel, dir: string): Promise<string> {
  await fs.mkdir(dir, { recursive: true });
  await model.save(
    tf.io.withSaveHandler(async (artifacts) => {
      const weightData = artifacts.weightData as ArrayBuffer;
      await fs.writeFile(path.join(dir, 'weights.bin'), Buffer.from(weightData));
      await fs.writeFile(
        path.join(dir, 'model.json'),
        JSON.stringify({
          modelTopology: artifacts.modelTopology,
          format: artifacts.format,
          generatedBy: artifacts.generatedBy,
          convertedBy: artifacts.convertedBy,
          weightsManifest: [{ paths: ['weights.bin'], weights: artifacts.weightSpecs }],
        }),
      );
      return {
        modelArtifactsInfo: {
          dateSaved: new Date(),
          modelTopologyType: 'JSON',
        },
      };
    }),
  );
  return path.join(dir, 'model.json');
}

async function loadTfjsModel(spec: string, resize: number, patchHint?: number): Promise<LoadedModel> {
  let model: tf.LayersModel | tf.GraphModel;
  if (spec.startsWith('http')) {
    try {
      model = await tf.loadLayersModel(spec);
    } catch {
      model = await tf.loadGraphModel(spec);
    }
  } else {
    const local = spec.replace(/^file:\/\//, '');
    const jsonPath = local.endsWith('.json') ? local : path.join(local, 'model.json');
    model = await tf.loadLayersModel(await fileLoadHandler(jsonPath));
  }
  const probe = tf.zeros([1, resize, resize, 3]);
  const out = (model.predict(probe) as tf.Tensor);
  if (out.shape.length !== 4 || out.shape[0] !== 1) {
    out.dispose();
    probe.dispose();
    throw new Error(`model output must be [1, hf, wf, C], got [${out.shape}]`);
  }
  const hf = out.shape[1] as number;
  const channels = out.shape[3] as number;
  out.dispose();
  probe.dispose();
  const patch = patchHint ?? Math.round(resize / hf);
  if (Math.ceil(resize / patch) !== hf) {
    throw new Error(`cannot infer patch size: resize ${resize}, grid ${hf}; pass --patch`);
  }
  return {
    id: spec,
    patch,
    channels,
    run(input: tf.Tensor3D): tf.Tensor3D {
      return tf.tidy(() => {
        const y = model.predict(input.expandDims(0)) as tf.Tensor;
        return y.squeeze([0]) as tf.Tensor3D;
      });
    },
    dispose() {
      model.dispose();
    },
  };
}

export async function loadModel(
  id: string,
  resize: number,
  patchHint?: number,
): Promise<LoadedModel> {
  const toy = /^toy-vit:p(\d+)c(\d+)(?::(\d+))?$/.exec(id);
  if (toy) {
    return buildToyVit(Number(toy[1]), Number(toy[2]), toy[3] ? Number(toy[3]) : 0);
  }
  return loadTfjsModel(id, resize, patchHint);
}
