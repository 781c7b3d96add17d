/** PNG loading + bilinear resize to the model's input resolution. */

import { promises as fs } from 'fs';
import * as tf from '@tensorflow/tfjs';
import pngjs from 'pngjs';

const { PNG } = pngjs;

export interface ImageTensor {
  /** [H, W, 3] float32 in [0, 1]. */
  tensor: tf.Tensor3D;
  sourceW: number;
  sourceH: number;
}

export async function loadPng(path: string): Promise<ImageTensor> {
  const blob = await fs.readFile(path);
  const png = PNG.sync.read(blob);
  const { width, height, data } = png; // RGBA u8
  const rgb = new Float32Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    rgb[3 * i] = data[4 * i] / 255;
    rgb[3 * i + 1] = data[4 * i + 1] / 255;
    rgb[3 * i + 2] = data[4 * i + 2] / 255;
  }
  return {
    tensor: tf.tensor3d(rgb, [height, width, 3]),
    sourceW: width,
    sourceH: height,
  };
}

export function resizeTo(img: ImageTensor, size: number): tf.Tensor3D {
  if (img.sourceW === size && img.sourceH === size) return img.tensor;
  return tf.tidy(() => tf.image.resizeBilinear(img.tensor, [size, size]));
}

export function writePng(path: string, width: number, height: number, rgb: Uint8Array): Promise<void> {
  const png = new PNG({ width, height });
  for (let i = 0; i < width * height; i++) {
    png.data[4 * i] = rgb[3 * i];
    png.data[4 * i + 1] = rgb[3 * i + 1];
    png.data[4 * i + 2] = rgb[3 * i + 2];
    png.data[4 * i + 3] = 255;
  }
  return fs.writeFile(path, PNG.sync.write(png));
}
