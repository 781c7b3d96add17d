/** Manifest parsing: accepts the toolkit dataset manifest (views carrying an
 * "image" path) or a flat {"images": ["a.png", ...]} list. */

import { promises as fs } from 'fs';
import path from 'path';

export interface ImageEntry {
  /** Absolute path to the image file. */
  path: string;
  /** Output stem (manifest-relative, slashes flattened). */
  stem: string;
}

export async function listImages(manifestPath: string): Promise<ImageEntry[]> {
  const raw = JSON.parse(await fs.readFile(manifestPath, 'utf-8'));
  const base = path.dirname(path.resolve(manifestPath));
  const entries: ImageEntry[] = [];
  const push = (rel: string) => {
    entries.push({
      path: path.resolve(base, rel),
      stem: rel.replace(/\.[^.]+$/, '').replace(/[\\/]/g, '_'),
    });
  };
  if (Array.isArray(raw.images)) {
    for (const rel of raw.images) push(rel);
  } else if (Array.isArray(raw.objects)) {
    for (const obj of raw.objects) {
      for (const view of obj.views ?? []) {
        if (view.image) push(view.image);
      }
    }
  }
  if (entries.length === 0) {
    throw new Error(`no images listed in ${manifestPath}`);
  }
  return entries;
}
