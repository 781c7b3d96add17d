export { encodeFtb1, decodeFtb1, readFtb1, writeFtb1 } from './ftb1.js';
export type { FeatureGrid } from './ftb1.js';
export { loadModel } from './models.js';
export type { LoadedModel } from './models.js';
export { listImages } from './manifest.js';
export { runExtraction } from './extract.js';
export { loadPng, resizeTo, writePng } from './image.js';
