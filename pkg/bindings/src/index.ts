/**
 * viewforge bindings: native batch streams and loss kernels for Node hosts.
 *
 * `open_loader` replays the exact batch stream the native loader delivers
 * for a config file; the loss functions delegate to the native kernels over
 * a bit-preserving base64/JSON wire, so results are bitwise equal to
 * in-process native calls. Only float64 is accepted at the loss boundary.
 */

import { mkdtempSync, rmSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

import type { Batch, ViewArray } from './frames.js';
import { dumpInfo, iterateDump } from './frames.js';
import { NativeError, runNative } from './native.js';

export { NativeError } from './native.js';
export { iterateDump, dumpInfo } from './frames.js';
export type { Batch, ViewArray } from './frames.js';

export interface LoaderOptions {
  /** Batches to replay (defaults to the config's train.steps). */
  steps?: number;
  seed?: number;
}

export interface BoundLoader extends Iterable<Batch> {
  /** Remove the on-disk replay; iteration after close() throws. */
  close(): void;
}

/**
 * Materialize the native batch stream for a harness config and iterate it.
 *
 * Lifetime contract: each yielded batch's buffers are invalidated by the
 * next iteration step (storage is reused, never copied per element).
 */
export function open_loader(configPath: string, options: LoaderOptions = {}): BoundLoader {
  const dir = mkdtempSync(join(tmpdir(), 'viewforge-'));
  const dumpPath = join(dir, 'stream.vfb');
  const args = ['train', '--config', configPath, '--dump-batches', dumpPath];
  if (options.steps !== undefined) {
    args.push('--steps', String(options.steps));
  }
  if (options.seed !== undefined) {
    args.push('--seed', String(options.seed));
  }
  runNative(args);

  let closed = false;
  return {
    close(): void {
      if (!closed) {
        closed = true;
        rmSync(dir, { recursive: true, force: true });
      }
    },
    *[Symbol.iterator](): Generator<Batch, void, void> {
      if (closed) {
        throw new Error('loader is closed');
      }
      yield* iterateDump(dumpPath);
    },
  };
}

// ---------------------------------------------------------------------------
// loss kernels
// ---------------------------------------------------------------------------

export interface LossResult {
  value: number;
  grad: Float64Array;
  terms: Record<string, number>;
}

export interface TwoSidedLossResult extends LossResult {
  gradRight: Float64Array;
}

function toBase64(arr: Float64Array): string {
  return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength).toString('base64');
}

function fromBase64(data: string): Float64Array {
  const buf = Buffer.from(data, 'base64');
  // copy into fresh aligned storage: base64 decode gives pooled buffers
  const out = new Float64Array(buf.byteLength / 8);
  new Uint8Array(out.buffer).set(buf);
  return out;
}

function checkMatrix(z: Float64Array, n: number, k: number, name: string): void {
  if (!(z instanceof Float64Array)) {
    throw new TypeError(`${name} must be a Float64Array (float64 only at the loss boundary)`);
  }
  if (z.length !== n * k) {
    throw new RangeError(`${name} has ${z.length} elements, expected n*k = ${n * k}`);
  }
}

interface LossResponse {
  value: string;
  grad: string;
  grad_right?: string;
  terms: Record<string, number>;
}

function callLoss(request: object): LossResponse {
  const out = runNative(['loss-eval'], JSON.stringify(request));
  return JSON.parse(out) as LossResponse;
}

/**
 * Contrastive loss over interleaved pair rows (rows 2k, 2k+1 are views of
 * source k); n must be even.
 */
export function simclr_loss(
  z: Float64Array,
  n: number,
  k: number,
  params: { tau?: number } = {},
): LossResult {
  checkMatrix(z, n, k, 'z');
  const response = callLoss({
    loss: 'simclr',
    n,
    k,
    z: toBase64(z),
    params: { tau: params.tau ?? 0.15 },
  });
  return {
    value: fromBase64(response.value)[0]!,
    grad: fromBase64(response.grad),
    terms: response.terms,
  };
}

/** Variance/covariance/invariance triplet over interleaved pair rows. */
export function vicreg_loss(
  z: Float64Array,
  n: number,
  k: number,
  params: { alpha?: number; beta?: number; gamma?: number; epsilon?: number } = {},
): LossResult {
  checkMatrix(z, n, k, 'z');
  const response = callLoss({
    loss: 'vicreg',
    n,
    k,
    z: toBase64(z),
    params: {
      alpha: params.alpha ?? 25.0,
      beta: params.beta ?? 1.0,
      gamma: params.gamma ?? 25.0,
      epsilon: params.epsilon ?? 1e-4,
    },
  });
  return {
    value: fromBase64(response.value)[0]!,
    grad: fromBase64(response.grad),
    terms: response.terms,
  };
}

/** Cross-correlation redundancy loss over a left/right view split. */
export function barlow_loss(
  zLeft: Float64Array,
  zRight: Float64Array,
  n: number,
  k: number,
  params: { alpha?: number } = {},
): TwoSidedLossResult {
  checkMatrix(zLeft, n, k, 'zLeft');
  checkMatrix(zRight, n, k, 'zRight');
  const response = callLoss({
    loss: 'barlow',
    n,
    k,
    z_left: toBase64(zLeft),
    z_right: toBase64(zRight),
    params: { alpha: params.alpha ?? 0.0025 },
  });
  return {
    value: fromBase64(response.value)[0]!,
    grad: fromBase64(response.grad),
    gradRight: fromBase64(response.grad_right!),
    terms: response.terms,
  };
}
