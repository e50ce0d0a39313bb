/**
 * Reader for the batch dump format (`VFB1`, docs/batch_dump_format.md).
 *
 * Payload bytes are read straight into reused ArrayBuffer-backed storage and
 * handed out as typed-array views: no per-element copying ever happens.
 * Consequence of the reuse: a batch's views and labels are valid only until
 * the next iteration step. Callers that need to keep a batch must copy it.
 */

import { closeSync, openSync, readSync } from 'node:fs';

const FILE_HEADER_BYTES = 12;
const FRAME_HEADER_BYTES = 18;
const MAGIC = 0x31424656; // "VFB1" little-endian

export type ViewArray = Uint8Array | Float64Array;

export interface Batch {
  epoch: number;
  batchIndex: number;
  rows: number;
  height: number;
  width: number;
  channels: number;
  /** One array per view, rows*height*width*channels elements each. */
  views: ViewArray[];
  labels: Uint32Array;
}

export interface DumpInfo {
  nViews: number;
  dtype: 'uint8' | 'float64';
}

class GrowableBuffer {
  buffer = new ArrayBuffer(0); // ArrayBuffers are allocation-aligned for f64 views

  ensure(size: number): void {
    if (this.buffer.byteLength < size) {
      this.buffer = new ArrayBuffer(size);
    }
  }
}

function readExact(fd: number, target: Uint8Array, length: number, context: string): void {
  let done = 0;
  while (done < length) {
    const got = readSync(fd, target, done, length - done, null);
    if (got === 0) {
      throw new Error(`dump file truncated while reading ${context}`);
    }
    done += got;
  }
}

/**
 * Iterate the frames of a dump file.
 *
 * Yields batches whose views/labels alias internal reused buffers; each
 * yielded batch is invalidated by the next iteration.
 */
export function* iterateDump(path: string): Generator<Batch, void, void> {
  const fd = openSync(path, 'r');
  const headerBytes = new Uint8Array(FILE_HEADER_BYTES);
  const frameBytes = new Uint8Array(FRAME_HEADER_BYTES);
  const payload = new GrowableBuffer();
  const labelStore = new GrowableBuffer();
  try {
    readExact(fd, headerBytes, FILE_HEADER_BYTES, 'file header');
    const head = new DataView(headerBytes.buffer);
    if (head.getUint32(0, true) !== MAGIC) {
      throw new Error('not a batch dump: bad magic');
    }
    const version = head.getUint32(4, true);
    if (version !== 1) {
      throw new Error(`unsupported dump version ${version}`);
    }
    const nViews = head.getUint8(8);
    const dtypeCode = head.getUint8(9);
    if (nViews > 0 && dtypeCode !== 0 && dtypeCode !== 1) {
      throw new Error(`unknown dtype code ${dtypeCode}`);
    }
    const itemBytes = dtypeCode === 1 ? 8 : 1;

    for (;;) {
      const got = readSync(fd, frameBytes, 0, FRAME_HEADER_BYTES, null);
      if (got === 0) {
        return; // clean EOF between frames
      }
      if (got < FRAME_HEADER_BYTES) {
        readExact(fd, frameBytes.subarray(got), FRAME_HEADER_BYTES - got, 'frame header');
      }
      const frame = new DataView(frameBytes.buffer);
      const epoch = frame.getUint32(0, true);
      const batchIndex = frame.getUint32(4, true);
      const rows = frame.getUint32(8, true);
      const height = frame.getUint16(12, true);
      const width = frame.getUint16(14, true);
      const channels = frame.getUint8(16);

      const perView = rows * height * width * channels;
      const viewBytes = perView * itemBytes;
      payload.ensure(nViews * viewBytes);
      const raw = new Uint8Array(payload.buffer, 0, nViews * viewBytes);
      readExact(fd, raw, nViews * viewBytes, 'view payload');

      // labels go to their own aligned store: the payload length need not be
      // a multiple of 4 for uint8 dumps
      labelStore.ensure(rows * 4);
      const labelRaw = new Uint8Array(labelStore.buffer, 0, rows * 4);
      readExact(fd, labelRaw, rows * 4, 'labels');

      const views: ViewArray[] = [];
      for (let v = 0; v < nViews; v++) {
        views.push(
          dtypeCode === 1
            ? new Float64Array(payload.buffer, v * viewBytes, perView)
            : new Uint8Array(payload.buffer, v * viewBytes, perView),
        );
      }
      yield {
        epoch,
        batchIndex,
        rows,
        height,
        width,
        channels,
        views,
        labels: new Uint32Array(labelStore.buffer, 0, rows),
      };
    }
  } finally {
    closeSync(fd);
  }
}

/** File-level metadata without iterating the frames. */
export function dumpInfo(path: string): DumpInfo {
  const fd = openSync(path, 'r');
  try {
    const headerBytes = new Uint8Array(FILE_HEADER_BYTES);
    readExact(fd, headerBytes, FILE_HEADER_BYTES, 'file header');
    const head = new DataView(headerBytes.buffer);
    if (head.getUint32(0, true) !== MAGIC) {
      throw new Error('not a batch dump: bad magic');
    }
    return {
      nViews: head.getUint8(8),
      dtype: head.getUint8(9) === 1 ? 'float64' : 'uint8',
    };
  } finally {
    closeSync(fd);
  }
}
