/**
 * Subprocess bridge to the native CLI.
 *
 * The native side is the source of truth: this module only moves bytes.
 * Errors printed as `error: <Name>: message` surface here as NativeError
 * with the native error name preserved.
 */

import { execFileSync } from 'node:child_process';

export class NativeError extends Error {
  /** Error class name reported by the native process (e.g. "FormatError"). */
  readonly nativeName: string;

  constructor(nativeName: string, message: string) {
    super(`${nativeName}: ${message}`);
    this.name = 'NativeError';
    this.nativeName = nativeName;
  }
}

/** Command used to reach the CLI; override with VIEWFORGE_BIN ("cmd arg ..."). */
export function nativeCommand(): string[] {
  const env = process.env['VIEWFORGE_BIN'];
  if (env && env.trim().length > 0) {
    return env.trim().split(/\s+/);
  }
  return ['viewforge'];
}

function parseNativeError(stderr: string, fallback: string): NativeError {
  const match = /error:\s*([A-Za-z]+):\s*(.*)/.exec(stderr);
  if (match) {
    return new NativeError(match[1]!, match[2] ?? '');
  }
  return new NativeError('NativeFailure', fallback || stderr.trim());
}

export function runNative(args: string[], stdin?: string): string {
  const [cmd, ...prefix] = nativeCommand();
  try {
    return execFileSync(cmd!, [...prefix, ...args], {
      input: stdin,
      encoding: 'utf8',
      maxBuffer: 256 * 1024 * 1024,
    });
  } catch (err) {
    const anyErr = err as { stderr?: string | Buffer; message?: string };
    const stderr =
      typeof anyErr.stderr === 'string'
        ? anyErr.stderr
        : anyErr.stderr?.toString('utf8') ?? '';
    throw parseNativeError(stderr, anyErr.message ?? 'native call failed');
  }
}
