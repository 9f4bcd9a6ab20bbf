/**
 * Serving loop: one request in flight at a time, over TCP or stdio.
 *
 * Malformed frames whose byte length is still well defined get an error
 * frame back and the stream continues; anything that poisons the framing
 * gets a best-effort error frame and tears the connection down. A shutdown
 * frame or a clean EOF ends the loop normally.
 */

import * as net from 'node:net';
import type { Writable } from 'node:stream';
import {
  BadFrameError,
  ByteSource,
  MAGIC_FINE_TUNE,
  MAGIC_REQUEST,
  MAGIC_SHUTDOWN,
  WireError,
  encodeError,
  encodeFineTuneAck,
  encodeResponse,
  readFineTuneBody,
  readRequestBody,
} from './wire.js';
import type { NetBackend } from './backend.js';

function write(sink: Writable, data: Buffer): Promise<void> {
  return new Promise((resolve, reject) => {
    sink.write(data, (err) => (err ? reject(err) : resolve()));
  });
}

export interface ServeResult {
  /** Requests answered (score maps only, matching the toolkit's counter). */
  served: number;
  /** True when the peer said goodbye rather than just closing the pipe. */
  shutdown: boolean;
}

export async function serveStream(
  backend: NetBackend,
  source: ByteSource,
  sink: Writable,
): Promise<ServeResult> {
  let served = 0;
  for (;;) {
    let magic: string | null;
    try {
      magic = await source.readMagic();
    } catch {
      // mid-frame EOF; nobody is left to notify
      return { served, shutdown: false };
    }
    if (magic === null) return { served, shutdown: false };
    if (magic === MAGIC_SHUTDOWN) return { served, shutdown: true };
    if (magic === MAGIC_REQUEST) {
      try {
        const { image, mask } = await readRequestBody(source);
        const scores = backend.refine(image, mask);
        await write(sink, encodeResponse(image.width, image.height, scores));
      } catch (exc) {
        await write(sink, encodeError(String(exc instanceof Error ? exc.message : exc)));
        if (exc instanceof WireError && !(exc instanceof BadFrameError)) throw exc;
      }
      served += 1;
    } else if (magic === MAGIC_FINE_TUNE) {
      try {
        const samples = await readFineTuneBody(source);
        backend.fineTune(samples);
        await write(sink, encodeFineTuneAck(samples.length));
      } catch (exc) {
        await write(sink, encodeError(String(exc instanceof Error ? exc.message : exc)));
        if (exc instanceof WireError && !(exc instanceof BadFrameError)) throw exc;
      }
    } else {
      const message = `unknown frame magic ${JSON.stringify(magic)}`;
      await write(sink, encodeError(message));
      throw new WireError(message);
    }
  }
}

/**
 * Serve over TCP, one connection at a time. Resolves with the total served
 * once a client sends the shutdown frame; a dropped or misbehaving
 * connection is logged and the listener keeps accepting.
 */
export function serveTcp(
  backend: NetBackend,
  host: string,
  port: number,
  onListen?: (address: net.AddressInfo) => void,
): Promise<number> {
  return new Promise((resolve, reject) => {
    let total = 0;
    let busy = false;
    const server = net.createServer((socket) => {
      if (busy) {
        // one request in flight per process; a second client is a mistake
        socket.end(encodeError('backend is busy with another connection'));
        return;
      }
      busy = true;
      socket.on('error', () => {});
      serveStream(backend, new ByteSource(socket), socket)
        .then((result) => {
          total += result.served;
          socket.end();
          if (result.shutdown) {
            server.close();
            resolve(total);
          }
        })
        .catch((exc) => {
          console.error(`connection failed: ${exc instanceof Error ? exc.message : exc}`);
          socket.destroy();
        })
        .finally(() => {
          busy = false;
        });
    });
    server.on('error', reject);
    server.listen(port, host, () => {
      onListen?.(server.address() as net.AddressInfo);
    });
  });
}

/** Serve over stdin/stdout until shutdown or EOF. */
export async function serveStdio(backend: NetBackend): Promise<number> {
  const result = await serveStream(backend, new ByteSource(process.stdin), process.stdout);
  return result.served;
}
