/**
 * Transport-agnostic session client: stamps outgoing seq numbers, enforces
 * phase gating, and folds server messages into a ViewerState.  The browser
 * viewer and the headless scripted collector both drive this class; only
 * the byte transport differs.
 */

import { decodeMessage, encodeMessage, PROTOCOL_VERSION, type TeleopMessage } from "./protocol.js";
import { applyLocal, applyServer, canSend, initialViewerState, type ViewerState } from "./viewerState.js";

export type SendBytes = (data: Uint8Array) => void;

interface Waiter {
  pred: (msg: TeleopMessage, state: ViewerState) => boolean;
  resolve: (msg: TeleopMessage) => void;
  reject: (err: Error) => void;
}

export class GatingError extends Error {}

export class TeleopClient {
  state: ViewerState;
  private sendBytes: SendBytes;
  private seq = -1;
  private waiters: Waiter[] = [];
  private queued: TeleopMessage[] = [];

  constructor(sendBytes: SendBytes) {
    this.state = initialViewerState();
    this.sendBytes = sendBytes;
  }

  /** Feed one raw frame from the transport. */
  feed(data: Uint8Array | ArrayBuffer | string): TeleopMessage {
    const msg = decodeMessage(data);
    applyServer(this.state, msg);
    const still: Waiter[] = [];
    for (const w of this.waiters) {
      if (w.pred(msg, this.state)) {
        w.resolve(msg);
      } else {
        still.push(w);
      }
    }
    this.waiters = still;
    return msg;
  }

  /**
   * Send a message; seq and the current frame index are stamped here so
   * every outgoing message is tied to the cloud the user was looking at.
   */
  send(type: string, fields: Record<string, unknown> = {}): TeleopMessage {
    if (!canSend(this.state, type)) {
      throw new GatingError(`${type} is not legal in phase ${this.state.phase}`);
    }
    this.seq += 1;
    const msg: TeleopMessage = {
      frame_index: this.state.frameIndex,
      ...fields,
      type,
      seq: this.seq,
    };
    this.sendBytes(encodeMessage(msg));
    applyLocal(this.state, msg);
    return msg;
  }

  hello(client = "teleop-ui/0.1.0"): TeleopMessage {
    return this.send("hello", { protocol_version: PROTOCOL_VERSION, client });
  }

  /** Resolve when a server message satisfying `pred` arrives. */
  waitFor(
    pred: (msg: TeleopMessage, state: ViewerState) => boolean,
    timeoutMs = 30_000,
  ): Promise<TeleopMessage> {
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        this.waiters = this.waiters.filter((w) => w !== waiter);
        reject(new Error(`timed out waiting for server message after ${timeoutMs} ms`));
      }, timeoutMs);
      const waiter: Waiter = {
        pred,
        resolve: (msg) => {
          clearTimeout(timer);
          resolve(msg);
        },
        reject,
      };
      this.waiters.push(waiter);
    });
  }

  waitForType(type: string, timeoutMs = 30_000): Promise<TeleopMessage> {
    return this.waitFor((m) => m.type === type, timeoutMs);
  }

  failWaiters(err: Error): void {
    for (const w of this.waiters) {
      w.reject(err);
    }
    this.waiters = [];
  }
}
