/**
 * Headless scripted collector: drives reach_grasp demonstrations through a
 * running session server exactly as the browser client would, episode per
 * connection.
 *
 * Usage: node --experimental-websocket dist/scripts/collect.js \
 *          --server ws://127.0.0.1:8765 --episodes 20
 *
 * Relies on the WebSocket global (node >= 20 with --experimental-websocket,
 * node >= 22 out of the box, any browser bundler).
 */

import { TeleopClient } from "../src/client.js";
import { runReachGraspEpisode } from "../src/scriptedOperator.js";

function arg(name: string, fallback: string): string {
  const i = process.argv.indexOf(name);
  return i >= 0 && i + 1 < process.argv.length ? process.argv[i + 1] : fallback;
}

declare const WebSocket: {
  new (url: string): {
    binaryType: string;
    send(data: Uint8Array): void;
    close(): void;
    addEventListener(type: string, fn: (ev: any) => void): void;
  };
};

async function runEpisode(server: string): Promise<{ success: boolean; path: string | null }> {
  const ws = new WebSocket(server);
  ws.binaryType = "arraybuffer";
  const client = new TeleopClient((bytes) => ws.send(bytes));

  const opened = new Promise<void>((resolve, reject) => {
    ws.addEventListener("open", () => resolve());
    ws.addEventListener("error", (ev) => reject(new Error(`websocket error: ${ev?.message ?? ev}`)));
  });
  ws.addEventListener("message", (ev) => {
    client.feed(ev.data as ArrayBuffer);
  });
  ws.addEventListener("close", () => {
    client.failWaiters(new Error("connection closed"));
  });

  await opened;
  try {
    const end = await runReachGraspEpisode(client);
    return { success: Boolean(end["success"]), path: (end["path"] as string | null) ?? null };
  } finally {
    ws.close();
  }
}

async function main(): Promise<void> {
  if (typeof WebSocket === "undefined") {
    console.error("WebSocket global missing: run node with --experimental-websocket");
    process.exit(2);
  }
  const server = arg("--server", "ws://127.0.0.1:8765");
  const episodes = parseInt(arg("--episodes", "1"), 10);
  let succeeded = 0;
  for (let i = 0; i < episodes; i++) {
    const r = await runEpisode(server);
    succeeded += r.success ? 1 : 0;
    console.log(`episode ${i}: success=${r.success} path=${r.path}`);
  }
  console.log(`collected ${episodes} episodes, ${succeeded} successful`);
  process.exit(succeeded === episodes ? 0 : 1);
}

main().catch((err) => {
  console.error(err);
  process.exit(1);
});
