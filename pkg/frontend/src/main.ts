// Browser bootstrap: connect, render frames, forward keys, show the summary.

import { actionForKey, TickGate } from "./input.js";
import type { Domain, FrameMsg } from "./protocol.js";
import { SessionClient, wsPort } from "./protocol.js";
import { buildScene, drawScene } from "./renderer.js";
import { SessionState } from "./session.js";

const CELL = 32;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function boot(): void {
  const canvas = el<HTMLCanvasElement>("scene");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas unsupported");
  const log = el<HTMLUListElement>("utterances");
  const status = el<HTMLDivElement>("status");
  const summaryPanel = el<HTMLDivElement>("summary");
  const form = el<HTMLFormElement>("setup");

  let client: SessionClient | null = null;
  let state = new SessionState();
  let gate = new TickGate();
  let domain: Domain = "driving";

  function render(frame: FrameMsg): void {
    const scene = buildScene(frame);
    drawScene(ctx!, scene, CELL);
    status.textContent = `tick ${frame.tick} | score ${frame.score.toFixed(1)}`;
    log.replaceChildren(
      ...state.utteranceLog.slice(-8).map((line) => {
        const li = document.createElement("li");
        li.textContent = line;
        return li;
      }),
    );
  }

  function showSummary(): void {
    const s = state.summary();
    if (!s) return;
    summaryPanel.hidden = false;
    summaryPanel.textContent =
      `round over: score ${s.score.toFixed(1)}, collisions ${s.collisions}, ` +
      `${s.visualItems} visual items, ${s.verbalUtterances} utterances`;
    const download = document.createElement("button");
    download.textContent = "download demonstration";
    download.onclick = () => client?.send({ type: "download" });
    summaryPanel.appendChild(download);
  }

  form.onsubmit = (ev) => {
    ev.preventDefault();
    const data = new FormData(form);
    domain = String(data.get("domain")) as Domain;
    state = new SessionState();
    gate = new TickGate();
    summaryPanel.hidden = true;
    client?.close();
    client = new SessionClient(wsPort(`ws://${location.host}/ws`));
    client.onServerMsg = (msg) => {
      state.consume(msg);
      if (msg.type === "frame") {
        gate.nextTick();
        render(msg);
      } else if (msg.type === "end") {
        showSummary();
      } else if (msg.type === "error") {
        status.textContent = `error: ${state.error}`;
      } else if (msg.type === "trajectory") {
        const blob = new Blob([msg.text], { type: "application/jsonl" });
        const a = document.createElement("a");
        a.href = URL.createObjectURL(blob);
        a.download = "demonstration.jsonl";
        a.click();
      }
    };
    client.hello();
    client.start({
      domain,
      variant: String(data.get("variant")) as "original" | "transfer",
      method: String(data.get("method")),
      persona: "live",
      seed: Number(data.get("seed") ?? 0),
    });
  };

  window.addEventListener("keydown", (ev) => {
    if (!client || !state.inputEnabled) return;
    const action = actionForKey(domain, ev.key);
    if (action === null) return;
    ev.preventDefault();
    if (!gate.admit()) {
      status.textContent += " [buffered]";
      return;
    }
    client.action(action);
  });
}

boot();
