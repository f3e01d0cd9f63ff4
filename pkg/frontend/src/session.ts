// Session state machine: frame queue decoupled from the network, utterance
// log with once-only announcements, end-of-round summary.

import type { EndMsg, FrameMsg, ServerMsg } from "./protocol.js";

export interface Summary {
  score: number;
  ticks: number;
  collisions: number;
  visualItems: number;
  verbalUtterances: number;
}

export class SessionState {
  frames: FrameMsg[] = [];
  utteranceLog: string[] = [];
  end: EndMsg | null = null;
  error: string | null = null;
  private announced = new Set<string>();

  get current(): FrameMsg | null {
    return this.frames.length ? this.frames[this.frames.length - 1] : null;
  }

  get done(): boolean {
    return this.end !== null;
  }

  get inputEnabled(): boolean {
    return this.current !== null && !this.done && this.error === null;
  }

  consume(msg: ServerMsg): void {
    if (msg.type === "frame") {
      this.frames.push(msg);
      for (const line of msg.utterances) {
        const key = `${msg.tick}:${line}`;
        if (!this.announced.has(key)) {
          this.announced.add(key);
          this.utteranceLog.push(line);
        }
      }
    } else if (msg.type === "end") {
      this.end = msg;
    } else if (msg.type === "error") {
      this.error = msg.message;
    }
  }

  summary(): Summary | null {
    if (this.end === null) return null;
    return {
      score: this.end.score,
      ticks: this.end.tick,
      collisions: this.end.collisions,
      visualItems: this.end.visual_items,
      verbalUtterances: this.end.verbal_utterances,
    };
  }

  /** Frame stream as canonical JSON, for replay comparisons. */
  frameStream(): string {
    return JSON.stringify(this.frames.map((f) => sortKeys(f)));
  }
}

function sortKeys(obj: unknown): unknown {
  if (Array.isArray(obj)) return obj.map(sortKeys);
  if (obj !== null && typeof obj === "object") {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(obj as Record<string, unknown>).sort()) {
      out[key] = sortKeys((obj as Record<string, unknown>)[key]);
    }
    return out;
  }
  return obj;
}
