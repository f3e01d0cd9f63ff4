// Per-domain keymaps. Input is tick-synchronous: one action per frame;
// extra presses within a tick are dropped (the UI shows "buffered").

import type { Domain } from "./protocol.js";

export const KEYMAPS: Record<Domain, Record<string, number>> = {
  driving: {
    ArrowUp: 0, // hold lane
    ArrowLeft: 1, // switch lanes
    ArrowRight: 1,
  },
  rescue: {
    ".": 0,
    ArrowUp: 1,
    ArrowDown: 2,
    ArrowLeft: 3,
    ArrowRight: 4,
  },
  bomb: {
    "1": 0,
    "2": 1,
    "3": 2,
    " ": 3, // keep searching
  },
};

export function actionForKey(domain: Domain, key: string): number | null {
  const mapped = KEYMAPS[domain][key];
  return mapped === undefined ? null : mapped;
}

export class TickGate {
  private armed = true;
  dropped = 0;

  /** Returns true when the press may be sent this tick. */
  admit(): boolean {
    if (!this.armed) {
      this.dropped += 1;
      return false;
    }
    this.armed = false;
    return true;
  }

  nextTick(): void {
    this.armed = true;
  }
}
