// Scene building is pure (testable); canvas drawing is a thin layer on top.
// Unknown regions render dark; communicated items are visually distinct
// (outlined) from directly seen ones.

import type { BombView, DrivingView, FrameMsg, RescueView } from "./protocol.js";

export interface Drawable {
  kind: "rect" | "text";
  x: number;
  y: number;
  w?: number;
  h?: number;
  color: string;
  outlined?: boolean;
  text?: string;
}

const COLORS = {
  fog: "#111118",
  road: "#3a3a40",
  ego: "#4d9fff",
  car: "#e05252",
  highlight: "#ffd24d",
  wall: "#666",
  obstacle: "#c0392b",
  victim: "#2ecc71",
  agent: "#4d9fff",
  unknown: "#101016",
  free: "#2e2e36",
};

export function buildDrivingScene(view: DrivingView, highlights: Record<string, unknown>): Drawable[] {
  const cells = 2 * view.road_half_length + 1;
  const out: Drawable[] = [];
  // fog backdrop first, then the visible strip of road
  out.push({ kind: "rect", x: 0, y: 0, w: 2, h: cells, color: COLORS.fog });
  for (let lane = 0; lane < 2; lane++) {
    for (let i = 0; i < cells; i++) {
      const pos = view.road_half_length - i; // top of the canvas is "ahead"
      const visible = view.fog_front === null || (pos >= 0 && pos <= view.fog_front);
      if (visible) {
        out.push({ kind: "rect", x: lane, y: i, w: 1, h: 1, color: COLORS.road });
      }
    }
  }
  out.push({
    kind: "rect", x: view.ego_lane, y: view.road_half_length, w: 1, h: 1, color: COLORS.ego,
  });
  const seen = new Set(Object.keys(view.cars));
  for (const [id, car] of Object.entries(view.cars)) {
    out.push({
      kind: "rect", x: car.lane, y: view.road_half_length - Math.round(car.pos),
      w: 1, h: 1, color: COLORS.car,
    });
    void id;
  }
  for (const [id, raw] of Object.entries(highlights)) {
    if (seen.has(id)) continue; // direct sight wins; no duplicate block
    const car = raw as { lane: number; pos: number };
    out.push({
      kind: "rect", x: car.lane, y: view.road_half_length - Math.round(car.pos),
      w: 1, h: 1, color: COLORS.highlight, outlined: true,
    });
  }
  return out;
}

export function buildRescueScene(view: RescueView, highlights: Record<string, unknown>): Drawable[] {
  const out: Drawable[] = [];
  for (let r = 0; r < view.grid; r++) {
    for (let c = 0; c < view.grid; c++) {
      const key = `${r},${c}`;
      const known = view.cells[key] !== undefined;
      const fromComm = highlights[key] !== undefined;
      const content = (view.cells[key] ?? highlights[key]) as string | undefined;
      let color = COLORS.unknown;
      if (known || fromComm) {
        color =
          content === "wall" ? COLORS.wall
          : content === "obstacle" ? COLORS.obstacle
          : content === "victim" ? COLORS.victim
          : COLORS.free;
      }
      out.push({
        kind: "rect", x: c, y: r, w: 1, h: 1, color,
        outlined: fromComm && !known,
      });
    }
  }
  const [ar, ac] = view.agent;
  out.push({ kind: "rect", x: ac, y: ar, w: 1, h: 1, color: COLORS.agent });
  return out;
}

export function buildBombScene(view: BombView, highlights: Record<string, unknown>): Drawable[] {
  const out: Drawable[] = [];
  out.push({ kind: "text", x: 0, y: 0, color: "#fff", text: `stage ${view.stage}/3` });
  out.push({ kind: "text", x: 0, y: 1, color: "#fff", text: `time left ${view.time_left}s` });
  if (view.recommendation !== null) {
    out.push({
      kind: "text", x: 0, y: 2, color: COLORS.highlight,
      text: `robot suggests button ${view.recommendation + 1}`,
    });
  }
  if (highlights["relevant_symbol"] !== undefined) {
    out.push({
      kind: "text", x: 0, y: 3, color: COLORS.highlight, outlined: true,
      text: `terminal symbol: ${highlights["relevant_symbol"]}`,
    });
  }
  return out;
}

export function buildScene(frame: FrameMsg): Drawable[] {
  switch (frame.view.kind) {
    case "driving":
      return buildDrivingScene(frame.view, frame.highlights);
    case "rescue":
      return buildRescueScene(frame.view, frame.highlights);
    case "bomb":
      return buildBombScene(frame.view, frame.highlights);
  }
}

export function drawScene(ctx: CanvasRenderingContext2D, scene: Drawable[], cell: number): void {
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  for (const d of scene) {
    if (d.kind === "rect") {
      ctx.fillStyle = d.color;
      ctx.fillRect(d.x * cell, d.y * cell, (d.w ?? 1) * cell, (d.h ?? 1) * cell);
      if (d.outlined) {
        ctx.strokeStyle = "#fff";
        ctx.lineWidth = 2;
        ctx.strokeRect(d.x * cell + 1, d.y * cell + 1, (d.w ?? 1) * cell - 2, (d.h ?? 1) * cell - 2);
      }
    } else {
      ctx.fillStyle = d.color;
      ctx.font = "14px monospace";
      ctx.fillText(d.text ?? "", d.x * cell + 4, (d.y + 1) * cell - 4);
    }
  }
}
