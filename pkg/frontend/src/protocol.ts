// Session protocol types and client. One JSON message per WebSocket frame;
// the client speaks first and the server's first reply is the hello.

export const SESSION_SCHEMA = "mirror.session.v1";

export type Domain = "driving" | "rescue" | "bomb";

export interface StartMsg {
  schema: string;
  type: "start";
  domain: Domain;
  variant: "original" | "transfer";
  method: string;
  persona: string;
  scenario?: number;
  seed?: number;
}

export interface DrivingView {
  kind: "driving";
  ego_lane: number;
  cars: Record<string, { lane: number; pos: number }>;
  road_half_length: number;
  fog_front: number | null;
}

export interface RescueView {
  kind: "rescue";
  grid: number;
  agent: [number, number];
  cells: Record<string, string>;
  carrying: boolean;
}

export interface BombView {
  kind: "bomb";
  stage: number;
  time_left: number;
  recommendation: number | null;
}

export type View = DrivingView | RescueView | BombView;

export interface FrameMsg {
  schema: string;
  type: "frame";
  tick: number;
  done: boolean;
  tick_ms: number;
  view: View;
  highlights: Record<string, unknown>;
  utterances: string[];
  score: number;
}

export interface EndMsg {
  schema: string;
  type: "end";
  tick: number;
  score: number;
  collisions: number;
  visual_items: number;
  verbal_utterances: number;
}

export interface ErrorMsg {
  schema: string;
  type: "error";
  message: string;
}

export type ServerMsg =
  | FrameMsg
  | EndMsg
  | ErrorMsg
  | { schema: string; type: "hello"; domains: string[]; methods: string[] }
  | { schema: string; type: "trajectory"; text: string };

export function parseServerMsg(raw: string): ServerMsg {
  const msg = JSON.parse(raw) as ServerMsg;
  if (msg.schema !== SESSION_SCHEMA) {
    throw new Error(`unsupported schema ${String(msg.schema)}`);
  }
  return msg;
}

export function encodeClientMsg(msg: object): string {
  return JSON.stringify({ schema: SESSION_SCHEMA, ...msg });
}

export interface LogEntry {
  dir: "in" | "out";
  msg: Record<string, unknown>;
}

// Transport-agnostic socket: the browser passes a WebSocket, tests pass fakes.
export interface MessagePort {
  send(text: string): void;
  onmessage: ((text: string) => void) | null;
  close(): void;
}

export class SessionClient {
  private port: MessagePort;
  readonly log: LogEntry[] = [];
  onServerMsg: ((msg: ServerMsg) => void) | null = null;

  constructor(port: MessagePort) {
    this.port = port;
    port.onmessage = (text) => {
      const msg = parseServerMsg(text);
      this.log.push({ dir: "in", msg: msg as unknown as Record<string, unknown> });
      if (this.onServerMsg) this.onServerMsg(msg);
    };
  }

  send(msg: object): void {
    const full = JSON.parse(encodeClientMsg(msg)) as Record<string, unknown>;
    this.log.push({ dir: "out", msg: full });
    this.port.send(JSON.stringify(full));
  }

  hello(): void {
    this.send({ type: "hello" });
  }

  start(opts: Omit<StartMsg, "schema" | "type">): void {
    this.send({ type: "start", ...opts });
  }

  action(action: number): void {
    this.send({ type: "action", action });
  }

  close(): void {
    this.port.close();
  }
}

export function wsPort(url: string): MessagePort {
  const ws = new WebSocket(url);
  const port: MessagePort = {
    send: (text) => ws.send(text),
    onmessage: null,
    close: () => ws.close(),
  };
  ws.onmessage = (ev) => {
    if (port.onmessage) port.onmessage(String(ev.data));
  };
  return port;
}

// Replays the inbound half of a recorded log through any consumer, so a
// reconnect (or a test) reconstructs the identical frame sequence.
export function replayInbound(log: LogEntry[], consume: (msg: ServerMsg) => void): number {
  let count = 0;
  for (const entry of log) {
    if (entry.dir === "in") {
      consume(entry.msg as unknown as ServerMsg);
      count += 1;
    }
  }
  return count;
}
