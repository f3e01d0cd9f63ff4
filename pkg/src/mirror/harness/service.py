"""Live-session service.

One asyncio listener speaks two transports that carry identical JSON
messages: raw TCP with newline-delimited decimal length prefixes (the
canonical wire format), and HTTP/WebSocket for browsers (the first bytes
of a connection decide). Static frontend files are served from an optional
directory. Each session is serialized internally: one in-flight tick.

Message schema (mirror.session.v1):
  client: {type: start, domain, variant, method, persona, scenario?, seed?}
          {type: action, action: int}   # -1 lets a scripted persona act
          {type: download}              # demo trajectory as text lines
          {type: bye}
  server: {type: hello|frame|end|trajectory|error, ...}
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import io
import json
import mimetypes
from pathlib import Path

import numpy as np

from .. import rng as rngmod
from ..envs import bomb as bombmod
from ..envs import driving as drvmod
from ..envs import rescue as rescuemod
from ..envs import make_env
from ..humans import load_personas, make_human
from ..implants import ImplantSet
from ..types import Step, TrajectoryRecord, dump_trajectories, save_trajectories
from ..world_model import WorldModelParams
from .config import ExperimentConfig
from .episodes import (
    EPISODE_CAP,
    build_assistant,
    comm_payload_to_facts,
    human_act,
    mask_counts,
)

SESSION_SCHEMA = "mirror.session.v1"
TICK_MS = {"driving": 500, "rescue": 500, "bomb": 1000}

LIVE_METHODS = ("nc", "mirror", "mirror_p", "mirror_kl")


class ProtocolError(Exception):
    pass


def utterance_text(domain: str, facts: dict) -> list[str]:
    """Fixed-vocabulary verbal templates for communicated facts."""
    lines = []
    if domain == "driving":
        for i, (lane, pos, speed) in sorted(facts.get("verbal", {}).items()):
            where = "ahead" if pos >= 0 else "behind"
            pace = "speeding up" if speed > 1.0 else ("slowing down" if speed < 1.0 else "keeping pace")
            lines.append(f"car {i} {abs(pos):.0f} {where} in lane {lane}, {pace}")
    elif domain == "rescue":
        for cell, content in sorted(facts.get("cells", {}).items()):
            if cell in rescuemod.GAPS.values():
                name = "top" if cell == rescuemod.GAPS["top"] else "bottom"
                state = "blocked" if content == "obstacle" else "clear"
                lines.append(f"{name} corridor is {state}")
            elif cell in rescuemod.VICTIM_CELLS:
                j = rescuemod.VICTIM_CELLS.index(cell)
                verdict = "there" if content == "victim" else "not there"
                lines.append(f"victim position {j + 1}: {verdict}")
    else:
        if "bomb_type" in facts:
            lines.append(f"Type {'A' if facts['bomb_type'] == 0 else 'B'} Bomb")
        if "relevant_symbol" in facts:
            lines.append(f"relevant terminal shows symbol {facts['relevant_symbol']}")
    return lines


def render_view(domain: str, env) -> dict:
    """Human-visible state only; the UI never receives hidden ground truth."""
    if domain == "driving":
        facts = env.human_facts()
        return {
            "kind": "driving",
            "ego_lane": facts["ego_lane"],
            "cars": {str(i): {"lane": lane, "pos": pos} for i, (lane, pos) in facts["cars"].items()},
            "road_half_length": drvmod.SENSOR_RANGE,
            "fog_front": drvmod.FOG_FRONT_RANGE if env.variant == "transfer" else None,
        }
    if domain == "rescue":
        facts = env.human_facts()
        return {
            "kind": "rescue",
            "grid": rescuemod.GRID,
            "agent": list(facts["agent"]),
            "cells": {f"{r},{c}": v for (r, c), v in facts["cells"].items()},
            "carrying": facts["carrying"],
        }
    s = env.state
    return {
        "kind": "bomb",
        "stage": s.stage,
        "time_left": bombmod.TIME_LIMIT - s.elapsed,
        "recommendation": env.robot_recommendation() if s.stage <= bombmod.N_STAGES else None,
    }


def highlight_payload(domain: str, facts: dict) -> dict:
    if domain == "driving":
        return {str(i): {"lane": lane, "pos": pos} for i, (lane, pos) in facts.get("cars", {}).items()}
    if domain == "rescue":
        return {f"{r},{c}": v for (r, c), v in facts.get("cells", {}).items()}
    out = {}
    if "relevant_symbol" in facts:
        out["relevant_symbol"] = facts["relevant_symbol"]
    return out


class Session:
    """One episode driven over the message protocol."""

    def __init__(self, service: "SessionService", msg: dict):
        domain = msg.get("domain")
        if domain not in ("driving", "rescue", "bomb"):
            raise ProtocolError(f"unknown domain {domain!r}")
        variant = msg.get("variant", "transfer")
        method = msg.get("method", "nc")
        persona = msg.get("persona", "live")
        if method not in LIVE_METHODS and persona == "live":
            raise ProtocolError(f"method {method!r} needs a scripted persona")
        self.domain = domain
        self.variant = variant
        self.method = method
        self.seed = int(msg.get("seed", 0))
        from .episodes import scenario_ids

        self.scenario = int(msg.get("scenario", scenario_ids(domain)[0]))
        self.env = make_env(domain, self.scenario, variant)
        self.env.reset(rngmod.substream(self.seed, "env"))
        self.act_rng = rngmod.substream(self.seed, "act")
        self.scripted = None
        persona_params = None
        if persona != "live":
            presets = {p.name: p for p in load_personas(domain)}
            if persona not in presets:
                raise ProtocolError(f"unknown persona {persona!r}")
            persona_params = presets[persona]
            self.scripted = make_human(domain, persona_params)
        self.assistant = service.assistant_for(method, domain, variant)
        self.assistant.begin_episode(self.seed)
        self.tick = 0
        self.done = False
        self.score = 0.0
        self.vis_items = 0.0
        self.verb_items = 0.0
        self.prev_action = None
        self.robot_steps: list[Step] = []
        self.frames: list[dict] = []
        self._pending_full = None
        self._pending_comm = None

    def frame(self) -> dict:
        obs = self.env.full_observation()
        if self.scripted is not None:
            self.scripted.observe(self.env.human_facts(), self.tick)
        self.assistant.update_beliefs(obs, self.prev_action)
        comm = self.assistant.plan_comm(self.env, self.scripted, self.tick)
        facts = comm["facts"] if comm else {}
        if comm and self.scripted is not None:
            self.scripted.absorb_communication(facts, self.tick)
        if comm:
            self.vis_items += comm["visual_items"]
            self.verb_items += comm["verbal_utterances"]
        self._pending_full = obs
        self._pending_comm = comm
        frame = {
            "schema": SESSION_SCHEMA,
            "type": "frame",
            "tick": self.tick,
            "done": self.done,
            "tick_ms": TICK_MS[self.domain],
            "view": render_view(self.domain, self.env),
            "highlights": highlight_payload(self.domain, facts),
            "utterances": utterance_text(self.domain, facts),
            "score": self.score,
        }
        self.frames.append(frame)
        return frame

    def act(self, action: int) -> dict:
        if self.done:
            raise ProtocolError("session finished")
        if action == -1:
            if self.scripted is None:
                raise ProtocolError("auto action needs a scripted persona")
            action = human_act(self.domain, self.scripted, self.env, self.tick, self.act_rng)
        action = int(action)
        if not 0 <= action < self.env.n_actions:
            raise ProtocolError(f"invalid action {action}")
        full = self._pending_full
        _, reward, done, info = self.env.step(action)
        self.robot_steps.append(Step(full, action, reward))
        self.score += reward
        self.prev_action = action
        self.tick += 1
        self.done = done or self.tick >= EPISODE_CAP[self.domain]
        if self.done:
            return self.end_message()
        return self.frame()

    def end_message(self) -> dict:
        from .episodes import _collisions

        return {
            "schema": SESSION_SCHEMA,
            "type": "end",
            "tick": self.tick,
            "score": self.score,
            "collisions": _collisions(self.env),
            "visual_items": self.vis_items,
            "verbal_utterances": self.verb_items,
        }

    def trajectory_record(self) -> TrajectoryRecord:
        return TrajectoryRecord(
            steps=self.robot_steps,
            domain=self.domain,
            variant=self.variant,
            scenario=self.scenario,
            persona="live",
            seed=self.seed,
            extra={"view": "robot", "method": self.method},
        )


class SessionService:
    def __init__(self, checkpoint_path=None, implants_path=None, static_dir=None,
                 demo_dir="sessions"):
        self.params = WorldModelParams.load(checkpoint_path) if checkpoint_path else None
        self.implants = ImplantSet.load(implants_path) if implants_path else None
        self.static_dir = Path(static_dir) if static_dir else None
        self.demo_dir = Path(demo_dir)
        self.sessions_served = 0

    def assistant_for(self, method: str, domain: str, variant: str):
        from ..communication import PlanConfig

        if method != "nc" and self.params is None:
            raise ProtocolError(f"method {method!r} needs a loaded checkpoint")
        assets = {"params": self.params, "implants": self.implants}
        if method in ("mirror", "mirror_p", "mirror_kl") and self.implants is None:
            raise ProtocolError(f"method {method!r} needs loaded implants")
        if method == "im":
            raise ProtocolError("the oracle method cannot assist a live human")
        return build_assistant(method, domain, variant, assets, PlanConfig())

    def hello(self) -> dict:
        return {
            "schema": SESSION_SCHEMA,
            "type": "hello",
            "domains": ["driving", "rescue", "bomb"],
            "methods": list(LIVE_METHODS),
            "tick_ms": TICK_MS,
        }

    async def converse(self, recv, send) -> None:
        """Transport-agnostic protocol conversation.

        The client speaks first (the shared listener needs the first bytes
        to tell the raw protocol from HTTP); the server's first reply is
        always the capabilities hello.
        """
        first = await recv()
        if first is None:
            return
        await send(self.hello())
        session: Session | None = None
        pending = None if first.get("type") == "hello" else first
        while True:
            if pending is not None:
                msg, pending = pending, None
            else:
                msg = await recv()
            if msg is None:
                break
            try:
                if msg.get("schema", SESSION_SCHEMA) != SESSION_SCHEMA:
                    raise ProtocolError(f"unsupported schema {msg.get('schema')!r}")
                kind = msg.get("type")
                if kind == "start":
                    session = Session(self, msg)
                    self.sessions_served += 1
                    await send(session.frame())
                elif kind == "action":
                    if session is None:
                        raise ProtocolError("no active session")
                    reply = session.act(msg.get("action", -1))
                    await send(reply)
                    if reply["type"] == "end":
                        self._persist(session)
                elif kind == "download":
                    if session is None or not session.robot_steps:
                        raise ProtocolError("nothing to download")
                    await send({
                        "schema": SESSION_SCHEMA,
                        "type": "trajectory",
                        "text": _record_text(session.trajectory_record()),
                    })
                elif kind == "bye":
                    break
                else:
                    raise ProtocolError(f"unknown message type {kind!r}")
            except ProtocolError as err:
                await send({"schema": SESSION_SCHEMA, "type": "error", "message": str(err)})
        if session is not None and not session.done and session.robot_steps:
            self._persist(session, aborted=True)

    def _persist(self, session: Session, aborted: bool = False) -> None:
        if not session.robot_steps:
            return
        self.demo_dir.mkdir(parents=True, exist_ok=True)
        rec = session.trajectory_record()
        rec.extra["aborted"] = aborted
        name = f"{session.domain}_{session.method}_{session.seed}_{self.sessions_served}.jsonl"
        save_trajectories(self.demo_dir / name, [rec])

    # -- TCP transport (length-prefixed JSON) -------------------------------

    async def handle_tcp(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            head = await reader.readexactly(4)
        except (asyncio.IncompleteReadError, ConnectionError):
            writer.close()
            return
        if head in (b"GET ", b"POST", b"HEAD"):
            await self._handle_http(head, reader, writer)
            return
        buf = _Buffered(reader, head)  # the sniffed bytes start the first prefix

        async def recv():
            line = await buf.readline()
            if line is None:
                return None
            try:
                length = int(line.strip())
            except ValueError:
                return None
            payload = await buf.readexactly(length)
            if payload is None:
                return None
            return json.loads(payload.decode("utf-8"))

        async def send(obj):
            data = json.dumps(obj, sort_keys=True).encode("utf-8")
            writer.write(str(len(data)).encode("ascii") + b"\n" + data)
            await writer.drain()

        try:
            await self.converse(recv, send)
        finally:
            writer.close()

    # -- HTTP / WebSocket ----------------------------------------------------

    async def _handle_http(self, head: bytes, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter):
        line = head + await reader.readuntil(b"\r\n")
        request = line.decode("latin1").strip()
        headers = {}
        while True:
            raw = await reader.readuntil(b"\r\n")
            if raw == b"\r\n":
                break
            key, _, value = raw.decode("latin1").partition(":")
            headers[key.strip().lower()] = value.strip()
        _, path, _ = request.split(" ", 2)
        if headers.get("upgrade", "").lower() == "websocket":
            await self._handle_ws(headers, reader, writer)
            return
        self._serve_static(path, writer)
        await writer.drain()
        writer.close()

    def _serve_static(self, path: str, writer):
        if self.static_dir is None:
            writer.write(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n")
            return
        rel = path.lstrip("/") or "index.html"
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            writer.write(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n")
            return
        body = target.read_bytes()
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        header = (
            f"HTTP/1.1 200 OK\r\nContent-Type: {ctype}\r\n"
            f"Content-Length: {len(body)}\r\n\r\n"
        ).encode("ascii")
        writer.write(header + body)

    async def _handle_ws(self, headers: dict, reader, writer):
        key = headers.get("sec-websocket-key", "")
        accept = base64.b64encode(
            hashlib.sha1((key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11").encode()).digest()
        ).decode()
        writer.write(
            (
                "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\n"
                f"Connection: Upgrade\r\nSec-WebSocket-Accept: {accept}\r\n\r\n"
            ).encode("ascii")
        )
        await writer.drain()

        async def recv():
            while True:
                frame = await _read_ws_frame(reader)
                if frame is None:
                    return None
                opcode, payload = frame
                if opcode == 8:  # close
                    return None
                if opcode == 9:  # ping -> pong
                    writer.write(_ws_frame(10, payload))
                    await writer.drain()
                    continue
                if opcode in (1, 2):
                    return json.loads(payload.decode("utf-8"))

        async def send(obj):
            data = json.dumps(obj, sort_keys=True).encode("utf-8")
            writer.write(_ws_frame(1, data))
            await writer.drain()

        try:
            await self.converse(recv, send)
        finally:
            writer.close()


class _Buffered:
    """Byte buffer over a StreamReader that tolerates pre-read bytes."""

    def __init__(self, reader: asyncio.StreamReader, initial: bytes = b""):
        self.reader = reader
        self.buf = bytearray(initial)

    async def _fill(self) -> bool:
        chunk = await self.reader.read(4096)
        if not chunk:
            return False
        self.buf += chunk
        return True

    async def readline(self):
        while b"\n" not in self.buf:
            if not await self._fill():
                return None
        i = self.buf.index(b"\n")
        line = bytes(self.buf[:i])
        del self.buf[: i + 1]
        return line

    async def readexactly(self, n: int):
        while len(self.buf) < n:
            if not await self._fill():
                return None
        out = bytes(self.buf[:n])
        del self.buf[:n]
        return out


def _ws_frame(opcode: int, payload: bytes) -> bytes:
    header = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        header += bytes([n])
    elif n < 65536:
        header += bytes([126]) + n.to_bytes(2, "big")
    else:
        header += bytes([127]) + n.to_bytes(8, "big")
    return header + payload


async def _read_ws_frame(reader):
    try:
        first = await reader.readexactly(2)
    except (asyncio.IncompleteReadError, ConnectionError):
        return None
    opcode = first[0] & 0x0F
    masked = first[1] & 0x80
    length = first[1] & 0x7F
    if length == 126:
        length = int.from_bytes(await reader.readexactly(2), "big")
    elif length == 127:
        length = int.from_bytes(await reader.readexactly(8), "big")
    mask = await reader.readexactly(4) if masked else b"\x00\x00\x00\x00"
    payload = bytearray(await reader.readexactly(length))
    if masked:
        for i in range(length):
            payload[i] ^= mask[i % 4]
    return opcode, bytes(payload)


def _record_text(rec: TrajectoryRecord) -> str:
    buf = io.StringIO()
    dump_trajectories(buf, [rec])
    return buf.getvalue()


async def serve(host: str, port: int, service: SessionService):
    server = await asyncio.start_server(service.handle_tcp, host, port)
    return server
