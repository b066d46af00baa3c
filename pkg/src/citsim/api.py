"""HTTP and event-stream front end for a running engine.

All mutating requests funnel into the engine's command queue and return
only after the command has been applied, so concurrent clients observe
one consistent order. A background pacer advances the simulation; pace
endpoints pause, resume, single-step, or retime it. The event socket
replays history from any sequence number before going live.
"""

from __future__ import annotations

import asyncio
import threading
import time
from contextlib import asynccontextmanager

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .engine import Engine
from .network import serialize_network
from .scenario import list_runs


class Pacer:
    """Advances the engine on a wall-clock schedule until paused."""

    def __init__(self, engine: Engine, rate: float = 10.0, paused: bool = True):
        self.engine = engine
        self.rate = rate
        self.paused = paused
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None

    def _run(self) -> None:
        while not self._stop.is_set():
            if self.paused or self.rate <= 0:
                time.sleep(0.02)
                continue
            started = time.monotonic()
            self.engine.advance(1)
            budget = 1.0 / self.rate
            remaining = budget - (time.monotonic() - started)
            if remaining > 0:
                self._stop.wait(remaining)


class ComposeRequest(BaseModel):
    problem: str
    level: str
    override: bool = False
    dry_run: bool = False
    request_id: str | None = None


class StrategyActionRequest(BaseModel):
    request_id: str | None = None


class ForceRequest(BaseModel):
    element: str
    level: str | None = None
    request_id: str | None = None


class DecisionRequest(BaseModel):
    choose: str
    request_id: str | None = None


class StepRequest(BaseModel):
    ticks: int = Field(default=1, ge=1, le=100_000)


class RateRequest(BaseModel):
    ticks_per_second: float = Field(gt=0, le=10_000)


def _command_response(result: dict, created: bool = False) -> JSONResponse:
    if result.get("ok"):
        return JSONResponse(result, status_code=201 if created else 200)
    message = result.get("error", "command failed")
    status = 404 if message.startswith(("unknown", "no scenario")) else 409
    return JSONResponse(result, status_code=status)


def create_app(engine: Engine, runs_store=None, pacer: Pacer | None = None) -> FastAPI:
    pacer = pacer or Pacer(engine)

    @asynccontextmanager
    async def _lifespan(_: FastAPI):
        pacer.start()
        yield
        pacer.stop()

    app = FastAPI(title="traffic control engine", lifespan=_lifespan)
    app.state.engine = engine
    app.state.pacer = pacer

    # -- reads --------------------------------------------------------------

    @app.get("/network")
    def get_network() -> dict:
        document = serialize_network(engine.network)
        document["route_parts"] = [
            {
                "id": rp.id,
                "from_choice": rp.from_choice,
                "to_choice": rp.to_choice,
                "member_links": list(rp.member_links),
                "alternatives": list(rp.alternatives),
            }
            for rp in sorted(engine.network.route_parts.values(), key=lambda r: r.id)
        ]
        return document

    @app.get("/state")
    def get_state() -> dict:
        with engine._lock:
            return engine.snapshot()

    @app.get("/services")
    def get_services() -> dict:
        with engine._lock:
            status = engine.bus.service_status(engine.state.tick)
        services = []
        for sid in sorted(engine.catalog.services):
            d = engine.catalog.services[sid]
            services.append(
                {
                    "id": d.id,
                    "name": d.name,
                    "category": d.category,
                    "contributions": sorted(c.wire_name for c in d.contributions),
                    "applicable_elements": sorted(k.value for k in d.applicable_elements),
                    "bundled_for": sorted(u.value for u in d.bundled_for),
                    "deployment_scale": d.deployment_scale.value,
                    "control_mode": d.control_mode.value,
                    "tm_suitable": d.tm_suitable,
                    "indirect": d.indirect,
                    "in_area": d.in_area,
                    "status": status.get(sid, "inactive"),
                }
            )
        return {"services": services}

    @app.get("/strategies")
    def get_strategies() -> dict:
        with engine._lock:
            out = []
            for sid in sorted(engine.strategies):
                payload = engine._strategy_payload(engine.strategies[sid])
                info = engine._situation.get(sid)
                if info is not None:
                    payload["situation"] = {
                        "streak": info["streak"], "met": info["met"]
                    }
                out.append(payload)
        return {"strategies": out}

    @app.get("/kpis")
    def get_kpis() -> dict:
        with engine._lock:
            return engine.kpis()

    @app.get("/runs")
    def get_runs() -> dict:
        if runs_store is None:
            return {"runs": []}
        return {"runs": [r.to_dict() for r in list_runs(runs_store)]}

    # -- strategy lifecycle -------------------------------------------------

    @app.post("/strategies")
    def post_strategy(body: ComposeRequest) -> JSONResponse:
        result = engine.execute(
            {
                "command": "compose",
                "problem": body.problem,
                "level": body.level,
                "override": body.override,
                "dry_run": body.dry_run,
                "request_id": body.request_id,
            }
        )
        return _command_response(result, created=not body.dry_run)

    def _lifecycle(action: str, strategy_id: str, body: StrategyActionRequest):
        result = engine.execute(
            {
                "command": action,
                "strategy": strategy_id,
                "request_id": body.request_id,
            }
        )
        return _command_response(result)

    @app.post("/strategies/{strategy_id}/activate")
    def post_activate(strategy_id: str, body: StrategyActionRequest = StrategyActionRequest()):
        return _lifecycle("activate", strategy_id, body)

    @app.post("/strategies/{strategy_id}/escalate")
    def post_escalate(strategy_id: str, body: StrategyActionRequest = StrategyActionRequest()):
        return _lifecycle("escalate", strategy_id, body)

    @app.post("/strategies/{strategy_id}/deescalate")
    def post_deescalate(strategy_id: str, body: StrategyActionRequest = StrategyActionRequest()):
        return _lifecycle("deescalate", strategy_id, body)

    @app.post("/strategies/{strategy_id}/retire")
    def post_retire(strategy_id: str, body: StrategyActionRequest = StrategyActionRequest()):
        return _lifecycle("retire", strategy_id, body)

    @app.post("/services/{service_id}/force_on")
    def post_force_on(service_id: str, body: ForceRequest):
        result = engine.execute(
            {
                "command": "force_on",
                "service": service_id,
                "element": body.element,
                "level": body.level,
                "request_id": body.request_id,
            }
        )
        return _command_response(result)

    @app.post("/services/{service_id}/force_off")
    def post_force_off(service_id: str, body: ForceRequest):
        result = engine.execute(
            {
                "command": "force_off",
                "service": service_id,
                "element": body.element,
                "request_id": body.request_id,
            }
        )
        return _command_response(result)

    @app.post("/decisions/{decision_id}")
    def post_decision(decision_id: str, body: DecisionRequest):
        result = engine.execute(
            {
                "command": "decide",
                "decision": decision_id,
                "choose": body.choose,
                "request_id": body.request_id,
            }
        )
        return _command_response(result)

    # -- pace control -------------------------------------------------------

    @app.post("/sim/pause")
    def post_pause() -> dict:
        pacer.paused = True
        return {"ok": True, "paused": True, "tick": engine.state.tick}

    @app.post("/sim/resume")
    def post_resume() -> dict:
        pacer.paused = False
        return {"ok": True, "paused": False, "tick": engine.state.tick}

    @app.post("/sim/step")
    def post_step(body: StepRequest) -> JSONResponse:
        if not pacer.paused:
            return JSONResponse(
                {"ok": False, "error": "pause the simulation before stepping"},
                status_code=409,
            )
        engine.advance(body.ticks)
        return JSONResponse({"ok": True, "tick": engine.state.tick})

    @app.post("/sim/rate")
    def post_rate(body: RateRequest) -> dict:
        pacer.rate = body.ticks_per_second
        return {"ok": True, "ticks_per_second": pacer.rate}

    # -- event stream -------------------------------------------------------

    @app.websocket("/events")
    async def events(socket: WebSocket) -> None:
        await socket.accept()
        try:
            after_seq = int(socket.query_params.get("after_seq", -1))
        except ValueError:
            after_seq = -1
        last = after_seq
        try:
            while True:
                batch = engine.events_since(last)
                for event in batch:
                    await socket.send_json(event.to_dict())
                    last = event.seq
                await asyncio.sleep(0.03)
        except WebSocketDisconnect:
            return

    return app


def serve(
    engine: Engine,
    host: str = "127.0.0.1",
    port: int = 8000,
    runs_store=None,
    rate: float = 10.0,
    paused: bool = False,
) -> None:
    """Run the API until interrupted; drains cleanly on shutdown."""
    import uvicorn

    pacer = Pacer(engine, rate=rate, paused=paused)
    app = create_app(engine, runs_store=runs_store, pacer=pacer)
    uvicorn.run(app, host=host, port=port, log_level="warning")
