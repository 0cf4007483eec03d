"""HTTP control gateway: run, observe, and intervene in experiments.

One FastAPI app serves both live runs and recorded replays through the
same endpoints; replay controllers simply reject mutations. The event
stream is server-sent JSON frames behind a bounded per-client queue that
drops oldest frames rather than ever stalling the simulation.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from .engine import Experiment, ExperimentSpec, ScenarioConfig
from .toolbox import Intervention, Survey, ToolboxError, score_cesd

STREAM_QUEUE_LIMIT = 256


class InterviewRequest(BaseModel):
    agent: str
    question: str
    timeout_s: float = 30.0


class SurveyRequest(BaseModel):
    survey: dict
    targets: list[str]
    dispatch_id: str | None = None
    timeout_s: float = 60.0


class InterventionRequest(BaseModel):
    variant: str
    round: int = 0
    targets: list[str] | None = None
    profile_patch: dict = {}
    status_patch: dict = {}
    message_text: str = ""
    message_meta: dict = {}


class ExperimentRequest(BaseModel):
    spec: dict


class _StreamClient:
    def __init__(self, filters: dict):
        self.frames: deque = deque(maxlen=STREAM_QUEUE_LIMIT)
        self.dropped = 0
        self.filters = filters
        self._lock = threading.Lock()

    def push(self, frame: dict) -> None:
        agent = self.filters.get("agent")
        if agent and frame.get("type") == "round":
            frame = dict(frame)
            frame["positions"] = [p for p in frame.get("positions", [])
                                  if p["agent"] == agent]
        elif agent and frame.get("agent") not in (None, agent):
            return
        types = self.filters.get("types")
        if types and frame.get("type") not in types:
            return
        with self._lock:
            if len(self.frames) == self.frames.maxlen:
                self.dropped += 1
            self.frames.append(frame)

    def pop_all(self) -> list[dict]:
        with self._lock:
            out = list(self.frames)
            self.frames.clear()
            if self.dropped:
                out.append({"type": "gap", "dropped": self.dropped})
                self.dropped = 0
        return out


class LiveController:
    """Drives one experiment on a background thread and brokers access to it."""

    def __init__(self, experiment: Experiment, autostart: bool = True):
        self.experiment = experiment
        experiment._background = True
        self.mode = "live"
        self._thread = None
        self._done = threading.Event()
        if autostart:
            self.start()

    def start(self) -> None:
        if self._thread is not None:
            return

        def drive():
            try:
                self.experiment.run()
            finally:
                self._done.set()

        self._thread = threading.Thread(target=drive, daemon=True)
        self._thread.start()

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    @property
    def finished(self) -> bool:
        return self._done.is_set()

    def summary(self) -> dict:
        exp = self.experiment
        return {"experiment_id": exp.spec.experiment_id, "name": exp.spec.name,
                "mode": self.mode, "round": exp.round_index,
                "round_count": exp.spec.round_count,
                "population": exp.spec.population_size,
                "status": "complete" if self.finished else "running"}

    def roster(self) -> list[str]:
        return list(self.experiment.agent_ids)

    def snapshot(self, agent_id: str, round_index: int | None = None) -> dict:
        exp = self.experiment
        if agent_id not in exp.agents:
            raise KeyError(agent_id)
        agent = exp.agents[agent_id]
        status = exp.latest_snapshots.get(agent_id) or agent.status_snapshot()
        events = [{"sim_time": n.sim_time, "location": n.location,
                   "description": n.description}
                  for n in agent.memory.events[-10:]]
        return {"agent": agent_id, "round": exp.round_index,
                "profile": agent.profile.to_dict(), "status": status,
                "events": events}

    def map_records(self) -> list[dict]:
        return self.experiment.urban.net.dump_records()

    def metrics(self, key: str, start: int = 0, stop: int | None = None) -> list[dict]:
        return [r for r in self.experiment.metric_rows
                if r["key"] == key and r["step"] >= start
                and (stop is None or r["step"] < stop)]

    def interview(self, agent: str, question: str, timeout_s: float) -> dict:
        t0 = time.perf_counter()
        slot = self.experiment.queue_interview(agent, question)
        if not slot["done"].wait(timeout_s):
            return {"agent": agent, "question": question, "answer": None,
                    "timed_out": True, "latency_ms": timeout_s * 1000}
        return {"agent": agent, "question": question, "answer": slot["answer"],
                "timed_out": False,
                "latency_ms": (time.perf_counter() - t0) * 1000}

    def dispatch_survey(self, survey: dict, targets: list[str],
                        dispatch_id: str | None, timeout_s: float) -> dict:
        model = Survey(survey_id=survey.get("survey_id", ""),
                       questions=survey.get("questions", []))
        model.validate()
        slot = self.experiment.queue_survey(model.to_dict(), targets)
        finished = slot["done"].wait(timeout_s)
        responses = dict(slot["responses"]) if finished else {}
        rows = []
        for target in targets:
            answers = responses.get(target)
            row = {"agent": target, "answers": answers,
                   "missing": answers is None}
            if answers is not None and _is_cesd(model):
                try:
                    row["cesd_score"] = score_cesd(answers)
                except ToolboxError:
                    pass
            rows.append(row)
        return {"dispatch_id": dispatch_id or model.survey_id,
                "survey_id": model.survey_id, "responses": rows}

    def intervene(self, req: InterventionRequest) -> dict:
        intervention = Intervention(
            variant=req.variant, round=req.round, targets=req.targets,
            profile_patch=req.profile_patch, status_patch=req.status_patch,
            message_text=req.message_text, message_meta=req.message_meta)
        self.experiment.queue_intervention(intervention)
        count = len(req.targets) if req.targets is not None \
            else self.experiment.spec.population_size
        self.experiment.recorder.write("interventions.jsonl", {
            "round": self.experiment.round_index, "variant": req.variant,
            "targets": req.targets, "text": req.message_text})
        return {"queued": True, "affected": count}

    def add_stream_client(self, filters: dict) -> _StreamClient:
        client = _StreamClient(filters)
        self.experiment.add_stream_listener(client.push)
        return client


def _is_cesd(survey: Survey) -> bool:
    return (len(survey.questions) == 20
            and all(q.get("cesd_item") for q in survey.questions))


class ReplayController:
    """Serves a recorded run read-only through the same surface."""

    def __init__(self, results_dir: str | Path):
        self.dir = Path(results_dir)
        self.mode = "replay"
        self.warnings: list[str] = []
        self.meta = self._load_json("meta.json") or {}
        self.profiles = {r["agent"]: r for r in self._load_rows("profiles.jsonl")}
        self.status: dict[tuple[int, str], dict] = {}
        for row in self._load_rows("status.jsonl"):
            self.status[(row["round"], row["agent"])] = row
        self.events: dict[str, list[dict]] = {}
        for row in self._load_rows("events.jsonl"):
            self.events.setdefault(row["agent"], []).append(row)
        self.rounds = self._load_rows("rounds.jsonl")
        self.metric_rows = self._load_rows("metrics.jsonl")
        self.max_round = max((r["round"] for r in self.status.values()), default=-1) \
            if self.status else max((r["round_index"] for r in self.rounds), default=-1)

    def _load_json(self, name: str):
        path = self.dir / name
        if not path.exists():
            self.warnings.append(f"missing {name}")
            return None
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            self.warnings.append(f"corrupt {name}: {exc}")
            return None

    def _load_rows(self, name: str) -> list[dict]:
        path = self.dir / name
        if not path.exists():
            return []
        rows = []
        for i, line in enumerate(path.read_text().splitlines()):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                self.warnings.append(f"{name}:{i + 1} unreadable; skipped")
        return rows

    @property
    def finished(self) -> bool:
        return True

    def summary(self) -> dict:
        spec = self.meta.get("spec", {})
        return {"experiment_id": spec.get("experiment_id", self.dir.name),
                "name": spec.get("name", ""), "mode": self.mode,
                "round": self.max_round + 1,
                "round_count": spec.get("round_count"),
                "population": spec.get("population_size"),
                "status": "replay", "warnings": self.warnings}

    def roster(self) -> list[str]:
        return sorted(self.profiles)

    def snapshot(self, agent_id: str, round_index: int | None = None) -> dict:
        if agent_id not in self.profiles:
            raise KeyError(agent_id)
        rnd = self.max_round if round_index is None else round_index
        status = self.status.get((rnd, agent_id))
        if status is None:
            raise KeyError(f"round {rnd}")
        events = [e for e in self.events.get(agent_id, []) if e["round"] <= rnd][-10:]
        profile = {k: v for k, v in self.profiles[agent_id].items() if k != "agent"}
        return {"agent": agent_id, "round": rnd, "profile": profile,
                "status": {k: v for k, v in status.items()
                           if k not in ("round", "agent")},
                "events": [{"sim_time": e["sim_time"], "location": e["location"],
                            "description": e["description"]} for e in events]}

    def map_records(self) -> list[dict]:
        return []

    def metrics(self, key: str, start: int = 0, stop: int | None = None) -> list[dict]:
        return [r for r in self.metric_rows
                if r["key"] == key and r["step"] >= start
                and (stop is None or r["step"] < stop)]


def create_app(controllers: dict[str, LiveController | ReplayController] | None = None,
               allow_create: bool = True) -> FastAPI:
    app = FastAPI(title="socsim gateway", version="0.1.0")
    registry: dict[str, LiveController | ReplayController] = dict(controllers or {})
    app.state.registry = registry

    def controller_of(exp_id: str):
        ctl = registry.get(exp_id)
        if ctl is None:
            raise HTTPException(status_code=404, detail=f"no experiment {exp_id}")
        return ctl

    def live_of(exp_id: str) -> LiveController:
        ctl = controller_of(exp_id)
        if ctl.mode != "live":
            raise HTTPException(status_code=409, detail="replay is read-only")
        if ctl.finished:
            raise HTTPException(status_code=409, detail="run already complete")
        return ctl

    @app.get("/experiments")
    def list_experiments():
        return [ctl.summary() for ctl in registry.values()]

    @app.post("/experiments", status_code=201)
    def create_experiment(req: ExperimentRequest):
        if not allow_create:
            raise HTTPException(status_code=409, detail="creation disabled")
        try:
            spec = ExperimentSpec.from_dict(req.spec)
        except Exception as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        if spec.experiment_id in registry:
            raise HTTPException(status_code=409,
                                detail=f"experiment {spec.experiment_id} exists")
        if spec.scenario.name != "freeform":
            from .scenarios import build_scenario_config
            config = build_scenario_config(spec.scenario.name, spec.scenario.params)
        else:
            config = ScenarioConfig()
        ctl = LiveController(Experiment(spec, config))
        registry[spec.experiment_id] = ctl
        return ctl.summary()

    @app.get("/experiments/{exp_id}")
    def get_experiment(exp_id: str):
        return controller_of(exp_id).summary()

    @app.get("/experiments/{exp_id}/agents")
    def agents(exp_id: str):
        return controller_of(exp_id).roster()

    @app.get("/experiments/{exp_id}/map")
    def map_records(exp_id: str):
        return controller_of(exp_id).map_records()

    @app.get("/experiments/{exp_id}/metrics")
    def metrics(exp_id: str, key: str, start: int = 0, stop: int | None = None):
        return controller_of(exp_id).metrics(key, start, stop)

    @app.get("/experiments/{exp_id}/agents/{agent_id}/snapshot")
    def snapshot(exp_id: str, agent_id: str, round: int | None = None):
        try:
            return controller_of(exp_id).snapshot(agent_id, round)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/experiments/{exp_id}/interview")
    def interview(exp_id: str, req: InterviewRequest):
        ctl = live_of(exp_id)
        if req.agent not in ctl.roster():
            raise HTTPException(status_code=404, detail=f"no agent {req.agent}")
        if not req.question.strip():
            raise HTTPException(status_code=422, detail="empty question")
        return ctl.interview(req.agent, req.question, req.timeout_s)

    @app.post("/experiments/{exp_id}/surveys")
    def surveys(exp_id: str, req: SurveyRequest):
        ctl = live_of(exp_id)
        missing = [t for t in req.targets if t not in ctl.roster()]
        if missing or not req.targets:
            raise HTTPException(status_code=404, detail=f"unknown targets {missing}")
        try:
            return ctl.dispatch_survey(req.survey, req.targets, req.dispatch_id,
                                       req.timeout_s)
        except ToolboxError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/experiments/{exp_id}/interventions")
    def interventions(exp_id: str, req: InterventionRequest):
        ctl = live_of(exp_id)
        try:
            return ctl.intervene(req)
        except ToolboxError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/experiments/{exp_id}/stream")
    def stream(exp_id: str, request: Request, agent: str | None = None,
               types: str | None = None):
        ctl = controller_of(exp_id)
        if ctl.mode != "live":
            raise HTTPException(status_code=409, detail="replay has no live stream")
        filters: dict = {}
        if agent:
            filters["agent"] = agent
        if types:
            filters["types"] = set(types.split(","))
        client = ctl.add_stream_client(filters)

        def frames():
            while True:
                batch = client.pop_all()
                for frame in batch:
                    yield f"data: {json.dumps(frame, separators=(',', ':'))}\n\n"
                if ctl.finished and not batch:
                    yield "event: end\ndata: {}\n\n"
                    return
                time.sleep(0.05)

        return StreamingResponse(frames(), media_type="text/event-stream")

    return app
