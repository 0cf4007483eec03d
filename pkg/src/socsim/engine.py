"""Experiment lifecycle: clock, round barrier, agent groups, persistence.

Rounds are discrete. Within a round every agent runs exactly one workflow
iteration against a frozen snapshot of the world; every cross-agent effect
(messages, travel plans, purchases, tie-strength changes) is queued and
flushed at the round barrier in a globally sorted order. That makes
scripted runs bit-reproducible from (spec, seed) and, crucially, makes the
per-agent event logs invariant under the number of agent groups.
"""

from __future__ import annotations

import json
import time
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import messages
from .bus import Envelope, InProcessBus, agent_prefix_pattern, topic_for
from .econ import EconLedger, GOVERNMENT
from .mind.agent import AgentServices, SimAgent
from .mind.driver import ContactView, ScriptedDriver, ScriptedRules
from .mind.state import Profile
from .social import SocialSpace, Supervisor
from .urban.network import generate_grid_city
from .urban.world import UrbanSpace
from .util import derive_rng, stable_hash64

DEFAULT_ROUND_DURATION = 1800.0  # simulated seconds per round (half-hourly cadence)

OCCUPATIONS = ("teacher", "engineer", "nurse", "police officer", "accountant",
               "cook", "designer", "driver", "clerk", "doctor", "sales agent",
               "researcher")


class SpecError(ValueError):
    pass


@dataclass
class ScenarioRef:
    name: str = "freeform"
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    experiment_id: str
    name: str = ""
    seed: int = 0
    population_size: int = 10
    group_count: int = 1
    round_count: int = 10
    round_duration: float = DEFAULT_ROUND_DURATION
    scenario: ScenarioRef = field(default_factory=ScenarioRef)
    mind_backend: str = "scripted"
    output_dir: str | None = None

    def validate(self) -> None:
        if not self.experiment_id or "/" in self.experiment_id:
            raise SpecError("experiment_id must be non-empty and slash-free")
        if self.population_size < 1:
            raise SpecError("population_size must be >= 1")
        if self.group_count < 1:
            raise SpecError("group_count must be >= 1")
        if self.round_count < 0:
            raise SpecError("round_count must be >= 0")
        if self.round_duration <= 0:
            raise SpecError("round_duration must be positive")
        if self.mind_backend not in ("scripted", "remote"):
            raise SpecError(f"unknown mind_backend {self.mind_backend!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise SpecError("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id, "name": self.name, "seed": self.seed,
            "population_size": self.population_size, "group_count": self.group_count,
            "round_count": self.round_count, "round_duration": self.round_duration,
            "scenario": {"name": self.scenario.name, "params": self.scenario.params},
            "mind_backend": self.mind_backend, "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        scenario = data.pop("scenario", None) or {}
        if isinstance(scenario, str):
            scenario = {"name": scenario}
        spec = cls(scenario=ScenarioRef(name=scenario.get("name", "freeform"),
                                        params=scenario.get("params", {})),
                   **{k: v for k, v in data.items() if k in cls.__dataclass_fields__})
        spec.validate()
        return spec


@dataclass
class AgentGroup:
    group_id: int
    member_ids: list[str] = field(default_factory=list)
    services: AgentServices | None = None


def partition_groups(agent_ids: list[str], group_count: int) -> list[AgentGroup]:
    """Round-robin partition over the input order; remainder fills the
    lowest-index groups, so sizes differ by at most one."""
    if group_count < 1:
        raise SpecError("group_count must be >= 1")
    groups = [AgentGroup(group_id=i) for i in range(group_count)]
    for j, agent_id in enumerate(agent_ids):
        groups[j % group_count].member_ids.append(agent_id)
    return groups


@dataclass
class RoundReport:
    round_index: int
    wall_time_ms: float = 0.0
    phase_ms: dict = field(default_factory=lambda: {"env": 0.0, "act": 0.0, "flush": 0.0})
    error_count: int = 0
    counters: dict = field(default_factory=lambda: {
        "urban_get": 0, "urban_set": 0, "econ_get": 0, "econ_set": 0, "social_send": 0})

    def to_dict(self) -> dict:
        return {"round_index": self.round_index, "wall_time_ms": self.wall_time_ms,
                "phase_ms": dict(self.phase_ms), "error_count": self.error_count,
                "counters": dict(self.counters)}


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rounds_run: int
    duration_s: float
    error_count: int
    output_dir: str | None
    reports: list[RoundReport]


# -- scenario configuration ----------------------------------------------------


@dataclass
class EconSetup:
    enabled: bool = False
    firm_count: int = 5
    price_cents: int = 1000
    wage_cents_per_hour: int = 2000
    firm_cash_cents: int = 500_000_000
    agent_cash_cents: int = 100_000
    month_rounds: int = 4          # rounds per economic step
    interest_every_steps: int = 12
    h_max_month: float = 168.0
    auto_consume: bool = False     # settle every agent's purchases each econ step
    adjust_prices: bool = True
    ubi_start_step: int | None = None
    ubi_amount_cents: int = 100_000


@dataclass
class ScenarioConfig:
    """Everything run_experiment needs beyond the spec itself."""

    name: str = "freeform"
    net_kwargs: dict = field(default_factory=lambda: {"nx": 3, "ny": 3, "block": 300.0})
    env_dt: float = 1.0
    taxi_count: int = 0
    rules: ScriptedRules = field(default_factory=ScriptedRules)
    econ: EconSetup = field(default_factory=EconSetup)
    supervisor_policy: str = "none"
    ban_threshold: int = 3
    classifier: object = None
    delivery_filter: object = None      # callable(recipient_agent, body) -> bool
    weather_timeline: dict = field(default_factory=dict)   # round -> weather name
    weather_radius: dict = field(default_factory=dict)
    interventions: list = field(default_factory=list)
    edge_maker: object = None           # callable(agent_ids, rng) -> edge records
    attitude_maker: object = None       # callable(index, rng) -> dict
    profile_maker: object = None        # callable(index, rng) -> Profile
    driver_maker: object = None         # callable(agent_id) -> driver
    emit_proximity: bool = False
    metric_hooks: list = field(default_factory=list)  # callable(experiment, round)


def default_profile(index: int, rng) -> Profile:
    return Profile(
        name=f"Resident {index}", age=20 + (index * 7) % 60,
        gender=("female", "male", "nonbinary")[index % 3],
        education=("high school", "college", "graduate")[index % 3],
        personality=("outgoing", "reserved", "analytical", "easygoing")[index % 4],
        occupation=OCCUPATIONS[index % len(OCCUPATIONS)],
        home_aoi=0, income_bracket=("low", "middle", "high")[index % 3])


def default_edges(agent_ids: list[str], rng) -> list[tuple[str, str, str, int]]:
    """Small-world-ish default: ring plus a few shuffled chords."""
    n = len(agent_ids)
    records = []
    for i, a in enumerate(agent_ids):
        b = agent_ids[(i + 1) % n]
        if a != b:
            records.append((a, b, "friend", 40 + (i * 13) % 40))
        if n > 4:
            c = agent_ids[(i + 2 + rng.randrange(max(1, n // 4))) % n]
            if c not in (a, b):
                records.append((a, c, "colleague", 30 + (i * 7) % 30))
    return records


# -- the services facade handed to agents ----------------------------------------


class EngineServices(AgentServices):
    def __init__(self, experiment: "Experiment"):
        self.exp = experiment
        self.counts = {"urban_get": 0, "urban_set": 0, "econ_get": 0,
                       "econ_set": 0, "social_send": 0}

    def position_of(self, agent_id: str):
        self.counts["urban_get"] += 1
        return self.exp.urban.get_agent_position(agent_id)

    def poi_xy(self, poi_id: int):
        poi = self.exp.urban.net.pois[poi_id]
        return self.exp.urban.net.lane_xy(poi.lane_id, poi.offset)

    def home_xy(self, agent_id: str):
        lane, off = self.exp.urban.home_of(agent_id)
        return self.exp.urban.net.lane_xy(lane, off)

    def home_poi(self, agent_id: str) -> int:
        return self.exp.home_pois[agent_id]

    def weather(self) -> str:
        return self.exp.urban.weather

    def choose_destination(self, agent_id: str, category: str, radius_m: float, rng):
        self.counts["urban_get"] += 1
        return self.exp.urban.choose_destination(agent_id, category, radius_m, rng)

    def queue_plan(self, agent_id: str, poi_id: int, mode: str):
        self.counts["urban_set"] += 1
        self.exp.queue_plan(agent_id, poi_id, mode)

    def cash(self, agent_id: str) -> int:
        self.counts["econ_get"] += 1
        return self.exp.ledger.accounts.get(agent_id, 0) if self.exp.ledger else 0

    def month_income(self, agent_id: str) -> int:
        self.counts["econ_get"] += 1
        return self.exp.month_income.get(agent_id, 0)

    def queue_consume(self, agent_id: str, propensity: float):
        self.counts["econ_set"] += 1
        self.exp.queue_consume(agent_id, propensity)

    def contacts(self, agent_id: str) -> list[ContactView]:
        views = []
        for edge in self.exp.social.edges_of(agent_id):
            occupation = ""
            peer = self.exp.agents.get(edge.peer_id)
            if peer is not None:
                occupation = peer.profile.occupation
            views.append(ContactView(peer_id=edge.peer_id, kind=edge.kind,
                                     strength=edge.strength, occupation=occupation))
        return views

    def queue_message(self, sender: str, recipient: str, body: dict):
        self.counts["social_send"] += 1
        self.exp.queue_message(sender, recipient, body)

    def queue_strength(self, agent_id: str, peer_id: str, delta: int):
        self.exp.queue_strength(agent_id, peer_id, delta)

    def is_banned(self, agent_id: str) -> bool:
        return agent_id in self.exp.social.supervisor.banned

    def aoi_name(self, agent_id: str) -> str:
        try:
            position = self.exp.urban.get_agent_position(agent_id)
        except KeyError:
            return "unknown"
        lane = self.exp.urban.net.lanes.get(position.lane)
        if lane is None:
            return "unknown"
        poi = min(self.exp.urban.net.pois.values(), default=None,
                  key=lambda p: abs(p.offset - position.offset)
                  if p.lane_id == position.lane else 1e18)
        if poi is not None and poi.lane_id == position.lane and \
                abs(poi.offset - position.offset) < 5.0:
            return f"aoi-{poi.aoi_id}"
        return f"lane-{position.lane}"

    def log_error(self, agent_id: str, message: str):
        self.exp.error_log.append({"agent": agent_id, "round": self.exp.round_index,
                                   "message": message})


# -- persistence -------------------------------------------------------------------


class RunRecorder:
    """Append-only record log under the experiment output directory."""

    def __init__(self, output_dir: str | Path | None):
        self.dir = Path(output_dir) if output_dir else None
        self._files = {}
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def _fh(self, name: str):
        if self.dir is None:
            return None
        if name not in self._files:
            self._files[name] = open(self.dir / name, "a", encoding="utf-8")
        return self._files[name]

    def write(self, name: str, record: dict) -> None:
        fh = self._fh(name)
        if fh is not None:
            fh.write(json.dumps(record, separators=(",", ":"), sort_keys=True) + "\n")

    def write_meta(self, meta: dict) -> None:
        if self.dir is not None:
            (self.dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    def flush(self) -> None:
        for fh in self._files.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files.clear()


# -- the experiment ------------------------------------------------------------------


class Experiment:
    def __init__(self, spec: ExperimentSpec, config: ScenarioConfig | None = None):
        spec.validate()
        self.spec = spec
        self.config = config or ScenarioConfig()
        self.round_index = 0
        self.sim_time = 0.0
        self.error_log: list[dict] = []
        self.recorder = RunRecorder(spec.output_dir)
        self._control_lock = threading.Lock()
        self._pending_interviews: list = []
        self._pending_surveys: list = []
        self._pending_interventions: list = list(self.config.interventions)
        self._stream_listeners: list = []
        self.latest_snapshots: dict[str, dict] = {}
        self.metric_rows: list[dict] = []
        self._build()

    # -- construction ---------------------------------------------------------------

    def _build(self) -> None:
        spec, config = self.spec, self.config
        self.bus = InProcessBus()
        net = generate_grid_city(seed=spec.seed & 0xFFFF, **config.net_kwargs)
        self.urban = UrbanSpace(network=net, taxi_count=config.taxi_count,
                                weather_radius=config.weather_radius or None)
        self.ledger = None
        self.month_income: dict[str, int] = {}
        self.employer: dict[str, str] = {}
        if config.econ.enabled:
            self.ledger = EconLedger()
            for k in range(config.econ.firm_count):
                self.ledger.add_firm(f"firm-{k}", config.econ.price_cents,
                                     config.econ.wage_cents_per_hour,
                                     config.econ.firm_cash_cents)
        supervisor = Supervisor(classifier=config.classifier,
                                policy=config.supervisor_policy,
                                ban_threshold=config.ban_threshold)
        self.social = SocialSpace(self.bus, spec.experiment_id, supervisor)

        agent_ids = [f"a{k}" for k in range(spec.population_size)]
        self.agent_ids = agent_ids
        self.groups = partition_groups(agent_ids, spec.group_count)
        services = EngineServices(self)
        for group in self.groups:
            group.services = services
        self.services = services

        rng = derive_rng(spec.seed, "setup")
        profile_maker = config.profile_maker or default_profile
        self.agents: dict[str, SimAgent] = {}
        self.home_pois: dict[str, int] = {}
        self.subs = {}
        homes = [p for p in net.pois.values() if p.category == "home"] \
            or list(net.pois.values())
        for index, agent_id in enumerate(agent_ids):
            profile = profile_maker(index, rng)
            home = homes[stable_hash64(spec.seed, "home", agent_id) % len(homes)]
            self.home_pois[agent_id] = home.id
            self.urban.register_agent(agent_id, home.id)
            if config.driver_maker is not None:
                driver = config.driver_maker(agent_id)
            else:
                driver = ScriptedDriver(config.rules)
            attitudes = (config.attitude_maker(index, rng)
                         if config.attitude_maker else {})
            agent = SimAgent(agent_id, profile, driver, services,
                             seed=spec.seed, attitudes=attitudes)
            self.agents[agent_id] = agent
            self.subs[agent_id] = self.bus.subscribe(
                agent_prefix_pattern(spec.experiment_id, agent_id), consumer_id=agent_id)
            if self.ledger is not None:
                self.ledger.open_account(agent_id, config.econ.agent_cash_cents)
                self.employer[agent_id] = f"firm-{index % config.econ.firm_count}"
                self.month_income[agent_id] = 0

        edge_maker = config.edge_maker or default_edges
        self.social.load_edge_records(edge_maker(agent_ids, derive_rng(spec.seed, "edges")))
        self.social.occupations = {a: self.agents[a].profile.occupation for a in agent_ids}

        self._msg_queue: list[tuple[str, str, dict]] = []
        self._plan_queue: list[tuple[str, int, str]] = []
        self._consume_queue: list[tuple[str, float]] = []
        self._strength_queue: list[tuple[str, str, int]] = []
        self._events_written: dict[str, int] = {a: 0 for a in agent_ids}
        self.message_log: list[dict] = []

        self.recorder.write_meta({"spec": self.spec.to_dict(), "status": "running",
                                  "scenario": config.name})
        for agent_id in agent_ids:
            self.recorder.write("profiles.jsonl", {
                "agent": agent_id, **self.agents[agent_id].profile.to_dict()})

    # -- queues (called from agents and the gateway) -----------------------------------

    def queue_message(self, sender: str, recipient: str, body: dict) -> None:
        self._msg_queue.append((sender, recipient, body))

    def queue_plan(self, agent_id: str, poi_id: int, mode: str) -> None:
        self._plan_queue.append((agent_id, poi_id, mode))

    def queue_consume(self, agent_id: str, propensity: float) -> None:
        self._consume_queue.append((agent_id, propensity))

    def queue_strength(self, agent_id: str, peer_id: str, delta: int) -> None:
        self._strength_queue.append((agent_id, peer_id, delta))

    # -- control plane (gateway) ---------------------------------------------------------

    def queue_interview(self, agent_id: str, question: str):
        if agent_id not in self.agents:
            raise KeyError(agent_id)
        if not question.strip():
            raise ValueError("empty question")
        slot = {"agent": agent_id, "question": question, "answer": None,
                "done": threading.Event(), "latency_rounds": None}
        with self._control_lock:
            self._pending_interviews.append(slot)
        return slot

    def queue_survey(self, survey: dict, targets: list[str]):
        if not targets:
            raise ValueError("survey needs at least one target")
        slot = {"survey": survey, "targets": list(targets), "responses": {},
                "done": threading.Event()}
        with self._control_lock:
            self._pending_surveys.append(slot)
        return slot

    def queue_intervention(self, intervention) -> None:
        with self._control_lock:
            self._pending_interventions.append(intervention)

    def add_stream_listener(self, listener) -> None:
        with self._control_lock:
            self._stream_listeners.append(listener)

    def _emit(self, frame: dict) -> None:
        with self._control_lock:
            listeners = list(self._stream_listeners)
        for listener in listeners:
            listener(frame)

    def record_metric(self, key: str, value: float, step: int | None = None) -> None:
        row = {"experiment": self.spec.experiment_id, "key": key,
               "step": self.round_index if step is None else step, "value": value}
        self.metric_rows.append(row)
        self.recorder.write("metrics.jsonl", row)
        self._emit({"type": "metric", **row})

    # -- the round ------------------------------------------------------------------------

    def run_round(self) -> RoundReport:
        report = RoundReport(round_index=self.round_index)
        t_round = time.perf_counter()
        base_counts = dict(self.services.counts)
        errors_before = len(self.error_log)

        self._apply_due_interventions()
        if self.round_index in self.config.weather_timeline:
            self.urban.weather = self.config.weather_timeline[self.round_index]

        # Phase 1: environment tick covers the round's simulated duration.
        t0 = time.perf_counter()
        self._flush_plans()
        dt = self.config.env_dt
        steps = max(1, int(round(self.spec.round_duration / dt)))
        for _ in range(steps):
            self.urban.tick(dt)
        if self.config.emit_proximity:
            self._emit_proximity()
        report.phase_ms["env"] = (time.perf_counter() - t0) * 1000

        # Phase 2: every agent runs one workflow iteration.
        t0 = time.perf_counter()
        round_start = self.sim_time
        if self.spec.mind_backend == "remote" and self.spec.group_count > 1:
            with ThreadPoolExecutor(max_workers=self.spec.group_count) as pool:
                list(pool.map(lambda g: self._run_group(g, round_start), self.groups))
        else:
            for group in self.groups:
                self._run_group(group, round_start)
        report.phase_ms["act"] = (time.perf_counter() - t0) * 1000

        # Phase 3: barrier flush in globally sorted order.
        t0 = time.perf_counter()
        self._flush_messages()
        self._flush_strengths()
        self._econ_step_if_due()
        self._answer_control_queue()
        self._persist_round(report)
        report.phase_ms["flush"] = (time.perf_counter() - t0) * 1000

        self.sim_time += self.spec.round_duration
        self.round_index += 1
        for hook in self.config.metric_hooks:
            hook(self, report)
        for key in report.counters:
            report.counters[key] = self.services.counts[key] - base_counts[key]
        report.error_count = len(self.error_log) - errors_before
        report.wall_time_ms = (time.perf_counter() - t_round) * 1000
        self.recorder.write("rounds.jsonl", report.to_dict())
        self.recorder.flush()
        self._emit({"type": "round", "round": report.round_index,
                    "positions": self._position_batch()})
        return report

    def _run_group(self, group: AgentGroup, round_start: float) -> None:
        for agent_id in group.member_ids:
            agent = self.agents[agent_id]
            envelopes = self.subs[agent_id].drain()
            envelopes.sort(key=lambda e: (e.sim_time, e.sender_id, e.seq))
            inbox = []
            out_of_band = []
            for env in envelopes:
                body = messages.decode(env.payload)
                body["sender"] = env.sender_id
                channel = env.topic.rsplit("/", 1)[-1]
                if channel == "user-survey" or body.get("kind") in ("interview", "survey"):
                    out_of_band.append(body)
                else:
                    inbox.append(body)
            try:
                agent.workflow_step(inbox, round_start, self.round_index,
                                    self.spec.round_duration)
            except Exception as exc:
                self.error_log.append({"agent": agent_id, "round": self.round_index,
                                       "message": f"workflow failure: {exc}"})
            for body in out_of_band:
                self._answer_out_of_band(agent, body)

    def _answer_out_of_band(self, agent: SimAgent, body: dict) -> None:
        # Interviews and surveys are answered without interrupting the
        # agent's current actions; the reply goes back over the bus.
        try:
            if body.get("kind") == "interview":
                answer = agent.answer_question(body.get("text", ""))
                self.bus.publish(Envelope(
                    topic=topic_for(self.spec.experiment_id, agent.id, "user-chat"),
                    payload=messages.encode("interview-answer", answer,
                                            request=body.get("request", "")),
                    sender_id=agent.id, sim_time=self.sim_time))
                self.recorder.write("dialogues.jsonl", {
                    "round": self.round_index, "agent": agent.id,
                    "question": body.get("text", ""), "answer": answer})
                self._emit({"type": "dialogue", "agent": agent.id,
                            "question": body.get("text", ""), "answer": answer})
            elif body.get("kind") == "survey":
                survey = body.get("survey", {})
                answers = agent.answer_survey(survey)
                self.bus.publish(Envelope(
                    topic=topic_for(self.spec.experiment_id, agent.id, "user-survey"),
                    payload=messages.encode("survey-response", "",
                                            survey_id=survey.get("survey_id", ""),
                                            answers=answers,
                                            dispatch=body.get("dispatch", "")),
                    sender_id=agent.id, sim_time=self.sim_time))
        except Exception as exc:
            self.error_log.append({"agent": agent.id, "round": self.round_index,
                                   "message": f"out-of-band failure: {exc}"})

    # -- barrier flushes ---------------------------------------------------------------------

    def _flush_plans(self) -> None:
        for agent_id, poi_id, mode in sorted(self._plan_queue):
            try:
                self.urban.set_agent_plan(agent_id, poi_id, mode)
            except Exception as exc:
                self.error_log.append({"agent": agent_id, "round": self.round_index,
                                       "message": f"plan rejected: {exc}"})
        self._plan_queue.clear()

    def _flush_messages(self) -> None:
        order = sorted(range(len(self._msg_queue)),
                       key=lambda i: (self._msg_queue[i][0], i))
        for i in order:
            sender, recipient, body = self._msg_queue[i]
            if self.config.delivery_filter is not None:
                target = self.agents.get(recipient)
                if target is not None and not self.config.delivery_filter(target, body):
                    self.message_log.append({"round": self.round_index, "sender": sender,
                                             "recipient": recipient, "outcome": "filtered",
                                             "tag": body.get("tag")})
                    continue
            try:
                outcome = self.social.send_social_message(sender, recipient, body,
                                                          sim_time=self.sim_time)
            except Exception as exc:
                outcome = f"error: {exc}"
                self.error_log.append({"agent": sender, "round": self.round_index,
                                       "message": f"send failed: {exc}"})
            self.message_log.append({"round": self.round_index, "sender": sender,
                                     "recipient": recipient, "outcome": outcome,
                                     "tag": body.get("tag")})
            self.recorder.write("message_log.jsonl", self.message_log[-1])
        self._msg_queue.clear()

    def _flush_strengths(self) -> None:
        for agent_id, peer_id, delta in sorted(self._strength_queue):
            try:
                self.social.update_strength(agent_id, peer_id, delta)
            except Exception:
                pass  # edge may have been severed this round
        self._strength_queue.clear()

    def _econ_step_if_due(self) -> None:
        if self.ledger is None:
            self._consume_queue.clear()
            return
        econ = self.config.econ
        is_boundary = (self.round_index + 1) % max(1, econ.month_rounds) == 0
        if is_boundary:
            step = (self.round_index + 1) // max(1, econ.month_rounds)
            by_firm: dict[str, list[tuple[str, float]]] = {}
            propensities: dict[str, tuple[float, float]] = {}
            for agent_id in self.agent_ids:
                agent = self.agents[agent_id]
                ctx = agent._context("econ")
                work, consume = agent.driver.economic_propensities(ctx)
                propensities[agent_id] = (work, consume)
                by_firm.setdefault(self.employer[agent_id], []).append((agent_id, work))
            for firm_id in sorted(by_firm):
                payments, _ = self.ledger.settle_wages(firm_id, sorted(by_firm[firm_id]),
                                                       h_max=econ.h_max_month)
                for agent_id, gross in payments:
                    tax, _ = self.ledger.withhold_tax(agent_id, gross)
                    self.month_income[agent_id] = gross - tax
            if econ.ubi_start_step is not None and step >= econ.ubi_start_step:
                self.ledger.pay_ubi(econ.ubi_amount_cents, self.agent_ids)
                for agent_id in self.agent_ids:
                    self.month_income[agent_id] += econ.ubi_amount_cents
            if step % max(1, econ.interest_every_steps) == 0:
                credits = self.ledger.accrue_interest(sorted(self.agent_ids))
                for agent_id, credit in credits.items():
                    self.month_income[agent_id] = self.month_income.get(agent_id, 0) + credit
            if econ.auto_consume:
                for agent_id in self.agent_ids:
                    self._consume_queue.append((agent_id, propensities[agent_id][1]))
        # Purchases queued by agents settle every round, in sorted order.
        for agent_id, propensity in sorted(self._consume_queue):
            rng = derive_rng(self.spec.seed, "consume", self.round_index, agent_id)
            try:
                self.ledger.consume(agent_id, propensity,
                                    self.month_income.get(agent_id, 0), rng)
            except Exception as exc:
                self.error_log.append({"agent": agent_id, "round": self.round_index,
                                       "message": f"consume failed: {exc}"})
        self._consume_queue.clear()
        if is_boundary:
            if econ.adjust_prices:
                for firm_id in sorted(self.ledger.firms):
                    firm = self.ledger.firms[firm_id]
                    self.ledger.adjust_price_wage(firm_id, firm.demand_units,
                                                  firm.supplied_units)
            indicators = self.ledger.compile_indicators(len(self.agent_ids))
            self.record_metric("real_gdp_cents", indicators.real_gdp_cents)
            self.record_metric("per_capita_consumption_cents",
                               indicators.per_capita_consumption_cents)
            self.record_metric("tax_revenue_cents", indicators.tax_revenue_cents)
            self.record_metric("avg_work_hours", indicators.avg_work_hours)

    def _emit_proximity(self) -> None:
        by_spot: dict[tuple[int, int], list[str]] = {}
        for agent_id in self.agent_ids:
            position = self.urban.get_agent_position(agent_id)
            if position.moving:
                continue
            by_spot.setdefault((position.lane, int(position.offset // 20)), []).append(agent_id)
        for spot, members in sorted(by_spot.items()):
            if len(members) < 2:
                continue
            members.sort()
            for a, b in zip(members, members[1:]):
                self.queue_message(a, b, {"kind": "proximity", "text": "nearby"})

    def _apply_due_interventions(self) -> None:
        with self._control_lock:
            pending, self._pending_interventions = self._pending_interventions, []
        from .toolbox import apply_intervention  # local import to avoid a cycle
        for intervention in pending:
            if intervention.round > self.round_index:
                with self._control_lock:
                    self._pending_interventions.append(intervention)
                continue
            try:
                apply_intervention(self, intervention)
            except Exception as exc:
                self.error_log.append({"agent": "*", "round": self.round_index,
                                       "message": f"intervention failed: {exc}"})

    def _answer_control_queue(self) -> None:
        with self._control_lock:
            interviews, self._pending_interviews = self._pending_interviews, []
            surveys, self._pending_surveys = self._pending_surveys, []
        for slot in interviews:
            agent = self.agents[slot["agent"]]
            self.bus.publish(Envelope(
                topic=topic_for(self.spec.experiment_id, agent.id, "user-chat"),
                payload=messages.encode("interview", slot["question"]),
                sender_id="user", sim_time=self.sim_time))
            try:
                slot["answer"] = agent.answer_question(slot["question"])
            except Exception as exc:
                slot["answer"] = None
                slot["error"] = str(exc)
            slot["latency_rounds"] = 1
            self.recorder.write("dialogues.jsonl", {
                "round": self.round_index, "agent": agent.id,
                "question": slot["question"], "answer": slot["answer"]})
            self._emit({"type": "dialogue", "agent": agent.id,
                        "question": slot["question"], "answer": slot["answer"]})
            slot["done"].set()
        for slot in surveys:
            self._dispatch_survey(slot)

    def _dispatch_survey(self, slot: dict) -> None:
        survey = slot["survey"]
        for agent_id in slot["targets"]:
            agent = self.agents.get(agent_id)
            self.bus.publish(Envelope(
                topic=topic_for(self.spec.experiment_id, agent_id, "user-survey"),
                payload=messages.encode("survey", "", survey=survey,
                                        dispatch=survey.get("survey_id", "")),
                sender_id="user", sim_time=self.sim_time))
            if agent is None:
                slot["responses"][agent_id] = None
                continue
            try:
                slot["responses"][agent_id] = agent.answer_survey(survey)
            except Exception as exc:
                slot["responses"][agent_id] = None
                self.error_log.append({"agent": agent_id, "round": self.round_index,
                                       "message": f"survey failure: {exc}"})
            self.recorder.write("surveys.jsonl", {
                "round": self.round_index, "agent": agent_id,
                "survey_id": survey.get("survey_id", ""),
                "response": slot["responses"][agent_id]})
        slot["done"].set()

    # -- persistence of per-round state ------------------------------------------------------

    def _persist_round(self, report: RoundReport) -> None:
        for agent_id in self.agent_ids:
            agent = self.agents[agent_id]
            start = self._events_written[agent_id]
            for seq in range(start, len(agent.memory.events)):
                node = agent.memory.events[seq]
                self.recorder.write("events.jsonl", {
                    "round": self.round_index, "agent": agent_id, "seq": seq,
                    "kind": agent.memory.event_kinds[seq], "sim_time": node.sim_time,
                    "location": node.location, "description": node.description})
            self._events_written[agent_id] = len(agent.memory.events)
            snapshot = agent.status_snapshot()
            self.latest_snapshots[agent_id] = snapshot
            self.recorder.write("status.jsonl", {
                "round": self.round_index, "agent": agent_id, **snapshot})

    def _position_batch(self) -> list[dict]:
        batch = []
        for agent_id in self.agent_ids:
            position = self.urban.get_agent_position(agent_id)
            batch.append({"agent": agent_id, "x": round(position.x, 2),
                          "y": round(position.y, 2), "moving": position.moving})
        return batch

    # -- whole runs ----------------------------------------------------------------------------

    def run(self) -> ExperimentResult:
        started = time.perf_counter()
        reports = []
        try:
            for _ in range(self.spec.round_count):
                reports.append(self.run_round())
        finally:
            duration = time.perf_counter() - started
            self.recorder.write_meta({
                "spec": self.spec.to_dict(), "scenario": self.config.name,
                "status": "complete", "rounds_run": len(reports),
                "duration_s": duration, "error_count": len(self.error_log),
                "errors": self.error_log[-100:]})
            self.recorder.flush()
        return ExperimentResult(spec=self.spec, rounds_run=len(reports),
                                duration_s=duration, error_count=len(self.error_log),
                                output_dir=self.spec.output_dir, reports=reports)

    def close(self) -> None:
        self.recorder.close()


def run_experiment(spec: ExperimentSpec, config: ScenarioConfig | None = None) -> ExperimentResult:
    if config is None and spec.scenario.name != "freeform":
        from .scenarios import build_scenario_config

        config = build_scenario_config(spec.scenario.name, spec.scenario.params)
    experiment = Experiment(spec, config)
    try:
        return experiment.run()
    finally:
        experiment.close()
