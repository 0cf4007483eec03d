"""The agent: five-phase workflow loop over stream memory.

Each round an agent (1) determines its next action from needs and state,
(2) executes it against the environment and records feedback, (3) updates
its event flow, (4) appraises the outcome into emotion/attitude changes and
a linked perception node, and (5) processes passive events from its inbox
the same way. All cross-agent effects are queued through the services
layer, which the engine flushes at the round barrier.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..util import SECONDS_PER_HOUR, derive_rng, hour_of_day, is_weekday, stable_hash64
from .driver import ActionIntent, ContactView, MindContext
from .state import EmotionState, MemoryNode, NeedState, Profile, StreamMemory

ARRIVAL_XY_TOLERANCE = 40.0  # meters between agent and target POI that count as "there"

_FULFILL = {"eat": "hungry", "sleep": "tired", "work": "safe",
            "message": "social", "leisure": "whatever"}

_PLACE_FOR = {"eat": "restaurant", "work": "office", "sleep": "home"}


class AgentServices:
    """Environment facade the engine hands to each agent.

    Reads are snapshots; mutating calls queue effects for the round barrier.
    Implementations also keep per-agent interaction counters.
    """

    def position_of(self, agent_id: str): raise NotImplementedError
    def poi_xy(self, poi_id: int) -> tuple[float, float]: raise NotImplementedError
    def home_xy(self, agent_id: str) -> tuple[float, float]: raise NotImplementedError
    def home_poi(self, agent_id: str) -> int: raise NotImplementedError
    def weather(self) -> str: raise NotImplementedError
    def choose_destination(self, agent_id: str, category: str, radius_m: float, rng):
        raise NotImplementedError
    def queue_plan(self, agent_id: str, poi_id: int, mode: str): raise NotImplementedError
    def cash(self, agent_id: str) -> int: raise NotImplementedError
    def month_income(self, agent_id: str) -> int: raise NotImplementedError
    def queue_consume(self, agent_id: str, propensity: float): raise NotImplementedError
    def contacts(self, agent_id: str) -> list[ContactView]: raise NotImplementedError
    def queue_message(self, sender: str, recipient: str, body: dict):
        raise NotImplementedError
    def queue_strength(self, agent_id: str, peer_id: str, delta: int):
        raise NotImplementedError
    def is_banned(self, agent_id: str) -> bool: raise NotImplementedError
    def aoi_name(self, agent_id: str) -> str: raise NotImplementedError
    def log_error(self, agent_id: str, message: str): raise NotImplementedError


@dataclass
class _TravelTarget:
    poi_id: int
    category: str
    issued_round: int
    was_moving: bool = False


class SimAgent:
    def __init__(self, agent_id: str, profile: Profile, driver, services: AgentServices,
                 seed: int, attitudes: dict[str, int] | None = None):
        self.id = agent_id
        self.profile = profile
        self.driver = driver
        self.services = services
        self.seed = seed
        self.emotion = EmotionState()
        self.needs = NeedState()
        self.attitudes = dict(attitudes or {})
        self.memory = StreamMemory()
        self.round_index = 0
        self.sim_time = 0.0
        self._chain: list[ActionIntent] = []
        self._travel: _TravelTarget | None = None
        self._stance_counts: dict[str, int] = {}
        self.informed_tags: set[str] = set()
        self.error_count = 0

    # -- needs -------------------------------------------------------------------

    def update_needs(self, elapsed_s: float, fulfilled: tuple[str, ...] = ()) -> NeedState:
        hours = elapsed_s / SECONDS_PER_HOUR
        rates = self.driver.rules.need_rates if hasattr(self.driver, "rules") else {}
        for name, rate in rates.items():
            self.needs.grow(name, rate * hours)
        for action in fulfilled:
            need = _FULFILL.get(action)
            if need:
                self.needs.satisfy(need)
        return self.needs

    # -- context ----------------------------------------------------------------

    def _context(self, phase: str) -> MindContext:
        services = self.services
        position = services.position_of(self.id)
        return MindContext(
            agent_id=self.id, profile=self.profile, emotion=self.emotion,
            needs=self.needs, attitudes=dict(self.attitudes),
            sim_time=self.sim_time, round_index=self.round_index,
            hour=hour_of_day(self.sim_time), weekday=is_weekday(self.sim_time),
            at_home=not position.moving and self._near_home(position),
            traveling=position.moving or self._travel is not None,
            weather=services.weather(), cash_cents=services.cash(self.id),
            month_income_cents=services.month_income(self.id),
            contacts=services.contacts(self.id), informed=bool(self.informed_tags),
            banned=services.is_banned(self.id),
            rng=derive_rng(self.seed, self.id, self.round_index, phase))

    def _near_home(self, position) -> bool:
        hx, hy = self.services.home_xy(self.id)
        return math.hypot(position.x - hx, position.y - hy) <= ARRIVAL_XY_TOLERANCE

    # -- workflow ------------------------------------------------------------------

    def workflow_step(self, inbox: list[dict], sim_time: float, round_index: int,
                      round_duration: float) -> None:
        self.sim_time = sim_time
        self.round_index = round_index
        action_events: list[tuple[str, dict]] = []

        # Phase 1: action determination.
        self.update_needs(round_duration)
        ctx = None
        try:
            ctx = self._context("decide")
            if not self._chain and self._travel is None:
                self._chain = list(self.driver.decide(ctx))
        except Exception as exc:
            self.error_count += 1
            self.services.log_error(self.id, f"decide failed: {exc}")
            self._record(action_events, "error", f"Could not settle on a plan ({exc}).")
            self._chain = []

        # Phase 2: event feedback from executing what is currently possible.
        if ctx is not None:
            try:
                self._execute(ctx, action_events)
            except Exception as exc:
                self.error_count += 1
                self.services.log_error(self.id, f"act failed: {exc}")
                self._record(action_events, "error", f"Action fell through ({exc}).")

        if not action_events:
            self._record(action_events, "idle", "Passed the time quietly.")

        # Phase 3 happened as events were recorded; phase 4: appraisal.
        self._appraise("appraise", action_events)

        # Phase 5: passive and environmental events from the inbox.
        passive_events: list[tuple[str, dict]] = []
        for body in inbox:
            self._receive(body, passive_events)
        if passive_events:
            self._appraise("appraise-passive", passive_events)

    # -- execution helpers --------------------------------------------------------

    def _record(self, batch: list, kind: str, description: str, **meta) -> None:
        node = MemoryNode(sim_time=self.sim_time,
                          location=self.services.aoi_name(self.id),
                          description=description)
        self.memory.add_event(node, kind)
        batch.append((kind, meta))

    def _execute(self, ctx: MindContext, batch: list) -> None:
        services = self.services
        if self._travel is not None:
            position = services.position_of(self.id)
            target = self._travel
            if position.moving:
                target.was_moving = True
                self._record(batch, "traveling",
                             f"Still on the way to the {target.category}.")
                return
            tx, ty = services.poi_xy(target.poi_id)
            if math.hypot(position.x - tx, position.y - ty) <= ARRIVAL_XY_TOLERANCE:
                self._record(batch, "arrived", f"Arrived at the {target.category}.",
                             poi=target.poi_id)
                self._travel = None
            elif target.was_moving or target.issued_round < self.round_index:
                self._record(batch, "move_failed",
                             f"Could not reach the {target.category}; gave up.")
                self._travel = None
                self._chain = []
                return
            else:
                self._record(batch, "traveling",
                             f"Setting out for the {target.category}.")
                return

        while self._chain:
            intent = self._chain.pop(0)
            if intent.kind == "move":
                self._start_move(ctx, intent, batch)
                return
            self._do_domain_action(ctx, intent, batch)
            if intent.kind in ("eat", "sleep", "work", "leisure"):
                # One timed activity per round keeps the daily rhythm.
                return

    def _start_move(self, ctx: MindContext, intent: ActionIntent, batch: list) -> None:
        services = self.services
        if intent.category == "home":
            poi_id = services.home_poi(self.id)
        else:
            rules = getattr(self.driver, "rules", None)
            radius = rules.search_radius_m if rules else 3000.0
            poi = services.choose_destination(self.id, intent.category, radius, ctx.rng)
            if poi is None:
                self._record(batch, "move_failed",
                             f"No reachable {intent.category}; staying home.")
                self._chain = []
                return
            poi_id = poi.id
        mode = self._pick_mode(ctx, poi_id)
        services.queue_plan(self.id, poi_id, mode)
        self._travel = _TravelTarget(poi_id=poi_id, category=intent.category or "home",
                                     issued_round=self.round_index)
        self._record(batch, "depart",
                     f"Heading to the {intent.category or 'home'} by {mode}.",
                     poi=poi_id, mode=mode)

    def _pick_mode(self, ctx: MindContext, poi_id: int) -> str:
        rules = getattr(self.driver, "rules", None)
        if rules is not None and rules.travel_mode:
            return rules.travel_mode
        position = self.services.position_of(self.id)
        tx, ty = self.services.poi_xy(poi_id)
        crow = math.hypot(position.x - tx, position.y - ty)
        return "walk" if crow <= 1200.0 else "drive"

    def _do_domain_action(self, ctx: MindContext, intent: ActionIntent, batch: list) -> None:
        services = self.services
        kind = intent.kind
        if kind == "stay":
            self._record(batch, "stay", "Stayed in and rested.")
        elif kind == "sleep":
            self.needs.satisfy("tired")
            self._record(batch, "slept", "Went to sleep.")
        elif kind == "eat":
            self.needs.satisfy("hungry")
            self._record(batch, "ate", "Had a proper meal.")
        elif kind == "work":
            self.needs.satisfy("safe")
            self._record(batch, "worked", "Put in focused hours at work.")
        elif kind == "leisure":
            self.needs.satisfy("whatever")
            self._record(batch, "leisure", "Unwound with some free time.")
        elif kind == "consume":
            _, c = self.driver.economic_propensities(ctx)
            services.queue_consume(self.id, c)
            self._record(batch, "consumed", "Went shopping for daily goods.")
        elif kind == "message":
            if services.is_banned(self.id):
                self._record(batch, "send_blocked",
                             "Tried to post, but the account is suspended.")
                return
            if not intent.target:
                self._record(batch, "error", "No one to message.")
                return
            services.queue_message(self.id, intent.target, dict(intent.payload))
            self.needs.satisfy("social")
            text = intent.payload.get("text", "")
            self._record(batch, "sent_message",
                         f"Messaged {intent.target}: {text[:60]}",
                         peer=intent.target)
        else:
            self._record(batch, "error", f"Unknown intent {kind!r}.")

    # -- passive events -----------------------------------------------------------

    def _receive(self, body: dict, batch: list) -> None:
        kind = body.get("kind", "chat")
        sender = body.get("sender", "")
        text = body.get("text", "")
        if kind == "notice":
            event_kind = ("hurricane_notice" if "hurricane" in text.lower()
                          else "weather_notice" if body.get("weather")
                          else "notice")
            self._record(batch, event_kind, f"Notice received: {text[:80]}")
        elif kind == "stance":
            topic = body.get("topic", "")
            self._stance_counts[topic] = self._stance_counts.get(topic, 0) + 1
            self._record(batch, "stance_received",
                         f"{sender} shared a view on {topic}: {text[:60]}",
                         peer=sender, topic=topic, score=body.get("score", 5),
                         count=self._stance_counts[topic])
        elif kind == "tagged":
            tag = body.get("tag", "tagged")
            self._record(batch, "inflammatory_received",
                         f"Saw a charged post from {sender}: {text[:60]}",
                         peer=sender, tag=tag)
            if tag not in self.informed_tags:
                self.informed_tags.add(tag)
                self._forward_tagged(body, batch)
        elif kind == "proximity":
            self._record(batch, "proximity", f"Ran into {sender} nearby.", peer=sender)
        else:
            self._record(batch, "social_message_received",
                         f"Message from {sender}: {text[:60]}", peer=sender)

    def _forward_tagged(self, body: dict, batch: list) -> None:
        rules = getattr(self.driver, "rules", None)
        if rules is None or not rules.forward_tagged:
            return
        if self.services.is_banned(self.id):
            return
        payload = {"kind": "tagged", "text": body.get("text", ""),
                   "tag": body.get("tag", "tagged")}
        # Forwarding order is a per-agent deterministic shuffle, not roster order.
        contacts = sorted(self.services.contacts(self.id),
                          key=lambda c: stable_hash64(self.id, "fwd", c.peer_id))
        for contact in contacts:
            self.services.queue_message(self.id, contact.peer_id, dict(payload))
        self._record(batch, "forwarded", "Passed the story along to everyone I know.",
                     tag=body.get("tag", "tagged"))

    # -- appraisal -----------------------------------------------------------------

    def _appraise(self, phase: str, events: list[tuple[str, dict]]) -> None:
        if not events:
            return
        start = len(self.memory.events) - len(events)
        linked = list(range(start, len(self.memory.events)))
        try:
            result = self.driver.appraise(self._context(phase), events)
        except Exception as exc:
            self.error_count += 1
            self.services.log_error(self.id, f"appraise failed: {exc}")
            return
        self.emotion.apply_deltas(result.emotion_deltas)
        self.emotion.thought = result.perception_text
        for topic, delta in result.attitude_shifts:
            value = max(0, min(10, self.attitudes.get(topic, 5) + delta))
            self.attitudes[topic] = value
        for peer, delta in result.strength_deltas:
            self.services.queue_strength(self.id, peer, delta)
        node = MemoryNode(sim_time=self.sim_time,
                          location=self.services.aoi_name(self.id),
                          description=result.perception_text)
        self.memory.add_perception(node, linked)

    # -- interviews, surveys, snapshots ---------------------------------------------

    def answer_question(self, question: str) -> str:
        return self.driver.answer(self._context("interview"), question)

    def answer_survey(self, survey: dict) -> list:
        return self.driver.answer_survey(self._context("survey"), survey)

    def status_snapshot(self) -> dict:
        position = self.services.position_of(self.id)
        return {
            "emotion": self.emotion.to_dict(),
            "needs": self.needs.to_dict(),
            "attitudes": dict(self.attitudes),
            "cash_cents": self.services.cash(self.id),
            "position": {"lane": position.lane, "offset": round(position.offset, 3),
                         "x": round(position.x, 3), "y": round(position.y, 3),
                         "moving": position.moving},
            "banned": self.services.is_banned(self.id),
            "error_count": self.error_count,
        }
