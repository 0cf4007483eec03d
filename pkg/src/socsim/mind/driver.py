"""Pluggable cognitive drivers.

The scripted driver is a pure function of (state, seed): identical inputs
always produce identical decisions, which is what makes whole experiments
reproducible without a model server. The remote driver speaks a chat
-completions HTTP contract with retries and fenced-JSON parsing.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from ..social import choose_contact
from ..util import stable_hash64
from .state import EMOTIONS, EmotionState, NeedState, Profile

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

CESD_REVERSE_ITEMS = (4, 8, 12, 16)  # 1-indexed positive-affect items


class DriverError(Exception):
    pass


class ModelParseError(DriverError):
    pass


class RetryExhausted(DriverError):
    def __init__(self, attempts: list[str]):
        super().__init__(f"request failed after {len(attempts)} attempts")
        self.attempts = attempts


@dataclass(frozen=True)
class ActionIntent:
    kind: str                     # move | eat | sleep | work | message | consume | leisure | stay
    category: str = ""            # POI category for move intents
    target: str = ""              # peer id for message intents
    payload: dict = field(default_factory=dict)


@dataclass
class AppraisalResult:
    emotion_deltas: dict[str, int] = field(default_factory=dict)
    attitude_shifts: list[tuple[str, int]] = field(default_factory=list)
    strength_deltas: list[tuple[str, int]] = field(default_factory=list)
    perception_text: str = "Nothing remarkable."


@dataclass
class ContactView:
    peer_id: str
    kind: str
    strength: int
    occupation: str = ""


@dataclass
class MindContext:
    """Everything a driver may look at during one decision."""

    agent_id: str
    profile: Profile
    emotion: EmotionState
    needs: NeedState
    attitudes: dict[str, int]
    sim_time: float
    round_index: int
    hour: float
    weekday: bool
    at_home: bool
    traveling: bool
    weather: str
    cash_cents: int
    month_income_cents: int
    contacts: list[ContactView]
    informed: bool
    banned: bool
    rng: random.Random


# -- scripted rules ----------------------------------------------------------

NEED_POI = {
    "hungry": "restaurant",
    "safe": "office",
    "whatever": "park",
}

DEFAULT_EMOTION_RULES = {
    "social_reply_positive": {"joy": 1},
    "social_message_received": {"joy": 1},
    "inflammatory_received": {"anger": 2, "fear": 1},
    "hurricane_notice": {"fear": 3, "surprise": 1},
    "weather_notice": {"fear": 1},
    "ate": {"joy": 1},
    "slept": {"joy": 1, "sadness": -1},
    "worked": {"joy": 0},
    "consumed": {"joy": 1},
    "ubi_received": {"joy": 1, "sadness": -1},
    "move_failed": {"sadness": 1},
}

DEFAULT_STRENGTH_RULES = {
    "social_reply_positive": 5,
    "social_message_received": 2,
    "inflammatory_received": -3,
}


@dataclass
class ScriptedRules:
    """Structured configuration for the scripted driver (scenario-tunable)."""

    emotion_rules: dict = field(default_factory=lambda: dict(DEFAULT_EMOTION_RULES))
    strength_rules: dict = field(default_factory=lambda: dict(DEFAULT_STRENGTH_RULES))
    # Needs growth per simulated hour.
    need_rates: dict = field(default_factory=lambda: {
        "hungry": 1.0 / 6.0, "tired": 1.0 / 16.0, "safe": 1.0 / 10.0,
        "social": 1.0 / 12.0, "whatever": 1.0 / 24.0})
    search_radius_m: float = 3000.0
    # Mobility regime: probability of starting a discretionary trip per round,
    # by weather. Empty dict disables discretionary trips.
    travel_propensity: dict = field(default_factory=dict)
    travel_mode: str = "walk"
    # Opinion dynamics: exchange stance messages on this topic every round.
    opinion_topic: str = ""
    opinion_fanout: int = 1
    conviction_period: int = 5   # aligned messages needed per attitude step
    # Forward tagged content to every contact once, on first receipt.
    forward_tagged: bool = False
    # Economic propensities.
    work_base: float = 0.5
    consume_base: float = 0.35
    consume_cash_coeff: float = 0.35
    consume_cash_scale: int = 500_000   # cents of cash that saturate the boost
    # CES-D response mapping.
    cesd_strain_scale: int = 400_000    # cents of cash that zero out money strain
    cesd_negative_weight: float = 0.55
    cesd_strain_weight: float = 0.45

    @classmethod
    def from_dict(cls, data: dict) -> "ScriptedRules":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


class ScriptedDriver:
    """Deterministic rule-table driver; every output derives from (state, seed)."""

    def __init__(self, rules: ScriptedRules | None = None):
        self.rules = rules or ScriptedRules()

    # -- decisions -----------------------------------------------------------

    def decide(self, ctx: MindContext) -> list[ActionIntent]:
        rules = self.rules
        if rules.opinion_topic:
            return self._decide_opinion(ctx)
        if rules.travel_propensity:
            return self._decide_travel(ctx)
        return self._decide_needs(ctx)

    def _decide_needs(self, ctx: MindContext) -> list[ActionIntent]:
        need = ctx.needs.active
        if ctx.needs.scores[need] < 0.25:
            return [ActionIntent("stay")]
        if need == "tired":
            if ctx.at_home:
                return [ActionIntent("sleep")]
            return [ActionIntent("move", category="home"), ActionIntent("sleep")]
        if need == "social":
            if ctx.banned or not ctx.contacts:
                return [ActionIntent("leisure")]
            peer = choose_contact(
                [_edge_view(c) for c in ctx.contacts],
                occupations={c.peer_id: c.occupation for c in ctx.contacts})
            return [ActionIntent("message", target=peer,
                                 payload={"kind": "chat",
                                          "text": f"{ctx.profile.name} checking in"})]
        if need == "safe" and not (ctx.weekday and 8 <= ctx.hour < 18):
            return [ActionIntent("stay")]
        category = NEED_POI.get(need, "park")
        action = {"hungry": "eat", "safe": "work", "whatever": "leisure"}[need]
        intents = [ActionIntent("move", category=category), ActionIntent(action)]
        if action == "leisure" and ctx.cash_cents > 0:
            intents.append(ActionIntent("consume"))
        return intents

    def _decide_opinion(self, ctx: MindContext) -> list[ActionIntent]:
        if ctx.banned or not ctx.contacts:
            return [ActionIntent("stay")]
        topic = self.rules.opinion_topic
        score = ctx.attitudes.get(topic, 5)
        side = "support" if score > 5 else ("oppose" if score < 5 else "neutral")
        text = f"My take on {topic}: {side} ({score}/10)"
        payload = {"kind": "stance", "text": text, "topic": topic, "score": score}
        picks = min(self.rules.opinion_fanout, len(ctx.contacts))
        chosen = ctx.rng.sample(range(len(ctx.contacts)), picks)
        return [ActionIntent("message", target=ctx.contacts[i].peer_id,
                             payload=dict(payload)) for i in chosen]

    def _decide_travel(self, ctx: MindContext) -> list[ActionIntent]:
        if ctx.traveling:
            return [ActionIntent("stay")]
        p = self.rules.travel_propensity.get(ctx.weather,
                                             self.rules.travel_propensity.get("clear", 0.0))
        if ctx.rng.random() >= p:
            return [ActionIntent("stay")]
        categories = ("store", "park", "restaurant", "office", "cafe", "gym")
        category = categories[ctx.rng.randrange(len(categories))]
        return [ActionIntent("move", category=category), ActionIntent("leisure")]

    def economic_propensities(self, ctx: MindContext) -> tuple[float, float]:
        rules = self.rules
        jitter = (stable_hash64(ctx.agent_id, "work") % 21 - 10) / 100.0
        work = min(1.0, max(0.0, rules.work_base + jitter))
        boost = rules.consume_cash_coeff * min(1.0, ctx.cash_cents / rules.consume_cash_scale)
        consume = min(1.0, max(0.0, rules.consume_base + boost))
        return work, consume

    # -- appraisal -------------------------------------------------------------

    def appraise(self, ctx: MindContext, events: list[tuple[str, dict]]) -> AppraisalResult:
        """Merge rule-table deltas over an event batch."""
        result = AppraisalResult()
        emotion: dict[str, int] = {}
        moved = []
        for kind, meta in events:
            for name, delta in self.rules.emotion_rules.get(kind, {}).items():
                emotion[name] = emotion.get(name, 0) + delta
            strength = self.rules.strength_rules.get(kind)
            if strength and meta.get("peer"):
                result.strength_deltas.append((meta["peer"], strength))
            if kind == "stance_received":
                shift = self._conviction_shift(ctx, meta)
                if shift:
                    result.attitude_shifts.append(shift)
            moved.append(kind)
        result.emotion_deltas = emotion
        dominant = max(emotion, key=emotion.get) if emotion else ctx.emotion.keyword
        result.perception_text = f"Reflected on {', '.join(sorted(set(moved)))}; feeling {dominant}."
        return result

    def _conviction_shift(self, ctx: MindContext, meta: dict) -> tuple[str, int] | None:
        """Every Nth persuasive message moves the attitude one step.

        Receptiveness is staggered per agent so a population shifts smoothly
        rather than in lockstep: agent i steps when its running count of
        aligned (or opposing) messages passes i mod N, then every N after.
        """
        topic = meta.get("topic", "")
        if not topic:
            return None
        own = ctx.attitudes.get(topic, 5)
        their = int(meta.get("score", 5))
        count = int(meta.get("count", 0))  # per-agent running count, kept by the agent
        period = max(1, self.rules.conviction_period)
        offset = stable_hash64(ctx.agent_id, "conviction") % period
        if count % period != offset:
            return None
        aligned = (own - 5) * (their - 5) > 0
        if aligned and own != 5:
            return (topic, 1 if own > 5 else -1)      # away from the midpoint
        if not aligned and their != 5 and own != their:
            return (topic, -1 if own > 5 else (1 if own < 5 else 0))  # toward midpoint
        return None

    # -- interviews and surveys --------------------------------------------------

    def answer(self, ctx: MindContext, question: str) -> str:
        if not question.strip():
            raise DriverError("empty question")
        topic = next((t for t in ctx.attitudes if t in question.lower()), None)
        view = f" My stance on {topic} is {ctx.attitudes[topic]}/10." if topic else ""
        return (f"{ctx.profile.name} ({ctx.profile.occupation}): regarding "
                f"'{question.strip()}' - I feel {ctx.emotion.keyword} right now.{view}")

    def answer_survey(self, ctx: MindContext, survey: dict) -> list:
        answers = []
        for i, question in enumerate(survey.get("questions", [])):
            fmt = question["format"]
            rng = random.Random(stable_hash64(ctx.agent_id, survey.get("survey_id", ""), i))
            if fmt == "multiple_choice":
                answers.append(rng.randrange(len(question["options"])))
            elif fmt == "ranking":
                order = list(range(len(question["items"])))
                rng.shuffle(order)
                answers.append(order)
            elif fmt == "scale":
                if question.get("cesd_item"):
                    answers.append(self._cesd_item(ctx, int(question["cesd_item"])))
                else:
                    k = int(question.get("max", 10))
                    lean = ctx.emotion.intensities["joy"] / 10.0
                    answers.append(min(k, int(round(lean * k))))
            elif fmt == "free_text":
                answers.append(self.answer(ctx, question["prompt"]))
            else:
                raise DriverError(f"unknown question format {fmt!r}")
        return answers

    def _cesd_item(self, ctx: MindContext, item: int) -> int:
        e = ctx.emotion.intensities
        # Money strain tracks recurring income, the budget people feel monthly.
        strain = max(0.0, 1.0 - ctx.month_income_cents / self.rules.cesd_strain_scale)
        negative = (e["sadness"] + e["fear"] + e["anger"]) / 30.0
        wiggle = (stable_hash64(ctx.agent_id, "cesd", item) % 100) / 100.0 - 0.5
        if item in CESD_REVERSE_ITEMS:
            positive = (e["joy"] / 10.0) * (1.0 - 0.6 * strain)
            raw = 3.0 * positive + 0.35 * wiggle
        else:
            blend = (self.rules.cesd_negative_weight * negative
                     + self.rules.cesd_strain_weight * strain)
            raw = 3.0 * blend + 0.35 * wiggle
        return max(0, min(3, int(round(raw))))


def _edge_view(contact: ContactView):
    from ..social import SocialEdge

    return SocialEdge(peer_id=contact.peer_id, kind=contact.kind,
                      strength=contact.strength)


# -- model-output parsing and retries -------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n(.*?)```", re.DOTALL)


def parse_model_json(text: str):
    """Parse a model response: first fenced code block if present, else bare JSON."""
    if not text or not text.strip():
        raise ModelParseError("empty response")
    match = _FENCE_RE.search(text)
    candidate = match.group(1) if match else text
    try:
        return json.loads(candidate.strip())
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"response is not valid JSON: {exc}") from None


def call_with_retry(fn, retries: int = 3):
    """Call fn(); on error retry up to `retries` more times, then surface
    everything that went wrong."""
    attempts: list[str] = []
    for _ in range(retries + 1):
        try:
            return fn()
        except Exception as exc:
            attempts.append(f"{type(exc).__name__}: {exc}")
    raise RetryExhausted(attempts)


class RemoteDriver:
    """Chat-completions-style driver for any OpenAI-compatible endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str = "",
                 timeout: float = 30.0, retries: int = 3, client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.retries = retries
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._templates: dict[str, str] = {}

    def _template(self, name: str) -> str:
        if name not in self._templates:
            self._templates[name] = (TEMPLATE_DIR / f"{name}.txt").read_text()
        return self._templates[name]

    def _chat(self, prompt: str) -> str:
        def once():
            resp = self._client.post(
                f"{self.base_url}/chat/completions",
                json={"model": self.model,
                      "messages": [{"role": "user", "content": prompt}]})
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]

        return call_with_retry(once, self.retries)

    def _render(self, name: str, ctx: MindContext, **extra) -> str:
        recent = extra.pop("recent_events", "")
        return self._template(name).format(
            name=ctx.profile.name, age=ctx.profile.age, gender=ctx.profile.gender,
            occupation=ctx.profile.occupation, personality=ctx.profile.personality,
            need=ctx.needs.active, keyword=ctx.emotion.keyword,
            intensities=json.dumps(ctx.emotion.intensities),
            attitudes=json.dumps(ctx.attitudes), hour=f"{ctx.hour:.1f}",
            weather=ctx.weather, recent_events=recent, **extra)

    def decide(self, ctx: MindContext, recent_events: str = "") -> list[ActionIntent]:
        def once():
            data = parse_model_json(self._chat(
                self._render("decide", ctx, recent_events=recent_events)))
            return [ActionIntent(kind=item["kind"], category=item.get("category", ""),
                                 target=item.get("target", ""),
                                 payload=item.get("payload", {}))
                    for item in data["intents"]]

        return call_with_retry(once, self.retries)

    def economic_propensities(self, ctx: MindContext) -> tuple[float, float]:
        data = parse_model_json(self._chat(self._render("propensities", ctx)))
        return float(data["work"]), float(data["consume"])

    def appraise(self, ctx: MindContext, events: list[tuple[str, dict]]) -> AppraisalResult:
        listing = "; ".join(kind for kind, _ in events)
        data = parse_model_json(self._chat(
            self._render("appraise", ctx, recent_events=listing)))
        return AppraisalResult(
            emotion_deltas={k: int(v) for k, v in data.get("emotion_deltas", {}).items()},
            attitude_shifts=[(t, int(d)) for t, d in data.get("attitude_shifts", [])],
            strength_deltas=[(p, int(d)) for p, d in data.get("strength_deltas", [])],
            perception_text=data.get("perception", "..."))

    def answer(self, ctx: MindContext, question: str) -> str:
        return self._chat(self._render("answer", ctx, question=question))

    def answer_survey(self, ctx: MindContext, survey: dict) -> list:
        data = parse_model_json(self._chat(self._render(
            "survey", ctx, survey=json.dumps(survey))))
        return data["answers"]


CognitiveDriver = ScriptedDriver | RemoteDriver
