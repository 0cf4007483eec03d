"""Social-experiment instrumentation: interventions, interviews, surveys,
CES-D scoring, opinion-shift classification, activity analytics, and a
parallel-safe metric store.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .bus import Envelope, topic_for
from . import messages

INTERVENTION_VARIANTS = ("agent-configuration", "state-manipulation", "message-notification")
QUESTION_FORMATS = ("multiple_choice", "ranking", "scale", "free_text")

CESD_ITEM_COUNT = 20
CESD_REVERSE_ITEMS = (4, 8, 12, 16)  # 1-indexed

CESD_PROMPTS = (
    "I was bothered by things that usually don't bother me.",
    "I did not feel like eating; my appetite was poor.",
    "I felt that I could not shake off the blues even with help.",
    "I felt that I was just as good as other people.",
    "I had trouble keeping my mind on what I was doing.",
    "I felt depressed.",
    "I felt that everything I did was an effort.",
    "I felt hopeful about the future.",
    "I thought my life had been a failure.",
    "I felt fearful.",
    "My sleep was restless.",
    "I was happy.",
    "I talked less than usual.",
    "I felt lonely.",
    "People were unfriendly.",
    "I enjoyed life.",
    "I had crying spells.",
    "I felt sad.",
    "I felt that people disliked me.",
    "I could not get going.",
)


class ToolboxError(Exception):
    pass


@dataclass
class Intervention:
    variant: str
    round: int = 0
    targets: list[str] | None = None      # None means every agent
    profile_patch: dict = field(default_factory=dict)
    status_patch: dict = field(default_factory=dict)
    message_text: str = ""
    message_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in INTERVENTION_VARIANTS:
            raise ToolboxError(f"unknown intervention variant {self.variant!r}")
        if self.variant == "agent-configuration" and self.round != 0:
            raise ToolboxError("agent-configuration interventions only apply at round 0")


@dataclass
class Survey:
    survey_id: str
    questions: list[dict]

    def validate(self) -> None:
        if not self.survey_id:
            raise ToolboxError("survey needs an id")
        for i, question in enumerate(self.questions):
            fmt = question.get("format")
            if fmt not in QUESTION_FORMATS:
                raise ToolboxError(f"question {i} has unknown format {fmt!r}")
            if fmt == "multiple_choice" and not question.get("options"):
                raise ToolboxError(f"question {i} needs options")
            if fmt == "ranking" and not question.get("items"):
                raise ToolboxError(f"question {i} needs items")
            if fmt == "scale" and int(question.get("max", 0)) <= 0:
                raise ToolboxError(f"question {i} needs a positive max")
            if not question.get("prompt"):
                raise ToolboxError(f"question {i} needs a prompt")

    def to_dict(self) -> dict:
        return {"survey_id": self.survey_id, "questions": self.questions}


def cesd_survey(survey_id: str = "cesd") -> Survey:
    questions = [{"prompt": prompt, "format": "scale", "max": 3, "cesd_item": i + 1}
                 for i, prompt in enumerate(CESD_PROMPTS)]
    return Survey(survey_id=survey_id, questions=questions)


def score_cesd(responses: list[int]) -> int:
    """Sum of 20 items in [0, 3] with items 4, 8, 12 and 16 reverse-scored."""
    if len(responses) != CESD_ITEM_COUNT:
        raise ToolboxError(f"CES-D takes exactly {CESD_ITEM_COUNT} items, "
                           f"got {len(responses)}")
    total = 0
    for i, value in enumerate(responses, start=1):
        if not isinstance(value, int) or not 0 <= value <= 3:
            raise ToolboxError(f"item {i} value {value!r} outside 0..3")
        total += (3 - value) if i in CESD_REVERSE_ITEMS else value
    return total


def polarization_metric(score: float) -> float:
    """Distance of an opinion score from the neutral midpoint of the 0-10 scale."""
    if not 0 <= score <= 10:
        raise ToolboxError(f"score {score} outside 0..10")
    return abs(score - 5.0)


def classify_shift(before: float, after: float) -> str:
    """Exhaustive, mutually exclusive opinion-shift classes."""
    if before == after:
        return "unchanged"
    before_side = before - 5.0
    after_side = after - 5.0
    if before_side != 0 and after_side != 0 and (before_side > 0) != (after_side > 0):
        return "flipped"
    d_before, d_after = abs(before_side), abs(after_side)
    if d_after > d_before:
        return "more_polarized"
    if d_after < d_before:
        return "more_moderate"
    return "unchanged"


def activity_level(travelers: int, population: int) -> float:
    """Traveling individuals over area population."""
    if population <= 0:
        raise ToolboxError("activity level undefined for an empty area")
    return travelers / population


# -- live-experiment operations ------------------------------------------------


def apply_intervention(experiment, intervention: Intervention) -> int:
    """Apply one intervention to a running experiment; returns affected count."""
    targets = intervention.targets
    if targets is None:
        targets = list(experiment.agent_ids)
    unknown = [t for t in targets if t not in experiment.agents]
    if unknown:
        raise ToolboxError(f"unknown agents {unknown[:3]}")

    if intervention.variant == "agent-configuration":
        if experiment.round_index > 0:
            raise ToolboxError("agent-configuration must be applied before the run starts")
        for agent_id in targets:
            agent = experiment.agents[agent_id]
            merged = {**agent.profile.to_dict(), **intervention.profile_patch}
            from .mind.state import Profile

            agent.profile = Profile(**merged)
        return len(targets)

    if intervention.variant == "state-manipulation":
        for agent_id in targets:
            agent = experiment.agents[agent_id]
            patch = intervention.status_patch
            for name, value in patch.get("emotion", {}).items():
                if name in agent.emotion.intensities:
                    agent.emotion.intensities[name] = max(0, min(10, int(value)))
            for name, value in patch.get("needs", {}).items():
                if name in agent.needs.scores:
                    agent.needs.scores[name] = min(1.0, max(0.0, float(value)))
            for topic, value in patch.get("attitudes", {}).items():
                agent.attitudes[topic] = max(0, min(10, int(value)))
        return len(targets)

    # message-notification
    meta = dict(intervention.message_meta)
    kind = meta.pop("kind", "notice")
    for agent_id in targets:
        experiment.bus.publish(Envelope(
            topic=topic_for(experiment.spec.experiment_id, agent_id, "user-chat"),
            payload=messages.encode(kind, intervention.message_text, **meta),
            sender_id="user", sim_time=experiment.sim_time))
    return len(targets)


def interview(experiment, agent_id: str, question: str, timeout_s: float = 30.0) -> dict:
    """One interview round-trip against a running experiment."""
    slot = experiment.queue_interview(agent_id, question)
    experiment_thread_running = getattr(experiment, "_background", False)
    if not experiment_thread_running:
        # Caller drives the engine; answer the queue inline at the next boundary.
        experiment.run_round()
    if not slot["done"].wait(timeout_s):
        return {"agent": agent_id, "question": question, "answer": None,
                "timed_out": True}
    return {"agent": agent_id, "question": question, "answer": slot["answer"],
            "timed_out": False, "latency_rounds": slot["latency_rounds"]}


class SurveyCollector:
    """Tracks dispatched surveys; duplicate dispatch ids are idempotent."""

    def __init__(self):
        self._dispatches: dict[str, dict] = {}
        self._lock = threading.Lock()

    def dispatch(self, experiment, survey: Survey, targets: list[str],
                 dispatch_id: str | None = None, timeout_s: float = 30.0) -> dict:
        survey.validate()
        if not targets:
            raise ToolboxError("survey needs targets")
        key = dispatch_id or survey.survey_id
        with self._lock:
            if key in self._dispatches:
                return self._dispatches[key]
        slot = experiment.queue_survey(survey.to_dict(), targets)
        if not getattr(experiment, "_background", False):
            experiment.run_round()
        slot["done"].wait(timeout_s)
        responses = dict(slot["responses"])
        result = {"dispatch_id": key, "survey_id": survey.survey_id,
                  "responses": responses,
                  "missing": [t for t, r in responses.items() if r is None]}
        with self._lock:
            self._dispatches[key] = result
        return result


# -- metric recording ---------------------------------------------------------------


@dataclass(frozen=True)
class MetricSample:
    experiment_id: str
    key: str
    step: int
    value: float


class MetricStore:
    """Parallel-safe append-only metric samples with unique (exp, key, step)."""

    def __init__(self, sink=None):
        self._lock = threading.Lock()
        self._rows: dict[tuple[str, str, int], MetricSample] = {}
        self._sink = sink

    def record(self, sample: MetricSample) -> None:
        key = (sample.experiment_id, sample.key, sample.step)
        with self._lock:
            if key in self._rows:
                raise ToolboxError(f"duplicate metric sample {key}")
            self._rows[key] = sample
            if self._sink is not None:
                self._sink({"experiment": sample.experiment_id, "key": sample.key,
                            "step": sample.step, "value": sample.value})

    def query(self, experiment_id: str, key: str,
              start: int = 0, stop: int | None = None) -> list[MetricSample]:
        with self._lock:
            rows = [s for (e, k, _), s in self._rows.items()
                    if e == experiment_id and k == key
                    and s.step >= start and (stop is None or s.step < stop)]
        return sorted(rows, key=lambda s: s.step)
