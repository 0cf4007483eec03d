"""Agent internal state: profile, emotion, needs, attitudes, stream memory."""

from __future__ import annotations

from dataclasses import dataclass, field

EMOTIONS = ("sadness", "joy", "fear", "disgust", "anger", "surprise")

# Fixed tie-break priority when several needs share the top urgency.
NEED_PRIORITY = ("hungry", "tired", "safe", "social", "whatever")


@dataclass(frozen=True)
class Profile:
    name: str
    age: int
    gender: str
    education: str
    personality: str
    occupation: str
    home_aoi: int
    income_bracket: str

    def to_dict(self) -> dict:
        return {
            "name": self.name, "age": self.age, "gender": self.gender,
            "education": self.education, "personality": self.personality,
            "occupation": self.occupation, "home_aoi": self.home_aoi,
            "income_bracket": self.income_bracket,
        }


def _clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, value))


@dataclass
class EmotionState:
    """Six core emotion intensities on a 0-10 scale plus a keyword and thought."""

    intensities: dict[str, int] = field(
        default_factory=lambda: {"sadness": 2, "joy": 5, "fear": 1,
                                 "disgust": 1, "anger": 1, "surprise": 2})
    keyword: str = "joy"
    thought: str = "Just an ordinary day."

    def apply_deltas(self, deltas: dict[str, int]) -> None:
        for name, delta in deltas.items():
            if name not in self.intensities:
                continue
            self.intensities[name] = _clamp(self.intensities[name] + delta, 0, 10)
        self.keyword = max(EMOTIONS, key=lambda e: (self.intensities[e], -EMOTIONS.index(e)))

    def to_dict(self) -> dict:
        return {"intensities": dict(self.intensities), "keyword": self.keyword,
                "thought": self.thought}


@dataclass
class NeedState:
    """Urgency scores in [0, 1] for the five observed need levels."""

    scores: dict[str, float] = field(
        default_factory=lambda: {n: 0.0 for n in NEED_PRIORITY})

    @property
    def active(self) -> str:
        best = max(self.scores.values())
        for name in NEED_PRIORITY:
            if self.scores[name] == best:
                return name
        return NEED_PRIORITY[-1]

    def grow(self, name: str, amount: float) -> None:
        self.scores[name] = min(1.0, max(0.0, self.scores[name] + amount))

    def satisfy(self, name: str) -> None:
        self.scores[name] = 0.0

    def to_dict(self) -> dict:
        return {"scores": dict(self.scores), "active": self.active}


class AttitudeStore:
    """Integer 0-10 support ratings per topic."""

    def __init__(self, initial: dict[str, int] | None = None):
        self._topics: dict[str, int] = {}
        for topic, value in (initial or {}).items():
            self.set(topic, value)

    def get(self, topic: str, default: int = 5) -> int:
        return self._topics.get(topic, default)

    def set(self, topic: str, value: int) -> None:
        self._topics[topic] = _clamp(int(value), 0, 10)

    def shift(self, topic: str, delta: int, default: int = 5) -> int:
        value = _clamp(self.get(topic, default) + delta, 0, 10)
        self._topics[topic] = value
        return value

    def topics(self) -> dict[str, int]:
        return dict(self._topics)


@dataclass
class MemoryNode:
    sim_time: float
    location: str
    description: str

    def __post_init__(self):
        if not self.location or not self.description:
            raise ValueError("memory nodes need a location and a description")

    def to_dict(self) -> dict:
        return {"sim_time": self.sim_time, "location": self.location,
                "description": self.description}


class StreamMemory:
    """Chronological event flow plus a perception flow linking back to events."""

    def __init__(self):
        self.events: list[MemoryNode] = []
        self.event_kinds: list[str] = []
        self.perceptions: list[tuple[MemoryNode, tuple[int, ...]]] = []

    def add_event(self, node: MemoryNode, kind: str = "event") -> int:
        if self.events and node.sim_time < self.events[-1].sim_time:
            raise ValueError("event flow must stay chronological")
        self.events.append(node)
        self.event_kinds.append(kind)
        return len(self.events) - 1

    def add_perception(self, node: MemoryNode, linked_events: list[int]) -> int:
        if not linked_events:
            raise ValueError("a perception node must link at least one event")
        for idx in linked_events:
            if not 0 <= idx < len(self.events):
                raise ValueError(f"perception links missing event {idx}")
        if self.perceptions and node.sim_time < self.perceptions[-1][0].sim_time:
            raise ValueError("perception flow must stay chronological")
        self.perceptions.append((node, tuple(linked_events)))
        return len(self.perceptions) - 1

    def recent_events(self, count: int = 20) -> list[MemoryNode]:
        return self.events[-count:]
