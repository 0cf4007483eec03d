"""Social space: weighted typed relationship graph, contact choice, message
sending over the bus, and the supervisor moderation middleware with node
(account suspension) and edge (connection removal) interventions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from . import messages
from .bus import Envelope, topic_for

EDGE_KINDS = ("family", "friend", "colleague")
HISTORY_CAP = 100
DEFAULT_BAN_THRESHOLD = 3

POLICIES = ("none", "node", "edge")


class SocialError(Exception):
    pass


class NoSuchEdge(SocialError):
    """The relationship does not exist (distinct from a severed one)."""


@dataclass
class SocialEdge:
    peer_id: str
    kind: str = "friend"
    strength: int = 50
    history: list[tuple[float, str, str]] = field(default_factory=list)  # (time, dir, digest)

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise SocialError(f"unknown edge kind {self.kind!r}")
        self.strength = max(0, min(100, int(self.strength)))

    def log(self, sim_time: float, direction: str, digest: str) -> None:
        if self.history and sim_time < self.history[-1][0]:
            sim_time = self.history[-1][0]
        self.history.append((sim_time, direction, digest[:80]))
        if len(self.history) > HISTORY_CAP:
            del self.history[: len(self.history) - HISTORY_CAP]


def choose_contact(edges: list[SocialEdge], topic: str | None = None,
                   occupations: dict[str, str] | None = None,
                   topic_occupations: dict[str, str] | None = None) -> str | None:
    """Pick a peer: strongest tie, or the best topic match when a topic is given.

    Topic matching looks for peers whose occupation is tagged as relevant
    (e.g. a "security" question goes to a police officer); ties and misses
    fall back to relationship strength, then to the lowest peer id.
    """
    if not edges:
        return None

    def strength_key(e: SocialEdge):
        return (-e.strength, e.peer_id)

    if topic and occupations:
        wanted = (topic_occupations or DEFAULT_TOPIC_OCCUPATIONS).get(topic)
        if wanted:
            relevant = [e for e in edges
                        if wanted in occupations.get(e.peer_id, "").lower()]
            if relevant:
                return min(relevant, key=strength_key).peer_id
    return min(edges, key=strength_key).peer_id


DEFAULT_TOPIC_OCCUPATIONS = {
    "security": "police",
    "health": "doctor",
    "finance": "accountant",
    "education": "teacher",
}


@dataclass
class Verdict:
    allowed: bool
    outcome: str          # delivered | blocked | severed | banned
    reason: str = ""


class Supervisor:
    """Moderation middleware applied on the publish path.

    The classifier is a pluggable callable (sender, recipient, body) -> bool
    flagging harmful content; classifier failures fail open with a warning
    in the audit log. Node policy counts violations and suspends repeat
    offenders at the threshold; edge policy blocks the message and severs
    the connection that carried it.
    """

    def __init__(self, classifier=None, policy: str = "none",
                 ban_threshold: int = DEFAULT_BAN_THRESHOLD):
        if policy not in POLICIES:
            raise SocialError(f"unknown policy {policy!r}")
        self.classifier = classifier or (lambda sender, recipient, body: False)
        self.policy = policy
        self.ban_threshold = ban_threshold
        self.violations: dict[str, int] = {}
        self.banned: set[str] = set()
        self.severed: set[tuple[str, str]] = set()
        self.audit_log: list[dict] = []
        self._lock = threading.Lock()

    def _edge_key(self, a: str, b: str) -> tuple[str, str]:
        return (a, b) if a <= b else (b, a)

    def supervise(self, sender: str, recipient: str, body: dict) -> Verdict:
        with self._lock:
            if sender in self.banned:
                verdict = Verdict(False, "banned", "sender suspended")
                self._audit(sender, recipient, verdict)
                return verdict
            if self._edge_key(sender, recipient) in self.severed:
                verdict = Verdict(False, "severed", "connection removed")
                self._audit(sender, recipient, verdict)
                return verdict
            if self.policy == "none":
                verdict = Verdict(True, "delivered")
                self._audit(sender, recipient, verdict)
                return verdict
            try:
                harmful = bool(self.classifier(sender, recipient, body))
            except Exception as exc:  # fail open, but leave a trace
                verdict = Verdict(True, "delivered", f"classifier failure: {exc}")
                self._audit(sender, recipient, verdict)
                return verdict
            if not harmful:
                verdict = Verdict(True, "delivered")
            elif self.policy == "node":
                count = self.violations.get(sender, 0) + 1
                self.violations[sender] = count
                if count >= self.ban_threshold:
                    self.banned.add(sender)
                # The triggering message itself still goes through.
                verdict = Verdict(True, "delivered",
                                  f"violation {count}/{self.ban_threshold}")
            else:  # edge
                self.severed.add(self._edge_key(sender, recipient))
                verdict = Verdict(False, "severed", "harmful content on edge")
            self._audit(sender, recipient, verdict)
            return verdict

    def _audit(self, sender: str, recipient: str, verdict: Verdict) -> None:
        self.audit_log.append({"sender": sender, "recipient": recipient,
                               "outcome": verdict.outcome, "reason": verdict.reason})


class SocialSpace:
    """Holds every agent's edges and sends supervised messages over the bus."""

    def __init__(self, bus, exp_id: str, supervisor: Supervisor | None = None):
        self.bus = bus
        self.exp_id = exp_id
        self.supervisor = supervisor or Supervisor()
        self.edges: dict[str, dict[str, SocialEdge]] = {}
        self.occupations: dict[str, str] = {}

    def add_edge(self, a: str, b: str, kind: str = "friend", strength: int = 50) -> None:
        self.edges.setdefault(a, {})[b] = SocialEdge(peer_id=b, kind=kind, strength=strength)
        self.edges.setdefault(b, {})[a] = SocialEdge(peer_id=a, kind=kind, strength=strength)

    def load_edge_records(self, records) -> None:
        """Edge-list import: iterable of (agent, peer, kind, strength)."""
        for agent, peer, kind, strength in records:
            self.add_edge(agent, peer, kind, strength)

    def edges_of(self, agent_id: str) -> list[SocialEdge]:
        return list(self.edges.get(agent_id, {}).values())

    def edge(self, a: str, b: str) -> SocialEdge:
        try:
            return self.edges[a][b]
        except KeyError:
            raise NoSuchEdge(f"{a} has no edge to {b}") from None

    def update_strength(self, a: str, b: str, delta: int) -> int:
        edge = self.edge(a, b)
        edge.strength = max(0, min(100, edge.strength + delta))
        back = self.edges.get(b, {}).get(a)
        if back is not None:
            back.strength = edge.strength
        return edge.strength

    def send_social_message(self, sender: str, recipient: str, body: dict,
                            sim_time: float = 0.0) -> str:
        """Send one supervised message; returns the verdict outcome."""
        edge = self.edge(sender, recipient)  # raises NoSuchEdge when absent
        verdict = self.supervisor.supervise(sender, recipient, body)
        if verdict.allowed:
            env = Envelope(topic=topic_for(self.exp_id, recipient, "agent-chat"),
                           payload=messages.encode(**body), sender_id=sender,
                           sim_time=sim_time)
            self.bus.publish(env)
            digest = body.get("text", "")[:80]
            edge.log(sim_time, "out", digest)
            back = self.edges.get(recipient, {}).get(sender)
            if back is not None:
                back.log(sim_time, "in", digest)
        return verdict.outcome


def spread_reach(event_log: list[dict], round_count: int,
                 tag: str = "tagged", seeds: list[str] | None = None) -> list[int]:
    """Cumulative count of informed agents per round.

    An agent is informed once it carries the tagged content: seeds from
    round 0, senders of tagged messages from their first attempt, and
    recipients only of messages that were actually delivered.
    """
    first_round: dict[str, int] = {}
    for seed in seeds or ():
        first_round[seed] = 0
    for entry in event_log:
        if entry.get("tag") != tag:
            continue
        rnd = entry["round"]
        sender = entry.get("sender")
        if sender and rnd < first_round.get(sender, round_count + 1):
            first_round[sender] = rnd
        if entry.get("outcome") == "delivered":
            recipient = entry.get("recipient")
            if recipient and rnd < first_round.get(recipient, round_count + 1):
                first_round[recipient] = rnd
    counts = []
    informed: set[str] = set()
    for r in range(round_count):
        informed.update(a for a, rr in first_round.items() if rr <= r)
        counts.append(len(informed))
    return counts
