"""Topic-addressed publish/subscribe message bus.

The in-process broker is the default backend: exactly-once, per-publisher
FIFO delivery to every matching subscription, with MQTT-style topics and a
trailing multi-level wildcard. An adapter speaking to an external MQTT
broker can be swapped in behind the same interface.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field

DEFAULT_MAX_PAYLOAD = 64 * 1024

CHANNELS = ("agent-chat", "user-chat", "user-survey")

_FORBIDDEN_ID_CHARS = set("/#+")


class BusError(Exception):
    pass


class InvalidTopic(BusError):
    pass


class PayloadTooLarge(BusError):
    pass


def _check_id(value: str, what: str) -> None:
    if not value:
        raise InvalidTopic(f"{what} must be non-empty")
    bad = _FORBIDDEN_ID_CHARS.intersection(value)
    if bad:
        raise InvalidTopic(f"{what} {value!r} contains forbidden characters {sorted(bad)}")


def topic_for(exp_id: str, agent_id: str, channel: str) -> str:
    """Build the canonical per-agent topic string."""
    _check_id(exp_id, "experiment id")
    _check_id(agent_id, "agent id")
    if channel not in CHANNELS:
        raise InvalidTopic(f"unknown channel {channel!r}; expected one of {CHANNELS}")
    return f"exps/{exp_id}/agents/{agent_id}/{channel}"


def agent_prefix_pattern(exp_id: str, agent_id: str) -> "TopicPattern":
    """Pattern covering every channel addressed to one agent."""
    _check_id(exp_id, "experiment id")
    _check_id(agent_id, "agent id")
    return TopicPattern.parse(f"exps/{exp_id}/agents/{agent_id}/#")


def parse_topic(topic: str) -> tuple[str, str, str]:
    """Split a per-agent topic back into (exp_id, agent_id, channel)."""
    parts = topic.split("/")
    if len(parts) != 5 or parts[0] != "exps" or parts[2] != "agents":
        raise InvalidTopic(f"not a per-agent topic: {topic!r}")
    return parts[1], parts[3], parts[4]


@dataclass(frozen=True)
class TopicPattern:
    """Literal topic segments with an optional trailing multi-level wildcard."""

    segments: tuple[str, ...]
    wildcard: bool = False

    @classmethod
    def parse(cls, text: str) -> "TopicPattern":
        parts = text.split("/")
        wildcard = parts[-1] == "#"
        if wildcard:
            parts = parts[:-1]
        for p in parts:
            if not p:
                raise InvalidTopic(f"empty segment in pattern {text!r}")
            if "#" in p or "+" in p:
                raise InvalidTopic(f"wildcard only allowed as a final '#' segment: {text!r}")
        if not parts:
            raise InvalidTopic("pattern must have at least one literal segment")
        return cls(segments=tuple(parts), wildcard=wildcard)

    def matches(self, topic: str) -> bool:
        parts = tuple(topic.split("/"))
        if self.wildcard:
            return parts[: len(self.segments)] == self.segments
        return parts == self.segments

    def __str__(self) -> str:
        base = "/".join(self.segments)
        return base + "/#" if self.wildcard else base


def matches(pattern: TopicPattern, topic: str) -> bool:
    return pattern.matches(topic)


@dataclass
class Envelope:
    """One bus message. seq < 0 means "assign from the sender's counter"."""

    topic: str
    payload: bytes
    sender_id: str
    seq: int = -1
    sim_time: float = 0.0


@dataclass
class Receipt:
    delivered_count: int
    seq: int


class Subscription:
    """Receives matching envelopes exactly once, in per-publisher order.

    Pull-style consumption via drain()/pop(); alternatively a callback is
    invoked synchronously on the publisher's thread.
    """

    def __init__(self, bus: "InProcessBus", pattern: TopicPattern, consumer_id: str,
                 callback=None):
        self._bus = bus
        self.pattern = pattern
        self.consumer_id = consumer_id
        self._callback = callback
        self._queue: deque[Envelope] = deque()
        self.closed = False

    def _deliver(self, env: Envelope) -> None:
        if self._callback is not None:
            self._callback(env)
        else:
            self._queue.append(env)

    def drain(self) -> list[Envelope]:
        """Remove and return all queued envelopes."""
        out = []
        while True:
            try:
                out.append(self._queue.popleft())
            except IndexError:
                return out

    def pop(self) -> Envelope | None:
        try:
            return self._queue.popleft()
        except IndexError:
            return None

    def __len__(self) -> int:
        return len(self._queue)

    def close(self) -> None:
        self._bus.unsubscribe(self)


class InProcessBus:
    """Default broker: routes inside the process, no persistence, no replay.

    Routing is O(topic depth): exact-topic subscriptions live in one table,
    wildcard subscriptions are indexed by their literal prefix.
    """

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.max_payload = max_payload
        self._lock = threading.RLock()
        self._exact: dict[str, list[Subscription]] = {}
        self._prefix: dict[str, list[Subscription]] = {}
        self._seq: dict[str, int] = {}
        # Resolved topic -> targets, rebuilt lazily after any (un)subscribe.
        self._routes: dict[str, tuple[Subscription, ...]] = {}
        self.published_count = 0
        self.delivered_count = 0

    def subscribe(self, pattern: TopicPattern | str, consumer_id: str = "",
                  callback=None) -> Subscription:
        if isinstance(pattern, str):
            pattern = TopicPattern.parse(pattern)
        with self._lock:
            table = self._prefix if pattern.wildcard else self._exact
            key = "/".join(pattern.segments)
            subs = table.setdefault(key, [])
            if consumer_id:
                for existing in subs:
                    if existing.consumer_id == consumer_id and existing.pattern == pattern:
                        return existing
            sub = Subscription(self, pattern, consumer_id, callback)
            subs.append(sub)
            self._routes.clear()
            return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            table = self._prefix if sub.pattern.wildcard else self._exact
            key = "/".join(sub.pattern.segments)
            subs = table.get(key, [])
            if sub in subs:
                subs.remove(sub)
            self._routes.clear()
            sub.closed = True

    def _resolve(self, topic: str) -> tuple[Subscription, ...]:
        targets = list(self._exact.get(topic, ()))
        prefix = topic
        while True:
            targets.extend(self._prefix.get(prefix, ()))
            cut = prefix.rfind("/")
            if cut < 0:
                break
            prefix = prefix[:cut]
        resolved = tuple(targets)
        self._routes[topic] = resolved
        return resolved

    def publish(self, env: Envelope) -> Receipt:
        if len(env.payload) > self.max_payload:
            raise PayloadTooLarge(
                f"payload of {len(env.payload)} bytes exceeds cap {self.max_payload}")
        if not env.topic or env.topic.startswith("/"):
            raise InvalidTopic(f"bad topic {env.topic!r}")
        with self._lock:
            if env.seq < 0:
                env.seq = self._seq.get(env.sender_id, 0) + 1
            self._seq[env.sender_id] = env.seq
            targets = self._routes.get(env.topic)
            if targets is None:
                targets = self._resolve(env.topic)
            self.published_count += 1
            self.delivered_count += len(targets)
            for sub in targets:
                sub._deliver(env)
        return Receipt(delivered_count=len(targets), seq=env.seq)

    def send(self, topic: str, payload: bytes, sender_id: str, sim_time: float = 0.0) -> Receipt:
        return self.publish(Envelope(topic=topic, payload=payload, sender_id=sender_id,
                                     sim_time=sim_time))


class MqttBridge:
    """Adapter exposing the same publish/subscribe surface over MQTT 3.1.1.

    Topic strings are passed through bit-exact. The client object must offer
    paho-style publish/subscribe/message_callback_add; by default paho.mqtt
    is imported lazily so the in-process broker carries no MQTT dependency.
    """

    def __init__(self, host: str = "localhost", port: int = 1883, client=None):
        if client is None:
            import paho.mqtt.client as mqtt  # optional dependency

            client = mqtt.Client()
            client.connect(host, port)
            client.loop_start()
        self._client = client
        self._seq: dict[str, int] = {}
        self._lock = threading.Lock()

    def publish(self, env: Envelope) -> Receipt:
        with self._lock:
            if env.seq < 0:
                env.seq = self._seq.get(env.sender_id, 0) + 1
            self._seq[env.sender_id] = env.seq
        self._client.publish(env.topic, env.payload)
        # The wire protocol gives no fan-out count back to the publisher.
        return Receipt(delivered_count=-1, seq=env.seq)

    def subscribe(self, pattern: TopicPattern | str, consumer_id: str = "",
                  callback=None) -> Subscription:
        if isinstance(pattern, str):
            pattern = TopicPattern.parse(pattern)
        sub = Subscription(self, pattern, consumer_id, callback)
        topic_filter = str(pattern)
        self._client.subscribe(topic_filter)
        self._client.message_callback_add(
            topic_filter,
            lambda client, userdata, msg: sub._deliver(
                Envelope(topic=msg.topic, payload=msg.payload, sender_id="", seq=-1)),
        )
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        self._client.unsubscribe(str(sub.pattern))
        sub.closed = True
