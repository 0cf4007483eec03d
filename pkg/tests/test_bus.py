import threading

import pytest

from socsim.bus import (Envelope, InProcessBus, InvalidTopic, MqttBridge, PayloadTooLarge,
                        TopicPattern, agent_prefix_pattern, matches, parse_topic, topic_for)


def test_topic_strings_are_byte_exact():
    assert topic_for("e1", "a1", "agent-chat") == "exps/e1/agents/a1/agent-chat"
    assert topic_for("e1", "a1", "user-survey") == "exps/e1/agents/a1/user-survey"
    assert topic_for("e1", "a1", "user-chat") == "exps/e1/agents/a1/user-chat"


def test_topic_round_trip():
    topic = topic_for("exp-9", "agent-07", "agent-chat")
    assert parse_topic(topic) == ("exp-9", "agent-07", "agent-chat")


@pytest.mark.parametrize("bad", ["", "a/b", "x#y", "p+q"])
def test_invalid_ids_rejected(bad):
    with pytest.raises(InvalidTopic):
        topic_for(bad, "a1", "agent-chat")
    with pytest.raises(InvalidTopic):
        topic_for("e1", bad, "agent-chat")


def test_unknown_channel_rejected():
    with pytest.raises(InvalidTopic):
        topic_for("e1", "a1", "other")


def test_pattern_matching():
    pattern = TopicPattern.parse("exps/e1/agents/a1/#")
    assert matches(pattern, "exps/e1/agents/a1/user-chat")
    assert not matches(pattern, "exps/e1/agents/a2/user-chat")
    exact = TopicPattern.parse("exps/e1/agents/a1/user-chat")
    assert matches(exact, "exps/e1/agents/a1/user-chat")
    # The multi-level wildcard also covers the parent itself.
    assert matches(pattern, "exps/e1/agents/a1")
    assert not matches(exact, "exps/e1/agents/a1")


def test_wildcard_only_trailing():
    with pytest.raises(InvalidTopic):
        TopicPattern.parse("exps/#/agents")
    with pytest.raises(InvalidTopic):
        TopicPattern.parse("exps/+/agents/a1")


def test_publish_delivery_counts():
    bus = InProcessBus()
    sub = bus.subscribe("room/1")
    receipt = bus.send("room/1", b"hi", "s1")
    assert receipt.delivered_count == 1
    assert bus.send("room/2", b"hi", "s1").delivered_count == 0
    assert [e.payload for e in sub.drain()] == [b"hi"]


def test_fan_out_and_no_replay():
    bus = InProcessBus()
    early = bus.send("t", b"1", "s")
    assert early.delivered_count == 0
    a = bus.subscribe("t", consumer_id="ca")
    b = bus.subscribe("t", consumer_id="cb")
    bus.send("t", b"2", "s")
    assert len(a) == 1 and len(b) == 1  # fan-out, and no replay of b"1"


def test_duplicate_subscription_idempotent():
    bus = InProcessBus()
    s1 = bus.subscribe("a/b/#", consumer_id="me")
    s2 = bus.subscribe("a/b/#", consumer_id="me")
    assert s1 is s2
    bus.send("a/b/c", b"x", "s")
    assert len(s1) == 1


def test_payload_cap():
    bus = InProcessBus(max_payload=16)
    bus.subscribe("t")
    with pytest.raises(PayloadTooLarge):
        bus.send("t", b"x" * 17, "s")


def test_per_publisher_fifo_many_publishers():
    # 10 publishers x 1,000 messages each, one subscriber: all 10,000 arrive,
    # exactly once, in per-publisher seq order.
    bus = InProcessBus()
    sub = bus.subscribe(agent_prefix_pattern("e", "a0"), consumer_id="a0")
    topic = topic_for("e", "a0", "agent-chat")

    def pump(p):
        for _ in range(1000):
            bus.publish(Envelope(topic=topic, payload=b"m", sender_id=f"p{p}"))

    threads = [threading.Thread(target=pump, args=(p,)) for p in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = sub.drain()
    assert len(got) == 10000
    last_seq: dict[str, int] = {}
    for env in got:
        assert env.seq == last_seq.get(env.sender_id, 0) + 1
        last_seq[env.sender_id] = env.seq
    assert all(v == 1000 for v in last_seq.values())


class _FakeMqttClient:
    def __init__(self):
        self.published = []
        self.subscriptions = []
        self.callbacks = {}

    def publish(self, topic, payload):
        self.published.append((topic, payload))

    def subscribe(self, topic_filter):
        self.subscriptions.append(topic_filter)

    def message_callback_add(self, topic_filter, cb):
        self.callbacks[topic_filter] = cb

    def unsubscribe(self, topic_filter):
        self.subscriptions.remove(topic_filter)


def test_mqtt_bridge_passes_topics_through():
    client = _FakeMqttClient()
    bridge = MqttBridge(client=client)
    bridge.publish(Envelope(topic=topic_for("e1", "a1", "agent-chat"),
                            payload=b"hello", sender_id="a9"))
    assert client.published == [("exps/e1/agents/a1/agent-chat", b"hello")]
    sub = bridge.subscribe("exps/e1/agents/a1/#")
    assert client.subscriptions == ["exps/e1/agents/a1/#"]

    class Msg:
        topic = "exps/e1/agents/a1/user-chat"
        payload = b"q"

    client.callbacks["exps/e1/agents/a1/#"](client, None, Msg())
    assert [e.payload for e in sub.drain()] == [b"q"]
