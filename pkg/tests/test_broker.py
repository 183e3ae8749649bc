import random
import socket
import threading
import time

import pytest

from twinet.client import BrokerUnreachableError, MqttClient
from twinet.mqtt import TopicFilter, topic_matches, validate_filter


def make_client(broker, name, **kw):
    client = MqttClient(name, broker.host, broker.port, **kw)
    client.connect()
    return client


class TestSessionHandling:
    def test_connect_subscribe_ping(self, broker):
        c = make_client(broker, "ue1")
        c.subscribe("twin/#", 0)
        c.ping()
        c.close()

    def test_first_packet_must_be_connect(self, broker):
        from twinet.mqtt import encode_packet, PingReq
        sock = socket.create_connection((broker.host, broker.port))
        sock.sendall(encode_packet(PingReq()))
        sock.settimeout(2.0)
        assert sock.recv(16) == b""  # broker closes without responding
        sock.close()

    def test_duplicate_client_id_evicts_old_session(self, broker):
        old = make_client(broker, "dup")
        old.subscribe("t/#", 0)
        new = make_client(broker, "dup")
        new.subscribe("t/#", 0)
        pub = make_client(broker, "pub")
        pub.publish("t/x", b"m", qos=1)
        assert new.poll(timeout=2.0) is not None
        # the evicted session's socket is closed; it receives nothing more
        assert old.poll(timeout=0.3) is None
        for c in (old, new, pub):
            c.close()


class TestRouting:
    def test_single_delivery_via_hash(self, broker):
        sub = make_client(broker, "sub")
        sub.subscribe("twin/#", 0)
        pub = make_client(broker, "pub")
        pub.publish("twin/state", b"hello")
        topic, payload, _ = sub.poll(timeout=2.0)
        assert (topic, payload) == ("twin/state", b"hello")
        assert sub.poll(timeout=0.2) is None
        sub.close(); pub.close()

    def test_overlapping_filters_deliver_once(self, broker):
        sub = make_client(broker, "sub")
        sub.subscribe("a/+", 0)
        sub.subscribe("a/b", 0)
        pub = make_client(broker, "pub")
        pub.publish("a/b", b"x")
        assert sub.poll(timeout=2.0) is not None
        assert sub.poll(timeout=0.3) is None
        sub.close(); pub.close()

    def test_no_match_still_acked_at_qos1(self, broker):
        pub = make_client(broker, "pub")
        pub.publish("nobody/listens", b"x", qos=1)  # returns only after PubAck
        pub.close()

    def test_fifo_per_topic(self, broker):
        sub = make_client(broker, "sub")
        sub.subscribe("seq/#", 1)
        pub = make_client(broker, "pub")
        count = 200
        for i in range(count):
            pub.publish("seq/t", str(i).encode(), qos=1)
        got = [sub.poll(timeout=2.0) for _ in range(count)]
        assert [int(p) for _, p, _ in got] == list(range(count))
        sub.close(); pub.close()

    def test_random_topologies_against_naive_matcher(self, broker):
        rng = random.Random(11)
        filters = ["a/#", "a/+", "a/b", "+/b", "b/#", "a/b/c"]
        subs = []
        for i in range(4):
            chosen = rng.sample(filters, 2)
            c = make_client(broker, f"s{i}")
            for f in chosen:
                c.subscribe(f, 0)
            subs.append((c, [validate_filter(f) for f in chosen]))
        pub = make_client(broker, "pub")
        topics = ["a", "a/b", "a/b/c", "b/x", "c"]
        published = [random.Random(13).choice(topics) for _ in range(40)]
        for i, topic in enumerate(published):
            pub.publish(topic, str(i).encode(), qos=1)
        time.sleep(0.3)
        pub.close()
        for c, fs in subs:
            received = []
            while (item := c.poll(timeout=0.2)) is not None:
                received.append(item[0])
            expected = [t for t in published
                        if any(topic_matches(f, t) for f in fs)]
            assert received == expected
            c.close()


class TestEndToEnd:
    def test_three_subscribers_receive_all_in_order(self, broker):
        subs = []
        for i in range(3):
            c = make_client(broker, f"sub{i}")
            c.subscribe("stream/#", 1)
            subs.append(c)
        pub = make_client(broker, "pub")
        n = 1000
        for i in range(n):
            pub.publish("stream/data", i.to_bytes(4, "big"), qos=1)
        for c in subs:
            values = []
            for _ in range(n):
                item = c.poll(timeout=5.0)
                assert item is not None
                values.append(int.from_bytes(item[1], "big"))
            assert values == list(range(n))
            c.close()
        pub.close()

    def test_disconnect_midstream_leaves_others_unaffected(self, broker):
        stable = make_client(broker, "stable")
        stable.subscribe("f/#", 1)
        flaky = make_client(broker, "flaky")
        flaky.subscribe("f/#", 1)
        pub = make_client(broker, "pub")
        for i in range(50):
            pub.publish("f/t", str(i).encode(), qos=1)
            if i == 20:
                flaky._teardown()  # abrupt socket death, no Disconnect
        received = [stable.poll(timeout=2.0) for _ in range(50)]
        assert all(item is not None for item in received)
        stable.close(); pub.close()

    def test_zero_clients_idle_counters(self):
        from twinet.broker import Broker
        with Broker(port=0) as b:
            time.sleep(0.05)
            assert b.stats["publishes_routed"] == 0
            assert b.stats["connections"] == 0


class TestLifecycle:
    def test_bind_failure_reported(self, broker):
        from twinet.broker import Broker
        clash = Broker(host=broker.host, port=broker.port)
        with pytest.raises(OSError):
            clash.start()

    def test_stats_csv_on_shutdown(self, tmp_path):
        from twinet.broker import Broker
        path = tmp_path / "stats.csv"
        with Broker(port=0, stats_csv=str(path)) as b:
            c = make_client(b, "c")
            c.publish("x", b"1")
            c.close()
            time.sleep(0.1)
        text = path.read_text()
        assert text.startswith("counter,value")
        assert "publishes_routed,1" in text

    def test_unreachable_broker_raises_after_retries(self):
        client = MqttClient("x", "127.0.0.1", 1, connect_retries=2,
                            backoff_s=0.01)
        with pytest.raises(BrokerUnreachableError):
            client.connect()
