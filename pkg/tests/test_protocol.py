import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sna.domain import Measurement, Recommendation, SamplingInterval
from sna.harness.protocol import MESSAGE_TYPES, Event, ProtocolError, Subscribe, decode, encode, from_wire, to_wire
from sna.nodes import Ack, ErrorReply, ReprogramCommand

ids = st.integers(1, 2**31)
times = st.integers(0, 2**40)
temps = st.floats(-60, 80, allow_nan=False, allow_infinity=False)


@st.composite
def measurements(draw, received=None):
    sensed = draw(times)
    rec = draw(st.none() | st.integers(0, 10**6)) if received is None else draw(st.integers(0, 10**6))
    return Measurement(
        node=draw(ids), seq=draw(ids), value=draw(temps), scheduled_at=draw(times), sensed_at=sensed,
        received_at=None if rec is None else sensed + rec,
        interval_s=draw(st.none() | st.sampled_from([30, 60, 120, 240, 480])),
    )


messages = st.one_of(
    measurements(),
    measurements(received=True).map(Event),
    st.one_of(st.none(), st.frozensets(ids, max_size=5)).map(Subscribe),
    st.builds(Recommendation, ids, st.sampled_from(SamplingInterval.all()), ids),
    st.builds(ReprogramCommand, ids, ids, st.sampled_from([30, 60, 120, 240, 480, 45])),
    st.builds(Ack, ids, ids, st.sampled_from([30, 60, 120, 240, 480])),
    st.builds(ErrorReply, st.text(max_size=40), st.none() | ids, st.none() | ids),
)


@given(messages)
def test_roundtrip(msg):
    frame = encode(msg)
    assert frame.endswith(b"\n") and frame.count(b"\n") == 1
    back = decode(frame)
    if isinstance(msg, ReprogramCommand):
        # issued_at is dashboard-local and not carried on the wire.
        assert (back.cmd_id, back.node, back.interval_s) == (msg.cmd_id, msg.node, msg.interval_s)
    else:
        assert back == msg
    assert to_wire(back)["type"] in MESSAGE_TYPES


@given(messages, st.dictionaries(st.text(min_size=1, max_size=8).filter(lambda k: k != "type"), st.integers(),
                                 max_size=3))
def test_unknown_fields_ignored(msg, extra):
    obj = to_wire(msg)
    merged = {**{k: v for k, v in extra.items() if k not in obj}, **obj}
    assert to_wire(from_wire(merged)) == obj


def test_field_names():
    m = Measurement(2, 7, 21.5, 210_000, 209_010, 209_060, 30)
    assert json.loads(encode(m)) == {"type": "measurement", "node": 2, "seq": 7, "value_c": 21.5,
                                     "scheduled_at": 210_000, "sensed_at": 209_010, "received_at": 209_060,
                                     "interval_s": 30}
    assert json.loads(encode(Subscribe())) == {"type": "subscribe", "filter": "all"}
    assert json.loads(encode(Subscribe(frozenset({5, 2})))) == {"type": "subscribe", "filter": [2, 5]}


@pytest.mark.parametrize("frame", [
    b"not json\n",
    b"[1,2]\n",
    b'{"type":"teleport"}\n',
    b'{"node":1}\n',
    b'{"type":"measurement","node":1,"seq":1,"value_c":"hot","scheduled_at":0,"sensed_at":0}\n',
    b'{"type":"measurement","node":1,"seq":1,"value_c":20,"scheduled_at":0}\n',
    b'{"type":"measurement","node":1,"seq":1.5,"value_c":20,"scheduled_at":0,"sensed_at":0}\n',
    b'{"type":"event","node":1,"seq":1,"value_c":20,"scheduled_at":0,"sensed_at":0}\n',
    b'{"type":"recommendation","node":1,"interval_s":45,"seq":1}\n',
    b'{"type":"subscribe","filter":"some"}\n',
    b'{"type":"error","reason":5}\n',
    b"\xff\xfe\n",
])
def test_malformed(frame):
    with pytest.raises(ProtocolError):
        decode(frame)
