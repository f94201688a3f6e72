"""Writes vehicle_position.pb: a one-entity GTFS Realtime FeedMessage encoded
by hand from the protobuf wire format, without any generated code."""

import struct
import sys
from pathlib import Path


def varint(n):
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def key(field, wire):
    return varint(field << 3 | wire)


def vint(field, n):
    return key(field, 0) + varint(n)


def string(field, s):
    data = s.encode() if isinstance(s, str) else s
    return key(field, 2) + varint(len(data)) + data


def f32(field, x):
    return key(field, 5) + struct.pack("<f", x)


header = string(1, "2.0") + vint(2, 0) + vint(3, 1706573497)  # FULL_DATASET

trip = (
    string(1, "60487628")
    + string(2, "19:16:00")
    + string(3, "20240129")
    + vint(4, 0)  # SCHEDULED
    + string(5, "216")
    + vint(6, 1)
)
descriptor = string(1, "y0811") + string(2, "0811")
position = f32(1, 42.2721062) + f32(2, -70.9509277) + f32(3, 0.0)
vehicle = (
    string(1, trip)
    + string(2, position)
    + vint(3, 1)
    + vint(4, 1)  # STOPPED_AT
    + vint(5, 1706573492)
    + string(7, "3265")
    + string(8, descriptor)
    + vint(9, 1)  # MANY_SEATS_AVAILABLE
    + vint(10, 0)
)
entity = string(1, "y0811") + string(4, vehicle)
message = string(1, header) + string(2, entity)

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("vehicle_position.pb")
out.write_bytes(message)
print(f"{out}: {len(message)} bytes")
