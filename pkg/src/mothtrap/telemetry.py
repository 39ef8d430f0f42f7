"""Per-cycle trap report: an 11-byte little-endian payload with a CRC-8 trailer.

Byte layout::

    0-1   trap_id            u16
    2     flags              u8, bit 0 = alert
    3     moth_count         u8 (saturating)
    4     insect_count       u8 (saturating)
    5     battery_soc_pct    u8, 0..100
    6-9   timestamp          u32, minutes since the Unix epoch
    10    CRC-8 over bytes 0-9 (poly 0x07, init 0x00, no reflection, no xorout)
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

PAYLOAD_SIZE = 11
_BODY = struct.Struct("<HBBBBI")
ALERT_THRESHOLD = 2
ALERT_WINDOW_MIN = 7 * 24 * 60


class TelemetryError(ValueError):
    pass


class LengthError(TelemetryError):
    pass


class IntegrityError(TelemetryError):
    pass


def _crc_table(poly: int = 0x07) -> tuple[int, ...]:
    table = []
    for b in range(256):
        c = b
        for _ in range(8):
            c = ((c << 1) ^ poly) & 0xFF if c & 0x80 else (c << 1) & 0xFF
        table.append(c)
    return tuple(table)


_TABLE = _crc_table()


def crc8(data: bytes, init: int = 0x00) -> int:
    c = init
    for b in data:
        c = _TABLE[c ^ b]
    return c


def saturate(n: int) -> int:
    return max(0, min(255, int(n)))


@dataclass(frozen=True)
class TrapReport:
    trap_id: int
    timestamp_min: int
    moth_count: int
    insect_count: int
    battery_soc_pct: int
    alert: bool = False

    @classmethod
    def from_counts(cls, trap_id: int, timestamp_min: int, moths: int, insects: int,
                    soc: float, alert: bool = False) -> "TrapReport":
        """Build a report from raw counts (saturated at 255) and a SoC fraction."""
        pct = int(round(min(1.0, max(0.0, soc)) * 100))
        return cls(trap_id, timestamp_min, saturate(moths), saturate(insects), pct, bool(alert))

    def validate(self) -> None:
        checks = (
            ("trap_id", self.trap_id, 0xFFFF),
            ("timestamp_min", self.timestamp_min, 0xFFFFFFFF),
            ("moth_count", self.moth_count, 255),
            ("insect_count", self.insect_count, 255),
            ("battery_soc_pct", self.battery_soc_pct, 100),
        )
        for name, v, hi in checks:
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= hi:
                raise TelemetryError(f"{name}={v!r} outside 0..{hi}")

    def __str__(self):
        flag = " ALERT" if self.alert else ""
        return (f"trap {self.trap_id} @ {self.timestamp_min} min: {self.moth_count} codling moth, "
                f"{self.insect_count} other, battery {self.battery_soc_pct}%{flag}")


def encode(report: TrapReport) -> bytes:
    report.validate()
    body = _BODY.pack(report.trap_id, 1 if report.alert else 0, report.moth_count,
                      report.insect_count, report.battery_soc_pct, report.timestamp_min)
    return body + bytes([crc8(body)])


def decode(payload: bytes) -> TrapReport:
    payload = bytes(payload)
    if len(payload) != PAYLOAD_SIZE:
        raise LengthError(f"payload must be {PAYLOAD_SIZE} bytes, got {len(payload)}")
    body, crc = payload[:-1], payload[-1]
    if crc8(body) != crc:
        raise IntegrityError(f"CRC mismatch: computed 0x{crc8(body):02x}, payload has 0x{crc:02x}")
    trap_id, flags, moths, insects, soc, ts = _BODY.unpack(body)
    if flags & ~1:
        raise IntegrityError(f"reserved flag bits set: 0x{flags:02x}")
    if soc > 100:
        raise IntegrityError(f"battery_soc_pct {soc} > 100")
    return TrapReport(trap_id, ts, moths, insects, soc, bool(flags & 1))


def to_hex(payload: bytes) -> str:
    return payload.hex()


def from_hex(text: str) -> bytes:
    cleaned = "".join(text.split()).replace(":", "").replace("·", "")
    try:
        return bytes.fromhex(cleaned)
    except ValueError:
        raise TelemetryError(f"not a hex string: {text!r}") from None


def write_report(report: TrapReport, path) -> bytes:
    payload = encode(report)
    Path(path).write_bytes(payload)
    return payload


def read_report(path) -> TrapReport:
    return decode(Path(path).read_bytes())


def alert_rule(history, window_min: int = ALERT_WINDOW_MIN, threshold: int = ALERT_THRESHOLD) -> bool:
    """True iff the moths counted within some trailing window reach ``threshold``.

    ``history`` is a sequence of ``(timestamp_min, moth_count)`` with
    nondecreasing timestamps.  A window ending at detection ``j`` covers the
    detections ``i`` with ``t_j - t_i < window_min``.
    """
    q: deque[tuple[int, int]] = deque()
    total = 0
    last = None
    for t, n in history:
        if last is not None and t < last:
            raise ValueError("timestamps must be nondecreasing")
        last = t
        q.append((t, n))
        total += n
        while q and t - q[0][0] >= window_min:
            total -= q.popleft()[1]
        if total >= threshold:
            return True
    return False
