"""Flow assembly, length-sequence features and the NDJSON dataset format."""

from __future__ import annotations

import ipaddress
import json
import os
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

DEFAULT_SEQ_LEN = 32
DEFAULT_NORM_DIVISOR = 1500
DEFAULT_IDLE_TIMEOUT = 64.0
MAX_PACKET_LEN = 65535


class IngestError(ValueError):
    """Base class for ingest failures."""


class StreamOrderError(IngestError):
    pass


class DatasetParseError(IngestError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class LabelDictError(IngestError):
    pass


class Transport(str, Enum):
    TCP = "tcp"
    UDP = "udp"


def _endpoint_sort_key(addr: str, port: int) -> tuple[int, bytes, int]:
    ip = ipaddress.ip_address(addr)
    return (ip.version, ip.packed, port)


@dataclass(frozen=True)
class FlowKey:
    """Direction-free five-tuple.

    ``src_*`` always holds the lexicographically smaller (address, port)
    endpoint, so a flow and its reverse share a key.
    """

    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    transport: Transport

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise ValueError(f"port out of range: {port}")

    @classmethod
    def canonical(cls, src_addr, src_port, dst_addr, dst_port, transport) -> tuple["FlowKey", bool]:
        """Return ``(key, swapped)``; ``swapped`` is true when the given
        source endpoint became ``dst_*`` in the canonical key."""
        transport = Transport(transport)
        a = (str(ipaddress.ip_address(src_addr)), int(src_port))
        b = (str(ipaddress.ip_address(dst_addr)), int(dst_port))
        swapped = _endpoint_sort_key(*b) < _endpoint_sort_key(*a)
        if swapped:
            a, b = b, a
        return cls(a[0], b[0], a[1], b[1], transport), swapped

    def canonicalize(self) -> "FlowKey":
        return FlowKey.canonical(self.src_addr, self.src_port, self.dst_addr, self.dst_port, self.transport)[0]


@dataclass
class FlowRecord:
    """One bidirectional flow.

    ``signed_lengths`` are payload sizes, positive from the client (sender
    of the first packet) and negative from the server. Timestamps are
    integer microseconds. ``client_is_src`` records which end of the
    canonical key is the client.
    """

    key: FlowKey | None
    first_ts: int
    last_ts: int
    signed_lengths: list[int]
    label: int | None = None
    client_is_src: bool = True

    def __post_init__(self):
        if not self.signed_lengths:
            raise IngestError("flow has no packets")
        for v in self.signed_lengths:
            if v == 0 or abs(v) > MAX_PACKET_LEN:
                raise IngestError(f"invalid signed length {v}")
        if self.first_ts > self.last_ts:
            raise IngestError("first_ts after last_ts")

    def key_string(self) -> str | None:
        """Render the key client-first as ``proto:client:cport>server:sport``."""
        if self.key is None:
            return None
        k = self.key
        a, b = (k.src_addr, k.src_port), (k.dst_addr, k.dst_port)
        if not self.client_is_src:
            a, b = b, a
        return f"{k.transport.value}:{a[0]}:{a[1]}>{b[0]}:{b[1]}"


def parse_key_string(text: str) -> tuple[FlowKey, bool]:
    """Inverse of :meth:`FlowRecord.key_string`."""
    try:
        proto, rest = text.split(":", 1)
        left, right = rest.split(">")
        caddr, cport = left.rsplit(":", 1)
        saddr, sport = right.rsplit(":", 1)
        key, swapped = FlowKey.canonical(caddr, int(cport), saddr, int(sport), proto)
    except ValueError as exc:
        raise ValueError(f"bad flow key {text!r}: {exc}") from None
    return key, not swapped


@dataclass
class FeatureVector:
    values: np.ndarray
    true_len: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("feature values must be one-dimensional")
        if not 0 <= self.true_len <= self.values.shape[0]:
            raise ValueError("true_len out of range")


@dataclass(frozen=True)
class PacketEvent:
    ts_us: int
    src_addr: str
    src_port: int
    dst_addr: str
    dst_port: int
    transport: Transport
    payload_len: int


@dataclass
class IngestStats:
    packets: int = 0
    zero_payload_dropped: int = 0
    flows_emitted: int = 0
    flows_discarded_empty: int = 0
    packets_skipped: int = 0


@dataclass
class _ActiveFlow:
    key: FlowKey
    client_is_src: bool
    first_ts: int
    last_ts: int
    lengths: list[int] = field(default_factory=list)


def assemble_flows(
    events: Iterable[PacketEvent],
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    stats: IngestStats | None = None,
) -> Iterator[FlowRecord]:
    """Group timestamp-ordered packet events into bidirectional flows.

    A flow closes when the next packet on its key arrives ``idle_timeout``
    seconds or more after the previous one. Zero-payload packets keep a
    flow alive and can define the client direction (a bare SYN does), but
    never enter the length sequence; a flow with no payload packets at all
    is discarded. Closed flows are yielded in order of closing, and
    flows still open at end of stream in order of first packet.
    """
    if idle_timeout <= 0:
        raise ValueError("idle_timeout must be positive")
    if stats is None:
        stats = IngestStats()
    timeout_us = int(round(idle_timeout * 1_000_000))
    table: dict[FlowKey, _ActiveFlow] = {}
    last_seen = None

    def close(flow: _ActiveFlow):
        if not flow.lengths:
            stats.flows_discarded_empty += 1
            return None
        stats.flows_emitted += 1
        return FlowRecord(flow.key, flow.first_ts, flow.last_ts, flow.lengths, None, flow.client_is_src)

    for ev in events:
        if last_seen is not None and ev.ts_us < last_seen:
            raise StreamOrderError(f"timestamp {ev.ts_us} precedes {last_seen}")
        last_seen = ev.ts_us
        stats.packets += 1
        key, swapped = FlowKey.canonical(ev.src_addr, ev.src_port, ev.dst_addr, ev.dst_port, ev.transport)
        flow = table.get(key)
        if flow is not None and ev.ts_us - flow.last_ts >= timeout_us:
            del table[key]
            rec = close(flow)
            if rec is not None:
                yield rec
            flow = None
        if flow is None:
            flow = _ActiveFlow(key, not swapped, ev.ts_us, ev.ts_us)
            table[key] = flow
        flow.last_ts = ev.ts_us
        if ev.payload_len <= 0:
            stats.zero_payload_dropped += 1
            continue
        from_client = (not swapped) == flow.client_is_src
        flow.lengths.append(ev.payload_len if from_client else -ev.payload_len)

    for flow in sorted(table.values(), key=lambda f: (f.first_ts, _endpoint_sort_key(f.key.src_addr, f.key.src_port))):
        rec = close(flow)
        if rec is not None:
            yield rec


def extract_features(
    flow: FlowRecord,
    seq_len: int = DEFAULT_SEQ_LEN,
    norm_divisor: float = DEFAULT_NORM_DIVISOR,
) -> FeatureVector:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    if not flow.signed_lengths:
        raise IngestError("cannot extract features from an empty flow")
    n = min(len(flow.signed_lengths), seq_len)
    values = np.zeros(seq_len)
    values[:n] = np.clip(np.asarray(flow.signed_lengths[:n], dtype=np.float64) / norm_divisor, -1.0, 1.0)
    return FeatureVector(values, n)


def feature_matrix(
    flows: Iterable[FlowRecord],
    seq_len: int = DEFAULT_SEQ_LEN,
    norm_divisor: float = DEFAULT_NORM_DIVISOR,
) -> np.ndarray:
    rows = [extract_features(f, seq_len, norm_divisor).values for f in flows]
    if not rows:
        return np.zeros((0, seq_len))
    return np.stack(rows)


class LabelDict:
    """Bidirectional label string <-> class id mapping with dense ids."""

    def __init__(self, mapping: dict[str, int]):
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise LabelDictError(f"label ids must be unique and dense from 0, got {ids}")
        self._to_id = dict(mapping)
        self._names = [None] * len(ids)
        for name, i in mapping.items():
            self._names[i] = name

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "LabelDict":
        return cls({name: i for i, name in enumerate(sorted(set(labels)))})

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._to_id

    def __eq__(self, other):
        return isinstance(other, LabelDict) and self._to_id == other._to_id

    def id(self, name: str) -> int:
        return self._to_id[name]

    def name(self, class_id: int) -> str:
        return self._names[class_id]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def to_dict(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self._names)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LabelDict":
        def no_dupes(pairs):
            seen = {}
            for k, v in pairs:
                if k in seen:
                    raise LabelDictError(f"duplicate label {k!r} in {path}")
                seen[k] = v
            return seen

        mapping = json.loads(Path(path).read_text(), object_pairs_hook=no_dupes)
        return cls(mapping)


def _record_from_json(obj, lineno: int, labels: LabelDict | None) -> tuple[FlowRecord, str | None]:
    if not isinstance(obj, dict):
        raise DatasetParseError(lineno, "record is not a JSON object")
    if "lengths" not in obj:
        raise DatasetParseError(lineno, 'missing "lengths" field')
    lengths = obj["lengths"]
    if not isinstance(lengths, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in lengths):
        raise DatasetParseError(lineno, '"lengths" must be a list of integers')
    label_name = obj.get("label")
    label = None
    if label_name is not None:
        if labels is not None and label_name not in labels:
            raise DatasetParseError(lineno, f"unknown label {label_name!r}")
    ts_us = int(round(float(obj.get("ts", 0.0)) * 1_000_000))
    key, client_is_src = None, True
    if obj.get("key") is not None:
        try:
            key, client_is_src = parse_key_string(obj["key"])
        except ValueError as exc:
            raise DatasetParseError(lineno, str(exc)) from None
    try:
        rec = FlowRecord(key, ts_us, ts_us, list(lengths), label, client_is_src)
    except IngestError as exc:
        raise DatasetParseError(lineno, str(exc)) from None
    return rec, label_name


def load_ndjson(path, labels: LabelDict | None = None) -> tuple[list[FlowRecord], LabelDict]:
    """Parse an NDJSON flow dataset.

    With ``labels`` given, every label must already be in it. Otherwise a
    dictionary is built from the labels present (sorted, ids from 0).
    Blank lines are skipped.
    """
    parsed: list[tuple[FlowRecord, str | None]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(lineno, f"invalid JSON: {exc.msg}") from None
            parsed.append(_record_from_json(obj, lineno, labels))
    if labels is None:
        labels = LabelDict.from_labels(name for _, name in parsed if name is not None)
    records = []
    for rec, name in parsed:
        if name is not None:
            rec.label = labels.id(name)
        records.append(rec)
    return records, labels


def record_to_json(rec: FlowRecord, labels: LabelDict | None, **extra) -> str:
    obj: dict = {"lengths": list(rec.signed_lengths)}
    if rec.label is not None:
        if labels is None:
            raise ValueError("labelled record needs a label dictionary")
        obj["label"] = labels.name(rec.label)
    obj["ts"] = rec.first_ts / 1_000_000
    key = rec.key_string()
    if key is not None:
        obj["key"] = key
    obj.update(extra)
    return json.dumps(obj, separators=(",", ":"))


def write_ndjson(records: Iterable[FlowRecord], path, labels: LabelDict | None = None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec, labels) + "\n")
    os.replace(tmp, path)
