"""Provenance graph construction from JSON-Lines audit events.

Each event is a (subject, action, object) triad. Entities are identified by
the opaque key carried in the log, so the object of one event and the
subject of another merge into a single node whenever they share a key.
Repeated (src, dst, edge type) events collapse into one edge whose
multiplicity counts the occurrences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from aptmcl.errors import IntegrityError, ParseError, SchemaError

logger = logging.getLogger(__name__)


class NodeType(str, Enum):
    PROCESS = "process"
    FILE = "file"
    REGISTRY = "registry"
    SOCKET = "socket"


# Class index used as the self-supervised target of the encoder.
NODE_TYPE_INDEX = {t: i for i, t in enumerate(NodeType)}

_CATALOGUE: list[tuple[NodeType, tuple[str, ...]]] = [
    (NodeType.PROCESS, ("launch",)),
    (NodeType.FILE, ("create", "read", "write", "close", "delete", "open")),
    (NodeType.REGISTRY, ("open", "query", "enumerate", "modify", "close", "delete")),
    (
        NodeType.SOCKET,
        ("send", "receive", "retransmit", "copy", "connect", "disconnect", "accept", "reconnect"),
    ),
]


@dataclass(frozen=True)
class EdgeType:
    index: int
    subject_type: NodeType
    object_type: NodeType
    action: str

    @property
    def pair(self) -> tuple[NodeType, NodeType]:
        return (self.subject_type, self.object_type)


def _build_edge_types() -> tuple[EdgeType, ...]:
    out = []
    for obj_type, actions in _CATALOGUE:
        for action in actions:
            out.append(EdgeType(len(out) + 1, NodeType.PROCESS, obj_type, action))
    return tuple(out)


EDGE_TYPES: tuple[EdgeType, ...] = _build_edge_types()
N_EDGE_TYPES = len(EDGE_TYPES)
_EDGE_LOOKUP = {(e.subject_type, e.object_type, e.action): e for e in EDGE_TYPES}


def edge_type_index(subject_type: NodeType | str, object_type: NodeType | str, action: str) -> int:
    """Return the canonical 1-based index of a (type pair, action) combination.

    Raises:
        SchemaError: If the combination is not one of the 21 monitored events.
    """
    try:
        key = (NodeType(subject_type), NodeType(object_type), action)
    except ValueError as exc:
        raise SchemaError(f"unknown node type in ({subject_type}, {object_type})") from exc
    try:
        return _EDGE_LOOKUP[key].index
    except KeyError:
        raise SchemaError(
            f"action {action!r} is not valid for {key[0].value}-{key[1].value}"
        ) from None


@dataclass(frozen=True)
class EventRecord:
    timestamp: int
    subject_id: str
    subject_type: NodeType
    action: str
    object_id: str
    object_type: NodeType
    attrs: dict[str, str] = field(default_factory=dict)
    subject_attrs: dict[str, str] = field(default_factory=dict)

    @property
    def edge_type(self) -> int:
        return edge_type_index(self.subject_type, self.object_type, self.action)

    def to_json(self) -> str:
        obj = {
            "ts": self.timestamp,
            "sub": self.subject_id,
            "sub_t": self.subject_type.value,
            "act": self.action,
            "obj": self.object_id,
            "obj_t": self.object_type.value,
        }
        if self.attrs:
            obj["attrs"] = self.attrs
        if self.subject_attrs:
            obj["sub_attrs"] = self.subject_attrs
        return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def _str_map(value, what: str, line_number: int | None) -> dict[str, str]:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ParseError(f"{what} must be an object", line_number)
    return {str(k): str(v) for k, v in value.items()}


def _entity_key(value, what: str, line_number: int | None) -> str:
    if isinstance(value, bool) or not isinstance(value, (str, int)) or value == "":
        raise ParseError(f"field {what!r} must be a non-empty string or integer", line_number)
    return str(value)


def parse_event(line: str, line_number: int | None = None) -> EventRecord:
    """Parse one JSON-Lines event.

    Args:
        line: A JSON object with fields ``ts``, ``sub``, ``sub_t``, ``act``,
            ``obj``, ``obj_t`` and optional ``attrs`` / ``sub_attrs``.
        line_number: Used only to annotate error messages.

    Raises:
        ParseError: Malformed JSON or a missing/mistyped field.
        SchemaError: Unknown node type or an action invalid for the type pair.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", line_number) from exc
    if not isinstance(obj, dict):
        raise ParseError("event must be a JSON object", line_number)
    for name in ("ts", "sub", "sub_t", "act", "obj", "obj_t"):
        if name not in obj:
            raise ParseError(f"missing field {name!r}", line_number)
    ts = obj["ts"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise ParseError("field 'ts' must be an integer", line_number)
    try:
        sub_t = NodeType(obj["sub_t"])
        obj_t = NodeType(obj["obj_t"])
    except ValueError:
        raise SchemaError(
            f"unknown node type pair ({obj['sub_t']!r}, {obj['obj_t']!r})"
        ) from None
    if sub_t is not NodeType.PROCESS:
        raise SchemaError(f"only processes initiate events, got subject type {sub_t.value!r}")
    action = obj["act"]
    if not isinstance(action, str):
        raise ParseError("field 'act' must be a string", line_number)
    edge_type_index(sub_t, obj_t, action)
    return EventRecord(
        timestamp=ts,
        subject_id=_entity_key(obj["sub"], "sub", line_number),
        subject_type=sub_t,
        action=action,
        object_id=_entity_key(obj["obj"], "obj", line_number),
        object_type=obj_t,
        attrs=_str_map(obj.get("attrs"), "attrs", line_number),
        subject_attrs=_str_map(obj.get("sub_attrs"), "sub_attrs", line_number),
    )


def iter_events(lines: Iterable[str]) -> Iterator[EventRecord]:
    """Parse an iterable of JSON-Lines, skipping blank lines."""
    for number, line in enumerate(lines, start=1):
        if line.strip():
            yield parse_event(line, number)


def read_events(path: str | Path) -> list[EventRecord]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_events(fh))


def write_events(events: Iterable[EventRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(ev.to_json())
            fh.write("\n")


@dataclass
class Node:
    type: NodeType
    attrs: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    edge_type: int
    timestamp: int
    multiplicity: int


def _merge_attrs(target: dict[str, str], new: dict[str, str]) -> None:
    # Conflicting values resolve to the smallest string so that the merged
    # result does not depend on event order.
    for k, v in new.items():
        old = target.get(k)
        if old is None or v < old:
            target[k] = v


class ProvenanceGraph:
    """Typed directed multigraph of system entities.

    Nodes map an entity key to its :class:`NodeType` and merged attributes.
    Edges are keyed by (src, dst, edge type index); each keeps the earliest
    timestamp and the number of events it stands for.
    """

    def __init__(self) -> None:
        self.nodes: dict[str, Node] = {}
        self._edges: dict[tuple[str, str, int], list[int]] = {}

    def _add_node(self, key: str, node_type: NodeType, attrs: dict[str, str]) -> None:
        node = self.nodes.get(key)
        if node is None:
            self.nodes[key] = node = Node(node_type)
        elif node.type is not node_type:
            raise IntegrityError(
                f"entity {key!r} observed as both {node.type.value} and {node_type.value}"
            )
        if attrs:
            _merge_attrs(node.attrs, attrs)

    def add_event(self, ev: EventRecord) -> None:
        self._invalidate()
        self._add_node(ev.subject_id, ev.subject_type, ev.subject_attrs)
        self._add_node(ev.object_id, ev.object_type, ev.attrs)
        key = (ev.subject_id, ev.object_id, ev.edge_type)
        slot = self._edges.get(key)
        if slot is None:
            self._edges[key] = [ev.timestamp, 1]
        else:
            slot[0] = min(slot[0], ev.timestamp)
            slot[1] += 1

    def _invalidate(self) -> None:
        for name in ("keys", "key_index", "edge_arrays", "node_type_codes"):
            self.__dict__.pop(name, None)

    @property
    def edges(self) -> list[Edge]:
        return [
            Edge(s, d, t, ts, m)
            for (s, d, t), (ts, m) in sorted(self._edges.items(), key=lambda kv: kv[0])
        ]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self._edges)

    @property
    def total_multiplicity(self) -> int:
        return sum(m for _, m in self._edges.values())

    @cached_property
    def keys(self) -> list[str]:
        """Entity keys in the canonical (sorted) row order."""
        return sorted(self.nodes)

    @cached_property
    def key_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.keys)}

    @cached_property
    def node_type_codes(self) -> np.ndarray:
        return np.array(
            [NODE_TYPE_INDEX[self.nodes[k].type] for k in self.keys], dtype=np.int64
        )

    @cached_property
    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(src row, dst row, edge type index, multiplicity) for every edge."""
        idx = self.key_index
        items = sorted(self._edges.items(), key=lambda kv: kv[0])
        src = np.array([idx[s] for (s, _, _), _ in items], dtype=np.int64)
        dst = np.array([idx[d] for (_, d, _), _ in items], dtype=np.int64)
        etype = np.array([t for (_, _, t), _ in items], dtype=np.int64)
        mult = np.array([m for _, (_, m) in items], dtype=np.int64)
        return src, dst, etype, mult

    def keys_of_type(self, node_type: NodeType) -> list[str]:
        return [k for k in self.keys if self.nodes[k].type is node_type]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProvenanceGraph):
            return NotImplemented
        return self.nodes == other.nodes and self._edges == other._edges

    def __repr__(self) -> str:
        return f"ProvenanceGraph(nodes={self.n_nodes}, edges={self.n_edges})"

    # persistence -----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        """Write ``nodes.jsonl`` and ``edges.jsonl`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "nodes.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for k in self.keys:
                node = self.nodes[k]
                row = {"key": k, "type": node.type.value, "attrs": node.attrs}
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
        with open(directory / "edges.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for e in self.edges:
                row = {
                    "src": e.src,
                    "dst": e.dst,
                    "type": e.edge_type,
                    "ts": e.timestamp,
                    "mult": e.multiplicity,
                }
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> ProvenanceGraph:
        directory = Path(directory)
        g = cls()
        with open(directory / "nodes.jsonl", encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    g.nodes[row["key"]] = Node(NodeType(row["type"]), dict(row["attrs"]))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise ParseError(f"bad node row ({exc})", n) from exc
        by_index = {e.index: e for e in EDGE_TYPES}
        with open(directory / "edges.jsonl", encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    src, dst, t = row["src"], row["dst"], int(row["type"])
                    ts, mult = int(row["ts"]), int(row["mult"])
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise ParseError(f"bad edge row ({exc})", n) from exc
                et = by_index.get(t)
                if et is None:
                    raise SchemaError(f"unknown edge type index {t}")
                for key, want in ((src, et.subject_type), (dst, et.object_type)):
                    node = g.nodes.get(key)
                    if node is None:
                        raise IntegrityError(f"edge endpoint {key!r} missing from nodes table")
                    if node.type is not want:
                        raise IntegrityError(
                            f"edge type {t} expects {want.value} at {key!r}, found {node.type.value}"
                        )
                g._edges[(src, dst, t)] = [ts, mult]
        return g


def build_graph(events: Iterable[EventRecord]) -> ProvenanceGraph:
    """Assemble a provenance graph from a (possibly unordered) event stream.

    Raises:
        IntegrityError: If one entity key appears with two node types.
    """
    g = ProvenanceGraph()
    n = 0
    for ev in events:
        g.add_event(ev)
        n += 1
    logger.info("built provenance graph: %d events -> %d nodes, %d edges", n, g.n_nodes, g.n_edges)
    return g
