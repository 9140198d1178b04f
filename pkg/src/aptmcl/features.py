"""Structural and behavioral feature views of provenance-graph nodes.

Structural view: 42 edge-type counts per node, the first 21 for incoming
edges and the last 21 for outgoing edges, weighted by multiplicity.

Behavioral view: 20 Boolean sensitivity labels. Each label is a rule over a
node's incident edges and the attributes merged onto its endpoints:

====  =======================================================================
PL0   node is a process
PL1   process has an edge to any socket
PL2   process ``read`` a network-tainted file
PL3   process ``write``/``delete`` a network-tainted file
PL4   process ``image`` path equals the ``path`` of a network-tainted file
PL5   process touched a file whose ``missing`` attr is true
PL6   process ``read`` a sensitive file
PL7   process ``write``/``delete`` a sensitive file
PL8   process ``image`` path matches a sensitive file pattern
PL9   process ``launch``-ed a child whose command is a sensitive instruction
PL10  process ``modify``/``delete``-d a registry key
FL0   node is a file
FL1   file ``path`` matches a sensitive file pattern
FL2   file was ``read`` by a process that has a socket ``send`` edge
FL3   file was ``write``-n by a process that has a socket ``receive`` edge
FL4   file ``hash`` is a known IoC hash
NL0   node is a socket
NL1   socket ``addr`` (or its host part) is a known IoC address
RL0   node is a registry key
RL1   registry ``key`` is a known IoC key
====  =======================================================================

A file is network-tainted when FL3 holds for it. Taint is one hop only.
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from aptmcl.errors import AptMclError
from aptmcl.provenance import N_EDGE_TYPES, NodeType, ProvenanceGraph, edge_type_index

STRUCTURAL_DIM = 2 * N_EDGE_TYPES
BEHAVIORAL_LABELS = (
    [f"PL{i}" for i in range(11)]
    + [f"FL{i}" for i in range(5)]
    + ["NL0", "NL1", "RL0", "RL1"]
)
BEHAVIORAL_DIM = len(BEHAVIORAL_LABELS)
VIEWS = ("structural", "behavioral", "concat")
_LABEL = {name: i for i, name in enumerate(BEHAVIORAL_LABELS)}

_P = NodeType.PROCESS
_LAUNCH = edge_type_index(_P, _P, "launch")
_F_READ = edge_type_index(_P, NodeType.FILE, "read")
_F_WRITE = edge_type_index(_P, NodeType.FILE, "write")
_F_DELETE = edge_type_index(_P, NodeType.FILE, "delete")
_R_MODIFY = edge_type_index(_P, NodeType.REGISTRY, "modify")
_R_DELETE = edge_type_index(_P, NodeType.REGISTRY, "delete")
_S_SEND = edge_type_index(_P, NodeType.SOCKET, "send")
_S_RECEIVE = edge_type_index(_P, NodeType.SOCKET, "receive")
_TRUTHY = {"1", "true", "yes"}


@dataclass
class SensitivityConfig:
    """Dataset-specific lists that drive the behavioral labels."""

    sensitive_file_patterns: list[str] = field(default_factory=list)
    sensitive_instructions: list[str] = field(default_factory=list)
    ioc_addresses: list[str] = field(default_factory=list)
    ioc_file_hashes: list[str] = field(default_factory=list)
    ioc_registry_keys: list[str] = field(default_factory=list)

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not value:
                raise AptMclError(f"sensitivity config field {name!r} must be non-empty")

    @classmethod
    def from_dict(cls, data: dict) -> SensitivityConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise AptMclError(f"unknown sensitivity config keys: {sorted(unknown)}")
        return cls(**{k: [str(x) for x in v] for k, v in data.items()})

    @classmethod
    def load(cls, path: str | Path) -> SensitivityConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def command_name(cmd: str) -> str:
    """Normalise a command line to a bare lower-case program name.

    >>> command_name('"C:\\\\Windows\\\\System32\\\\whoami.exe" /all')
    'whoami'
    """
    parts = cmd.strip().split()
    if not parts:
        return ""
    head = parts[0].strip("\"'")
    head = head.replace("\\", "/").rsplit("/", 1)[-1].lower()
    if head.endswith(".exe"):
        head = head[:-4]
    return head


def _matches_any(path: str, patterns: Iterable[str]) -> bool:
    p = path.lower()
    return any(fnmatch.fnmatchcase(p, pat.lower()) for pat in patterns)


def _check_node(graph: ProvenanceGraph, node: str) -> None:
    if node not in graph.nodes:
        raise KeyError(f"unknown node {node!r}")


def structural_matrix(graph: ProvenanceGraph) -> np.ndarray:
    """Structural view for every node, rows in ``graph.keys`` order."""
    n = graph.n_nodes
    out = np.zeros((n, STRUCTURAL_DIM), dtype=np.int64)
    if graph.n_edges:
        src, dst, etype, mult = graph.edge_arrays
        np.add.at(out, (dst, etype - 1), mult)
        np.add.at(out, (src, etype - 1 + N_EDGE_TYPES), mult)
    return out


def extract_structural(graph: ProvenanceGraph, node: str) -> np.ndarray:
    """42 incoming/outgoing edge-type counts of a single node."""
    _check_node(graph, node)
    vec = np.zeros(STRUCTURAL_DIM, dtype=np.int64)
    for e in graph.edges:
        if e.dst == node:
            vec[e.edge_type - 1] += e.multiplicity
        if e.src == node:
            vec[e.edge_type - 1 + N_EDGE_TYPES] += e.multiplicity
    return vec


def behavioral_matrix(graph: ProvenanceGraph, config: SensitivityConfig) -> np.ndarray:
    """Behavioral view for every node, rows in ``graph.keys`` order."""
    keys = graph.keys
    index = graph.key_index
    nodes = graph.nodes
    out = np.zeros((len(keys), BEHAVIORAL_DIM), dtype=np.int8)

    type_bit = {
        NodeType.PROCESS: _LABEL["PL0"],
        NodeType.FILE: _LABEL["FL0"],
        NodeType.SOCKET: _LABEL["NL0"],
        NodeType.REGISTRY: _LABEL["RL0"],
    }
    for i, k in enumerate(keys):
        out[i, type_bit[nodes[k].type]] = 1

    edges = graph.edges
    receivers = {e.src for e in edges if e.edge_type == _S_RECEIVE}
    senders = {e.src for e in edges if e.edge_type == _S_SEND}
    tainted = {e.dst for e in edges if e.edge_type == _F_WRITE and e.src in receivers}
    uploaded = {e.dst for e in edges if e.edge_type == _F_READ and e.src in senders}
    tainted_paths = {nodes[f].attrs["path"] for f in tainted if "path" in nodes[f].attrs}
    instructions = {command_name(c) for c in config.sensitive_instructions}
    ioc_addr = set(config.ioc_addresses)
    ioc_hash = set(config.ioc_file_hashes)
    ioc_reg = set(config.ioc_registry_keys)

    sensitive: dict[str, bool] = {}
    for k in keys:
        node = nodes[k]
        row = out[index[k]]
        if node.type is NodeType.FILE:
            path = node.attrs.get("path")
            sensitive[k] = path is not None and _matches_any(path, config.sensitive_file_patterns)
            row[_LABEL["FL1"]] = sensitive[k]
            row[_LABEL["FL2"]] = k in uploaded
            row[_LABEL["FL3"]] = k in tainted
            row[_LABEL["FL4"]] = node.attrs.get("hash") in ioc_hash
        elif node.type is NodeType.SOCKET:
            addr = node.attrs.get("addr")
            hit = addr is not None and (addr in ioc_addr or addr.rsplit(":", 1)[0] in ioc_addr)
            row[_LABEL["NL1"]] = hit
        elif node.type is NodeType.REGISTRY:
            row[_LABEL["RL1"]] = node.attrs.get("key") in ioc_reg
        else:
            image = node.attrs.get("image")
            if image is not None:
                row[_LABEL["PL4"]] = image in tainted_paths
                row[_LABEL["PL8"]] = _matches_any(image, config.sensitive_file_patterns)

    for e in edges:
        row = out[index[e.src]]
        dst = nodes[e.dst]
        t = e.edge_type
        if dst.type is NodeType.SOCKET:
            row[_LABEL["PL1"]] = 1
        elif dst.type is NodeType.FILE:
            if t == _F_READ:
                if e.dst in tainted:
                    row[_LABEL["PL2"]] = 1
                if sensitive[e.dst]:
                    row[_LABEL["PL6"]] = 1
            elif t in (_F_WRITE, _F_DELETE):
                if e.dst in tainted:
                    row[_LABEL["PL3"]] = 1
                if sensitive[e.dst]:
                    row[_LABEL["PL7"]] = 1
            if dst.attrs.get("missing", "").lower() in _TRUTHY:
                row[_LABEL["PL5"]] = 1
        elif dst.type is NodeType.REGISTRY:
            if t in (_R_MODIFY, _R_DELETE):
                row[_LABEL["PL10"]] = 1
        elif t == _LAUNCH:
            cmd = dst.attrs.get("cmd") or dst.attrs.get("image") or ""
            if command_name(cmd) in instructions:
                row[_LABEL["PL9"]] = 1
    return out


def extract_behavioral(graph: ProvenanceGraph, node: str, config: SensitivityConfig) -> np.ndarray:
    """20 Boolean sensitivity labels of a single node."""
    _check_node(graph, node)
    return behavioral_matrix(graph, config)[graph.key_index[node]].astype(bool)


def view_matrix(
    graph: ProvenanceGraph, view: str, config: SensitivityConfig | None = None
) -> tuple[dict[str, int], np.ndarray]:
    """Feature matrix for one view with rows in sorted entity-key order.

    ``view`` is ``"structural"`` (n x 42 counts), ``"behavioral"`` (n x 20,
    0/1) or ``"concat"`` (n x 62, the two side by side).
    """
    if graph.n_nodes == 0:
        raise AptMclError("cannot build a feature matrix for an empty graph")
    if view == "structural":
        mat = structural_matrix(graph).astype(np.float64)
    elif view in ("behavioral", "concat"):
        if config is None:
            raise AptMclError(f"view {view!r} needs a SensitivityConfig")
        beh = behavioral_matrix(graph, config).astype(np.float64)
        mat = beh if view == "behavioral" else np.hstack([structural_matrix(graph), beh])
    else:
        raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}")
    return dict(graph.key_index), mat


def save_matrix(path: str | Path, view: str, index: dict[str, int], mat: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, row in sorted(index.items(), key=lambda kv: kv[1]):
            rec = {"key": key, "view": view, "values": [float(v) for v in mat[row]]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_matrix(path: str | Path) -> tuple[str, dict[str, int], np.ndarray]:
    keys, rows, view = [], [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            view = rec["view"]
            keys.append(rec["key"])
            rows.append(rec["values"])
    return view or "", {k: i for i, k in enumerate(keys)}, np.array(rows, dtype=np.float64)
