"""Synthetic audit-event scenarios with planted attacks.

Benign background is drawn from a handful of process templates (launcher,
editor, browser, service daemon, backup job, updater, shell and the short
commands shells spawn). Two attack plants can be mixed in:

``ransomware_burst``
    A process that reads, rewrites and deletes hundreds of user documents and
    modifies dozens of registry keys. It stands out structurally but carries
    almost no sensitive labels.
``collection_exfiltration``
    An implant that refreshes its own binary from a C2 endpoint, plants an
    SSH key, runs reconnaissance commands, reads sensitive files, dumps them
    to a log and ships them to the same endpoint. Its edge counts look like
    a benign updater or backup job; its labels do not.

Output is fully determined by the :class:`ScenarioSpec` (seed included).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from aptmcl.errors import AptMclError
from aptmcl.features import SensitivityConfig
from aptmcl.provenance import EventRecord, NodeType, write_events

SCENARIOS = ("benign_background", "ransomware_burst", "collection_exfiltration", "mixed")
MIN_BENIGN_PROCESSES = 20

SENSITIVE_INSTRUCTIONS = ["whoami", "systeminfo", "tasklist", "netstat", "ipconfig", "net"]
BENIGN_COMMANDS = ["ls", "grep", "git", "python", "ping", "cat", "make", "tar", "ssh-add", "du"]
IOC_ADDRESSES = [f"185.220.101.{i}" for i in range(10, 18)]
IOC_HASHES = [f"{i:02x}" * 16 for i in range(200, 208)]
IOC_REGISTRY = ["HKCU/Software/Microsoft/Windows/CurrentVersion/Run/updater"]
SENSITIVE_PATTERNS = ["/etc/shadow", "/etc/passwd", "*/.ssh/*", "*credentials*", "*/secrets/*"]

TEMPLATE_WEIGHTS = {
    "editor": 0.22,
    "browser": 0.17,
    "daemon": 0.16,
    "backup": 0.09,
    "updater": 0.12,
    "shell": 0.14,
    "indexer": 0.10,
}


def default_sensitivity() -> SensitivityConfig:
    return SensitivityConfig(
        sensitive_file_patterns=list(SENSITIVE_PATTERNS),
        sensitive_instructions=list(SENSITIVE_INSTRUCTIONS),
        ioc_addresses=list(IOC_ADDRESSES),
        ioc_file_hashes=list(IOC_HASHES),
        ioc_registry_keys=list(IOC_REGISTRY),
    )


@dataclass
class ScenarioSpec:
    """Scenario kind, scale and seed.

    ``n_processes`` counts benign processes; plant counts default to zero
    unless the scenario kind calls for them.
    """

    scenario: str = "mixed"
    n_processes: int = 1500
    n_ransomware: int | None = None
    n_exfiltration: int | None = None
    ransomware_files: tuple[int, int] = (250, 400)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise AptMclError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_processes < MIN_BENIGN_PROCESSES:
            raise AptMclError(f"n_processes must be >= {MIN_BENIGN_PROCESSES}, got {self.n_processes}")
        default = max(4, self.n_processes // 40)
        if self.n_ransomware is None:
            self.n_ransomware = default if self.scenario in ("ransomware_burst", "mixed") else 0
        if self.n_exfiltration is None:
            self.n_exfiltration = default if self.scenario in ("collection_exfiltration", "mixed") else 0
        if self.n_ransomware < 0 or self.n_exfiltration < 0:
            raise AptMclError("plant counts must be non-negative")
        self.ransomware_files = tuple(self.ransomware_files)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ransomware_files"] = list(self.ransomware_files)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioSpec:
        return cls(**d)


class _Emitter:
    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.events: list[EventRecord] = []
        self.clock = 1_700_000_000_000_000_000
        self.n_proc = 0
        self.kinds: dict[str, str] = {}

    def tick(self) -> int:
        self.clock += int(self.rng.integers(1_000, 5_000_000))
        return self.clock

    def new_process(self, kind: str) -> str:
        key = f"proc:{self.n_proc:06d}"
        self.n_proc += 1
        self.kinds[key] = kind
        return key

    def emit(self, sub: str, act: str, obj: str, obj_t: NodeType, attrs=None, times: int = 1) -> None:
        for _ in range(times):
            self.events.append(
                EventRecord(self.tick(), sub, NodeType.PROCESS, act, obj, obj_t, dict(attrs or {}))
            )

    def launch(self, parent: str, child: str, image: str, cmd: str) -> None:
        self.emit(parent, "launch", child, NodeType.PROCESS, {"image": image, "cmd": cmd})

    def file(self, proc: str, act: str, path: str, times: int = 1, **extra) -> None:
        self.emit(proc, act, f"file:{path}", NodeType.FILE, {"path": path, **extra}, times)

    def reg(self, proc: str, act: str, key: str, times: int = 1) -> None:
        self.emit(proc, act, f"reg:{key}", NodeType.REGISTRY, {"key": key}, times)

    def sock(self, proc: str, act: str, addr: str, times: int = 1) -> None:
        self.emit(proc, act, f"sock:{addr}", NodeType.SOCKET, {"addr": addr}, times)


class _World:
    """Shared entity pools the templates draw from."""

    def __init__(self, rng: np.random.Generator, n: int) -> None:
        self.rng = rng
        self.docs = [f"/home/u{i % 12}/docs/report_{i:04d}.docx" for i in range(max(60, n // 3))]
        self.libs = [f"/usr/lib/lib{i:03d}.so" for i in range(40)]
        self.configs = [f"/etc/app{i:02d}/app.conf" for i in range(30)]
        self.logs = [f"/var/log/svc{i:02d}.log" for i in range(25)]
        self.sensitive = (
            ["/etc/shadow", "/etc/passwd"]
            + [f"/home/u{i}/.ssh/id_rsa" for i in range(12)]
            + [f"/home/u{i}/.aws/credentials" for i in range(12)]
            + [f"/srv/secrets/token{i}.key" for i in range(6)]
        )
        self.reg_keys = [f"HKLM/Software/Vendor{i:02d}/Settings" for i in range(60)]
        self.user_reg = [f"HKCU/Software/App{i:03d}/State" for i in range(300)]
        self.web = [f"93.184.{i // 50}.{i % 50 + 1}:443" for i in range(80)]
        self.update_hosts = [f"151.101.1.{i}:443" for i in range(1, 9)]
        self.backup_hosts = ["10.0.0.5:873", "10.0.0.6:873"]
        self.cache_n = 0
        self.download_n = 0

    def pick(self, pool, k=None):
        if k is None:
            return pool[int(self.rng.integers(len(pool)))]
        k = min(k, len(pool))
        return [pool[i] for i in self.rng.choice(len(pool), size=k, replace=False)]

    def n(self, lo: int, hi: int) -> int:
        return int(self.rng.integers(lo, hi + 1))


def _libs(em: _Emitter, w: _World, p: str, k: int) -> None:
    for lib in w.pick(w.libs, k):
        em.file(p, "open", lib)
        em.file(p, "read", lib)


def _editor(em, w, p):
    _libs(em, w, p, w.n(1, 3))
    for doc in w.pick(w.docs, w.n(1, 4)):
        em.file(p, "open", doc)
        em.file(p, "read", doc, w.n(1, 3))
        if w.rng.random() < 0.6:
            em.file(p, "write", doc, w.n(1, 3))
        em.file(p, "close", doc)
    for key in w.pick(w.reg_keys, w.n(1, 3)):
        em.reg(p, "query", key)


def _browser(em, w, p):
    _libs(em, w, p, w.n(2, 4))
    for addr in w.pick(w.web, w.n(1, 4)):
        em.sock(p, "connect", addr)
        em.sock(p, "send", addr, w.n(1, 4))
        em.sock(p, "receive", addr, w.n(1, 6))
    for _ in range(w.n(1, 4)):
        w.cache_n += 1
        path = f"/home/u{w.cache_n % 12}/.cache/browser/c{w.cache_n:05d}"
        em.file(p, "create", path)
        em.file(p, "write", path, w.n(1, 2))
    for key in w.pick(w.reg_keys, w.n(0, 2)):
        em.reg(p, "query", key)


def _daemon(em, w, p):
    _libs(em, w, p, w.n(1, 2))
    for cfg in w.pick(w.configs, w.n(1, 3)):
        em.file(p, "read", cfg)
    for key in w.pick(w.reg_keys, w.n(2, 5)):
        em.reg(p, "open", key)
        em.reg(p, "query", key, w.n(1, 3))
        if w.rng.random() < 0.5:
            em.reg(p, "modify", key)
    em.file(p, "write", w.pick(w.logs), w.n(2, 6))
    if w.rng.random() < 0.3:
        em.sock(p, "accept", f"10.0.{w.n(1, 3)}.{w.n(2, 250)}:{w.n(1024, 65000)}")


def _backup(em, w, p):
    _libs(em, w, p, 1)
    for doc in w.pick(w.docs, w.n(3, 8)):
        em.file(p, "read", doc)
    if w.rng.random() < 0.1:
        for f in w.pick(w.sensitive, w.n(1, 2)):
            em.file(p, "read", f)
    host = w.pick(w.backup_hosts)
    em.sock(p, "connect", host)
    em.sock(p, "send", host, w.n(2, 6))
    em.file(p, "write", w.pick(w.logs))


def _updater(em, w, p):
    _libs(em, w, p, 1)
    for cfg in w.pick(w.configs, w.n(1, 2)):
        em.file(p, "read", cfg)
    host = w.pick(w.update_hosts)
    em.sock(p, "connect", host)
    em.sock(p, "send", host, w.n(1, 3))
    em.sock(p, "receive", host, w.n(1, 3))
    for _ in range(w.n(1, 2)):
        w.download_n += 1
        em.file(p, "write", f"/var/cache/updates/pkg{w.download_n:05d}.bin")
    children = []
    for _ in range(w.n(1, 2)):
        c = em.new_process("helper")
        cmd = w.pick(["dpkg", "sha256sum", "tar"])
        em.launch(p, c, f"/usr/bin/{cmd}", f"{cmd} --quiet")
        children.append(c)
    return children


def _indexer(em, w, p):
    _libs(em, w, p, 1)
    for doc in w.pick(w.docs, w.n(3, 8)):
        em.file(p, "open", doc)
        em.file(p, "read", doc)
        em.file(p, "close", doc)
    em.file(p, "write", f"/home/u{w.n(0, 11)}/.cache/tracker/meta.db", w.n(1, 4))


def _shell(em, w, p):
    _libs(em, w, p, w.n(1, 3))
    user = w.n(0, 11)
    for rc in (f"/home/u{user}/.bashrc", "/etc/profile", "/etc/bash.bashrc"):
        em.file(p, "read", rc)
    em.file(p, "write", f"/home/u{user}/.bash_history", w.n(1, 3))
    for doc in w.pick(w.docs, w.n(0, 2)):
        em.file(p, "read", doc)
    children = []
    for _ in range(w.n(1, 3)):
        c = em.new_process("command")
        # rare administrative use of a reconnaissance command
        cmd = w.pick(SENSITIVE_INSTRUCTIONS) if w.rng.random() < 0.02 else w.pick(BENIGN_COMMANDS)
        em.launch(p, c, f"/usr/bin/{cmd}", f"{cmd} -a")
        children.append(c)
    return children


def _command(em, w, p):
    _libs(em, w, p, w.n(1, 3))
    for doc in w.pick(w.docs, w.n(0, 2)):
        em.file(p, "read", doc)


def _launcher(em, w, p):
    _libs(em, w, p, w.n(3, 6))
    for cfg in w.pick(w.configs, w.n(4, 8)):
        em.file(p, "read", cfg)
    for key in w.pick(w.reg_keys, w.n(4, 8)):
        em.reg(p, "query", key)


TEMPLATES = {
    "editor": _editor,
    "browser": _browser,
    "daemon": _daemon,
    "backup": _backup,
    "updater": _updater,
    "shell": _shell,
    "indexer": _indexer,
}
IMAGES = {
    "editor": "/usr/bin/writer",
    "browser": "/usr/bin/firefox",
    "daemon": "/usr/sbin/svcd",
    "backup": "/usr/bin/rsync",
    "updater": "/usr/bin/apt-agent",
    "shell": "/bin/bash",
    "indexer": "/usr/bin/tracker",
}


def _ransomware(em, w, p, spec):
    _libs(em, w, p, 3)
    lo, hi = spec.ransomware_files
    for doc in w.pick(w.docs, w.n(lo, hi)):
        em.file(p, "open", doc)
        em.file(p, "read", doc)
        em.file(p, "write", doc, w.n(2, 6))
        if w.rng.random() < 0.5:
            em.file(p, "delete", doc)
    for key in w.pick(w.user_reg, w.n(80, 160)):
        em.reg(p, "query", key)
        em.reg(p, "modify", key, w.n(2, 5))


def _exfiltration(em, w, p, n, image, user):
    addr = f"{w.pick(IOC_ADDRESSES)}:8443"
    em.sock(p, "connect", addr)
    # implant refreshes itself from the C2 host
    em.sock(p, "receive", addr)
    em.file(p, "write", image)
    em.file(p, "write", f"/home/u{user}/.ssh/authorized_keys")
    children = []
    for cmd in w.pick(SENSITIVE_INSTRUCTIONS, w.n(3, 5)):
        c = em.new_process("recon")
        em.launch(p, c, f"/usr/bin/{cmd}", cmd)
        children.append(c)
    for f in w.pick(w.sensitive, w.n(3, 5)):
        em.file(p, "read", f)
    for doc in w.pick(w.docs, w.n(0, 1)):
        em.file(p, "read", doc)
    em.file(p, "write", f"/tmp/.cache/information{n:03d}.log")
    em.sock(p, "send", addr, w.n(2, 4))
    return children


def generate_scenario(spec: ScenarioSpec) -> tuple[list[EventRecord], dict[str, str]]:
    """Emit a time-ordered event stream and per-process ground truth.

    Returns:
        ``(events, labels)`` where ``labels`` maps every process key to
        ``"malicious"`` or ``"benign"``. Only planted attack processes are
        malicious; their reconnaissance children are not.
    """
    events, labels, _ = _generate(spec)
    return events, labels


def _generate(spec: ScenarioSpec):
    rng = np.random.default_rng(spec.rng_seed)
    em = _Emitter(rng)
    w = _World(rng, spec.n_processes)
    malicious: set[str] = set()

    n_launchers = max(2, spec.n_processes // 8)
    launchers = []
    for _ in range(n_launchers):
        p = em.new_process("launcher")
        launchers.append(p)
        _launcher(em, w, p)

    names = list(TEMPLATE_WEIGHTS)
    weights = np.array([TEMPLATE_WEIGHTS[k] for k in names])
    weights /= weights.sum()
    # plants start at random points of the benign workload
    plants = ["ransomware"] * spec.n_ransomware + ["exfiltration"] * spec.n_exfiltration
    starts = np.sort(rng.integers(n_launchers, spec.n_processes, size=len(plants)))
    order = [plants[i] for i in rng.permutation(len(plants))]
    n_exfil = 0

    def plant(kind: str) -> None:
        nonlocal n_exfil
        p = em.new_process(kind)
        if kind == "ransomware":
            em.launch(w.pick(launchers), p, "/tmp/thanos", "/tmp/thanos --all")
            _ransomware(em, w, p, spec)
        else:
            user = w.n(0, 11)
            image = f"/home/u{user}/.local/bin/docsync{n_exfil:03d}"
            em.launch(w.pick(launchers), p, image, f"{image} --background")
            for c in _exfiltration(em, w, p, n_exfil, image, user):
                _command(em, w, c)
            n_exfil += 1
        malicious.add(p)

    n_benign = n_launchers
    next_plant = 0
    while n_benign < spec.n_processes:
        while next_plant < len(order) and starts[next_plant] <= n_benign:
            plant(order[next_plant])
            next_plant += 1
        kind = names[int(rng.choice(len(names), p=weights))]
        p = em.new_process(kind)
        em.launch(w.pick(launchers), p, IMAGES[kind], IMAGES[kind])
        n_benign += 1
        children = TEMPLATES[kind](em, w, p) or []
        for c in children:
            _command(em, w, c)
        n_benign += len(children)
    for kind in order[next_plant:]:
        plant(kind)

    labels = {k: ("malicious" if k in malicious else "benign") for k in sorted(em.kinds)}
    return em.events, labels, dict(em.kinds)


def process_kinds(spec: ScenarioSpec) -> dict[str, str]:
    """Template name of every generated process."""
    return _generate(spec)[2]


def write_scenario(spec: ScenarioSpec, events_path: str | Path, truth_path: str | Path) -> dict[str, str]:
    events, labels = generate_scenario(spec)
    write_events(events, events_path)
    with open(truth_path, "w", encoding="utf-8", newline="\n") as fh:
        for key, label in labels.items():
            fh.write(json.dumps({"key": key, "label": label}, sort_keys=True) + "\n")
    return labels


def read_truth(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["key"]] = rec["label"]
    return out
