"""Structural verification of generated configuration artifacts.

This module stands in for an emulated-network test harness: instead of
booting routers it checks the generated configs against the topology with
seven ordered rules:

    V1  every topology device has a config
    V2  the config parses under the line grammar below
    V3  no unresolved {{...}} placeholder markers remain
    V4  every referenced interface exists on that device
    V5  the two interface addresses of each router-router link share a
        /24-or-longer subnet and differ
    V6  every BGP neighbor address is the configured address of a directly
        linked peer interface
    V7  ASN and OSPF area values are well-formed integers

Line grammar (leading whitespace marks a continuation line):

    interface <name>
     ip address <a.b.c.d>/<len>
    router bgp <asn>
     neighbor <a.b.c.d> remote-as <asn>
    router ospf
     network <prefix> area <id>

Blank lines and lines starting with '!' are ignored. The canonical
per-link subnet allocator (link i of the sorted link order gets
10.0.i.0/24, endpoints .1/.2 by device name order) defines ground truth
for deterministic V5/V6 repairs; a real harness can be plugged in through
verify_external.
"""

from __future__ import annotations

import difflib
import re
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CalledOnPass, EmptyTrace
from .topo import Link, TopologyDoc

MESSAGE_LIMIT = 200
DEFAULT_N_TRIM = 10
MARKER_RE = re.compile(r"\{\{[^}]*\}\}")
_ADDR_RE = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")
_INT_RE = re.compile(r"^\d+$")
MAX_ASN = 4_294_967_295
BASE_ASN = 64512


@dataclass(frozen=True)
class ConfigArtifact:
    """Per-device config texts plus the (opaque) driver text."""

    configs: dict[str, str]
    driver: str = ""

    def with_config(self, device: str, text: str) -> "ConfigArtifact":
        configs = dict(self.configs)
        configs[device] = text
        return ConfigArtifact(configs=configs, driver=self.driver)


@dataclass(frozen=True)
class Violation:
    device: str
    block: str
    rule: str
    message: str
    detail: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "device": self.device,
            "block": self.block,
            "rule": self.rule,
            "message": self.message,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class Verdict:
    passed: bool
    violations: tuple[Violation, ...]

    def to_obj(self) -> dict:
        return {"pass": self.passed, "violations": [v.to_obj() for v in self.violations]}


@dataclass(frozen=True)
class FailureTrace:
    entries: tuple[Violation, ...]

    def to_obj(self) -> dict:
        return {"entries": [v.to_obj() for v in self.entries]}


@dataclass(frozen=True)
class PatchDirective:
    device: str
    block: str
    edit: str
    rationale: str

    def to_obj(self) -> dict:
        return {"device": self.device, "block": self.block, "edit": self.edit, "rationale": self.rationale}


# ---------------------------------------------------------------- parsing


@dataclass
class _Interface:
    name: str
    address: str | None = None  # "a.b.c.d/len"


@dataclass
class _Bgp:
    asn: str
    neighbors: list[tuple[str, str]] = field(default_factory=list)  # (ip, remote-as)


@dataclass
class _Ospf:
    networks: list[tuple[str, str]] = field(default_factory=list)  # (prefix, area)


@dataclass
class _DeviceConfig:
    interfaces: dict[str, _Interface] = field(default_factory=dict)
    bgp: _Bgp | None = None
    ospf: _Ospf | None = None
    errors: list[str] = field(default_factory=list)


def _valid_addr(token: str) -> bool:
    m = _ADDR_RE.match(token)
    return bool(m) and all(int(g) <= 255 for g in m.groups())


def _split_prefix(token: str) -> tuple[str, int] | None:
    if "/" not in token:
        return None
    addr, _, length = token.partition("/")
    if not (_valid_addr(addr) and _INT_RE.match(length) and int(length) <= 32):
        return None
    return addr, int(length)


def _parse_config(text: str) -> _DeviceConfig:
    """Line-by-line parse with recovery: bad lines are recorded, not fatal."""
    cfg = _DeviceConfig()
    block: _Interface | _Bgp | _Ospf | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line.strip() or line.lstrip().startswith("!"):
            continue
        indented = line[0].isspace()
        words = line.split()
        if not indented:
            if words[0] == "interface" and len(words) == 2:
                block = _Interface(name=words[1])
                cfg.interfaces[words[1]] = block
            elif words[:2] == ["router", "bgp"] and len(words) == 3:
                block = _Bgp(asn=words[2])
                cfg.bgp = block
            elif words[:2] == ["router", "ospf"] and len(words) == 2:
                block = _Ospf()
                cfg.ospf = block
            else:
                cfg.errors.append(f"line {lineno}: unrecognized statement {line.strip()!r}")
                block = None
            continue
        if isinstance(block, _Interface) and words[:2] == ["ip", "address"] and len(words) == 3:
            if _split_prefix(words[2]) is None:
                cfg.errors.append(f"line {lineno}: bad address {words[2]!r}")
            else:
                block.address = words[2]
        elif isinstance(block, _Bgp) and words[0] == "neighbor" and len(words) == 4 and words[2] == "remote-as":
            if not _valid_addr(words[1]):
                cfg.errors.append(f"line {lineno}: bad neighbor address {words[1]!r}")
            else:
                block.neighbors.append((words[1], words[3]))
        elif isinstance(block, _Ospf) and words[0] == "network" and len(words) == 4 and words[2] == "area":
            if _split_prefix(words[1]) is None:
                cfg.errors.append(f"line {lineno}: bad network prefix {words[1]!r}")
            else:
                block.networks.append((words[1], words[3]))
        else:
            cfg.errors.append(f"line {lineno}: unrecognized continuation {line.strip()!r}")
    return cfg


# ------------------------------------------------- canonical ground truth


def canonical_links(doc: TopologyDoc) -> list[Link]:
    return sorted(doc.links, key=lambda l: (min(l.a, l.b), max(l.a, l.b), l.a_if, l.b_if))


def canonical_link_addresses(doc: TopologyDoc) -> dict[tuple[str, str], str]:
    """(device, interface) -> canonical "a.b.c.d/24" for router-router links."""
    out: dict[tuple[str, str], str] = {}
    for i, link in enumerate(canonical_links(doc)):
        if link.a not in doc.routers or link.b not in doc.routers:
            continue
        second, third = (i // 256) % 256, i % 256
        first_dev = min(link.a, link.b)
        for dev, iface in ((link.a, link.a_if), (link.b, link.b_if)):
            host = 1 if dev == first_dev else 2
            out[(dev, iface)] = f"10.{second}.{third}.{host}/24"
    return out


def canonical_asn(doc: TopologyDoc, device: str) -> int:
    return BASE_ASN + sorted(doc.routers).index(device)


def build_canonical_artifact(doc: TopologyDoc, driver: str = "") -> ConfigArtifact:
    """The deterministic ground-truth artifact for a topology.

    Routers get addressed interfaces plus a BGP block peering with every
    directly linked router; switches get bare interface blocks.
    """
    addresses = canonical_link_addresses(doc)
    configs = {}
    for device in sorted(doc.routers) + sorted(doc.switches):
        lines = []
        for iface in doc.interfaces_of(device):
            lines.append(f"interface {iface}")
            addr = addresses.get((device, iface))
            if addr:
                lines.append(f" ip address {addr}")
            lines.append("!")
        if device in doc.routers:
            peers = router_peers(doc, device)
            lines.append(f"router bgp {canonical_asn(doc, device)}")
            for peer, peer_iface in peers:
                peer_addr = addresses.get((peer, peer_iface))
                if peer_addr:
                    lines.append(f" neighbor {peer_addr.split('/')[0]} remote-as {canonical_asn(doc, peer)}")
        configs[device] = "\n".join(lines) + "\n"
    return ConfigArtifact(configs=configs, driver=driver)


def router_peers(doc: TopologyDoc, device: str) -> list[tuple[str, str]]:
    """Directly linked router peers as (peer, peer_interface), sorted."""
    peers = []
    for link in canonical_links(doc):
        if link.a == device and link.b in doc.routers:
            peers.append((link.b, link.b_if))
        elif link.b == device and link.a in doc.routers:
            peers.append((link.a, link.a_if))
    return sorted(set(peers))


# ----------------------------------------------------------------- verify


def verify(artifact: ConfigArtifact, topo: TopologyDoc) -> Verdict:
    """Run checks V1..V7 in order and fold every problem into a violation."""
    violations: list[Violation] = []
    device_order = sorted(topo.routers) + sorted(topo.switches)
    parsed: dict[str, _DeviceConfig] = {}

    # V1: config presence
    for device in device_order:
        if device not in artifact.configs:
            violations.append(
                Violation(device, "device", "V1", f"device {device} has no generated config")
            )

    # V2: grammar
    for device in device_order:
        text = artifact.configs.get(device)
        if text is None:
            continue
        cfg = _parse_config(text)
        parsed[device] = cfg
        for err in cfg.errors:
            violations.append(Violation(device, "grammar", "V2", err))

    # V3: unresolved placeholder markers
    for device in device_order:
        text = artifact.configs.get(device)
        if text is None:
            continue
        for marker in MARKER_RE.findall(text):
            violations.append(
                Violation(device, "markers", "V3", f"unresolved placeholder {marker} remains")
            )

    # V4: interface existence
    for device in device_order:
        cfg = parsed.get(device)
        if cfg is None:
            continue
        known = set(topo.interfaces_of(device))
        for name in cfg.interfaces:
            if name not in known:
                violations.append(
                    Violation(
                        device,
                        f"interface {name}",
                        "V4",
                        f"interface {name} does not exist on {device}",
                        detail={"interface": name},
                    )
                )

    # V5: link subnet consistency (router-router links only)
    for link in canonical_links(topo):
        if link.a not in topo.routers or link.b not in topo.routers:
            continue
        sides = ((link.a, link.a_if), (link.b, link.b_if))
        addrs = {}
        for dev, iface in sides:
            cfg = parsed.get(dev)
            block = cfg.interfaces.get(iface) if cfg else None
            addrs[(dev, iface)] = _split_prefix(block.address) if block and block.address else None
        problem = _link_problem(addrs, sides)
        if problem:
            for dev, iface in sides:
                violations.append(
                    Violation(
                        dev,
                        f"interface {iface}",
                        "V5",
                        f"link {link.a}({link.a_if})<->{link.b}({link.b_if}): {problem}",
                        detail={"interface": iface, "link": [link.a, link.a_if, link.b, link.b_if]},
                    )
                )

    # V6: BGP neighbors point at directly linked peer addresses
    for device in device_order:
        cfg = parsed.get(device)
        if cfg is None or cfg.bgp is None or device not in topo.routers:
            continue
        peer_addrs = set()
        for peer, peer_iface in router_peers(topo, device):
            peer_cfg = parsed.get(peer)
            block = peer_cfg.interfaces.get(peer_iface) if peer_cfg else None
            if block and block.address:
                split = _split_prefix(block.address)
                if split:
                    peer_addrs.add(split[0])
        for ip, _remote in cfg.bgp.neighbors:
            if ip not in peer_addrs:
                violations.append(
                    Violation(
                        device,
                        "router bgp",
                        "V6",
                        f"neighbor {ip} is not an address of a directly linked peer interface",
                        detail={"neighbor": ip},
                    )
                )

    # V7: well-formed integers
    for device in device_order:
        cfg = parsed.get(device)
        if cfg is None:
            continue
        if cfg.bgp is not None:
            candidates = [("router bgp", cfg.bgp.asn)] + [("router bgp", r) for _, r in cfg.bgp.neighbors]
            for block_name, value in candidates:
                if not (_INT_RE.match(value) and 1 <= int(value) <= MAX_ASN):
                    violations.append(
                        Violation(device, block_name, "V7", f"ASN {value!r} is not a well-formed integer")
                    )
        if cfg.ospf is not None:
            for _prefix, area in cfg.ospf.networks:
                if not (_INT_RE.match(area) and int(area) <= MAX_ASN):
                    violations.append(
                        Violation(device, "router ospf", "V7", f"area {area!r} is not a well-formed integer")
                    )

    return Verdict(passed=not violations, violations=tuple(violations))


def _link_problem(addrs, sides) -> str | None:
    missing = [f"{dev}:{iface}" for dev, iface in sides if addrs[(dev, iface)] is None]
    if missing:
        return f"no address configured on {', '.join(missing)}"
    (a_addr, a_len), (b_addr, b_len) = (addrs[s] for s in sides)
    if a_addr == b_addr:
        return f"both endpoints use {a_addr}"
    if a_len < 24 or b_len < 24:
        return f"prefix lengths /{a_len} and /{b_len} are shorter than /24"
    if a_len != b_len or _network(a_addr, a_len) != _network(b_addr, b_len):
        return f"{a_addr}/{a_len} and {b_addr}/{b_len} are not in the same subnet"
    return None


def _network(addr: str, length: int) -> int:
    value = 0
    for part in addr.split("."):
        value = (value << 8) | int(part)
    return value >> (32 - length) if length < 32 else value


# ------------------------------------------------------------------- trim


def trim(verdict: Verdict, n_trim: int = DEFAULT_N_TRIM) -> FailureTrace:
    """First n_trim violations in check order, messages capped at 200 chars."""
    if verdict.passed:
        raise CalledOnPass("trim is only defined for failing verdicts")
    entries = []
    for v in verdict.violations[:n_trim]:
        message = v.message
        if len(message) > MESSAGE_LIMIT:
            message = message[: MESSAGE_LIMIT - 3] + "..."
        entries.append(Violation(v.device, v.block, v.rule, message, v.detail))
    return FailureTrace(entries=tuple(entries))


# ---------------------------------------------------------------- patches


def propose_patches(trace: FailureTrace, artifact: ConfigArtifact, topo: TopologyDoc) -> list[PatchDirective]:
    """One directive per trace entry; deterministic fixes where they exist.

    V4 renames to the nearest valid interface, V5 re-derives both link
    addresses from the canonical allocator, V6 points the neighbor at the
    canonical peer address. Everything else asks for a block regeneration.
    Directives only ever name devices that appear in the trace.
    """
    if not trace.entries:
        raise EmptyTrace("no violations to patch")
    addresses = canonical_link_addresses(topo)
    patches = []
    for v in trace.entries:
        if v.rule == "V4":
            candidates = topo.interfaces_of(v.device)
            bad = v.detail.get("interface", "")
            near = difflib.get_close_matches(bad, candidates, n=1, cutoff=0.0)
            if near:
                patches.append(
                    PatchDirective(
                        v.device,
                        v.block,
                        f"set-interface-name {near[0]}",
                        f"{bad} does not exist on {v.device}; nearest valid interface is {near[0]}",
                    )
                )
                continue
        elif v.rule == "V5":
            iface = v.detail.get("interface", "")
            addr = addresses.get((v.device, iface))
            if addr:
                patches.append(
                    PatchDirective(
                        v.device,
                        f"interface {iface}",
                        f"set-address {addr}",
                        "recomputed from the canonical per-link subnet",
                    )
                )
                continue
        elif v.rule == "V6":
            bad_ip = v.detail.get("neighbor", "")
            true_ip = _nearest_peer_address(topo, v.device, bad_ip, addresses)
            if true_ip:
                patches.append(
                    PatchDirective(
                        v.device,
                        v.block,
                        f"set-neighbor-address {bad_ip} {true_ip}",
                        f"{bad_ip} matches no linked peer; canonical peer address is {true_ip}",
                    )
                )
                continue
        patches.append(
            PatchDirective(v.device, v.block, "regenerate-block", f"no deterministic fix for {v.rule}")
        )
    return patches


def _addr_int(addr: str) -> int:
    return _network(addr, 32)


def _nearest_peer_address(topo, device, bad_ip, addresses) -> str | None:
    candidates = sorted(
        addresses[(peer, peer_iface)].split("/")[0]
        for peer, peer_iface in router_peers(topo, device)
        if (peer, peer_iface) in addresses
    )
    if not candidates:
        return None
    if not _valid_addr(bad_ip):
        return candidates[0]
    return min(candidates, key=lambda c: (abs(_addr_int(c) - _addr_int(bad_ip)), _addr_int(c)))


def apply_patches(
    artifact: ConfigArtifact, patches: list[PatchDirective], topo: TopologyDoc
) -> tuple[ConfigArtifact, list[PatchDirective]]:
    """Apply substitution edits textually; return leftover regenerate asks.

    Lines outside the patched blocks are preserved byte-for-byte.
    """
    pending = []
    for patch in patches:
        if patch.edit == "regenerate-block":
            pending.append(patch)
            continue
        text = artifact.configs.get(patch.device)
        if text is None:
            pending.append(patch)
            continue
        artifact = artifact.with_config(patch.device, _apply_edit(text, patch))
    return artifact, pending


def _apply_edit(text: str, patch: PatchDirective) -> str:
    lines = text.splitlines(keepends=True)
    words = patch.edit.split()
    if words[0] == "set-interface-name":
        old = patch.block.split(" ", 1)[1] if " " in patch.block else ""
        for i, line in enumerate(lines):
            if line.rstrip("\n") == f"interface {old}":
                lines[i] = f"interface {words[1]}\n"
                break
        return "".join(lines)
    if words[0] == "set-address":
        iface = patch.block.split(" ", 1)[1] if " " in patch.block else ""
        start, end = _block_span(lines, f"interface {iface}")
        if start is None:
            return text + f"interface {iface}\n ip address {words[1]}\n"
        for i in range(start + 1, end):
            if lines[i].split()[:2] == ["ip", "address"]:
                lines[i] = f" ip address {words[1]}\n"
                return "".join(lines)
        lines.insert(start + 1, f" ip address {words[1]}\n")
        return "".join(lines)
    if words[0] == "set-neighbor-address":
        old_ip, new_ip = words[1], words[2]
        for i, line in enumerate(lines):
            parts = line.split()
            if parts[:2] == ["neighbor", old_ip] and line[0].isspace():
                lines[i] = line.replace(f"neighbor {old_ip} ", f"neighbor {new_ip} ", 1)
                break
        return "".join(lines)
    return text


def _block_span(lines: list[str], header: str) -> tuple[int | None, int]:
    start = None
    for i, line in enumerate(lines):
        if line.rstrip("\n") == header:
            start = i
            continue
        if start is not None:
            if line.strip() and not line[0].isspace():
                return start, i
    return start, len(lines)


def block_spans(text: str) -> dict[str, str]:
    """Map block header -> exact block text (header plus continuations).

    Used by locality checks: two artifacts should differ only inside the
    blocks named by the patches applied between them.
    """
    spans: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines(keepends=True):
        if line.strip() and not line[0].isspace() and not line.startswith("!"):
            current = line.rstrip("\n")
            spans[current] = [line]
        elif current is not None:
            spans[current].append(line)
    return {k: "".join(v) for k, v in spans.items()}


# ------------------------------------------------------- external harness


def verify_external(case_dir: str | Path, command: list[str], log_name: str = "verify.log") -> Verdict:
    """Adapter for a real test harness: exit code 0 means pass.

    On failure, each non-empty line of the log file (if present) becomes a
    violation with rule "EXT"; without a log the exit code alone is
    reported.
    """
    case_dir = Path(case_dir)
    proc = subprocess.run(command, cwd=case_dir, capture_output=True, text=True)
    if proc.returncode == 0:
        return Verdict(passed=True, violations=())
    violations = []
    log_path = case_dir / log_name
    if log_path.is_file():
        for line in log_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                violations.append(Violation("external", "harness", "EXT", line.strip()))
    if not violations:
        violations.append(
            Violation("external", "harness", "EXT", f"harness exited with code {proc.returncode}")
        )
    return Verdict(passed=False, violations=tuple(violations))
