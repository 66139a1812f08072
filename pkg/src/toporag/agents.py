"""Role-specialised agents, pluggable generation backends, and the
generate-verify-repair controller.

Three roles share one backend but differ by system prompt and output
contract: planning returns a JSON plan plus per-device skeleton,
generation materialises config artifacts (through constrained decoding
when the backend exposes per-step distributions, free-text with post-hoc
placeholder enforcement otherwise), and verification runs the structural
harness locally and derives patch directives deterministically.

run_case drives one case through the phase machine

    PLAN -> GENERATE -> VERIFY -> PASSED
                  ^         |
                  +- REPAIR <+

under the budget envelope fixed before the first call; every failure
folds into a terminal CAPPED state with a recorded cause.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import requests

from .budget import BudgetEnvelope, Calibration, DifficultyInputs, difficulty, envelope
from .decoding import (
    DeviceSkeleton,
    Fixed,
    Placeholder,
    Skeleton,
    TokenVocab,
    decode_with_skeleton,
    flatten_positions,
    permitted_tokens,
    tokenize,
    validate_skeleton,
)
from .errors import (
    AllReplicasFailed,
    BackendError,
    ContractViolation,
    EmptyPermittedSet,
    MalformedJson,
    TokenCapExceeded,
    ToporagError,
)
from .retrieval import TopoRagContext
from .topo import TopologyDoc, build_graph, parse_topology
from .util import count_tokens, stable_seed, to_json
from .verify import (
    ConfigArtifact,
    PatchDirective,
    apply_patches,
    canonical_asn,
    canonical_link_addresses,
    propose_patches,
    router_peers,
    trim,
    verify,
)

ROLES = ("planning", "generation", "verify")
PLAN_RETRIES = 2  # extra attempts after the first failure
FAULT_KINDS = ("placeholder_marker", "bad_interface", "bad_address", "bad_neighbor")


@dataclass(frozen=True)
class AgentRole:
    name: str
    system_prompt: str
    output_contract: str


def load_role(name: str) -> AgentRole:
    """Load a role with its editable prompt template from package data."""
    if name not in ROLES:
        raise ValueError(f"unknown role {name!r}")
    prompt = resources.files("toporag").joinpath(f"data/prompts/{name}.txt").read_text(encoding="utf-8")
    contract = {
        "planning": "plan+skeleton-json",
        "generation": "config-artifact",
        "verify": "patch-directive-json",
    }[name]
    return AgentRole(name=name, system_prompt=prompt, output_contract=contract)


@dataclass
class BackendRequest:
    role: str
    prompt_parts: dict[str, str]
    token_cap: int
    seed: int
    constraints: dict | None = None


@dataclass
class BackendResponse:
    text: str
    tokens_used: int
    # populated only by logit-exposing backends; text-only backends (http)
    # have no per-step access, which is why their constraints are post-hoc
    per_step_distributions: list | None = None


# ----------------------------------------------------------- mock backend


@dataclass(frozen=True)
class MockBackendConfig:
    """Deterministic template filler with seeded fault injection.

    fault_kind maps onto verifier rules: placeholder_marker -> V3,
    bad_interface -> V4, bad_address -> V5, bad_neighbor -> V6.
    fault_script, when given, overrides fault_rate per iteration (1-based).
    require_reference makes generation degrade (one bad neighbor/address on
    the first iteration) whenever the context carries no retrieved
    reference.
    """

    fault_rate: float = 0.0
    fault_kind: str = "bad_interface"
    fault_script: tuple[bool, ...] | None = None
    seed: int = 0
    require_reference: bool = False
    broken: bool = False

    def __post_init__(self):
        if self.fault_kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.fault_kind!r}")
        if not 0.0 <= self.fault_rate <= 1.0:
            raise ValueError("fault_rate must lie in [0, 1]")


def default_skeleton(doc: TopologyDoc) -> Skeleton:
    """Per-device template: addressed interfaces plus a BGP block per router."""
    addresses = canonical_link_addresses(doc)
    link_of = {}
    for link in doc.links:
        link_of[(link.a, link.a_if)] = link
        link_of[(link.b, link.b_if)] = link
    devices = []
    for device in sorted(doc.routers) + sorted(doc.switches):
        segments: list = []
        for iface in doc.interfaces_of(device):
            link = link_of[(device, iface)]
            bind = [link.a, link.a_if, link.b, link.b_if]
            segments.append(Fixed("interface "))
            segments.append(Placeholder("iface", {"device": device, "link": bind}))
            if (device, iface) in addresses:
                segments.append(Fixed("\n ip address "))
                segments.append(Placeholder("ip4_prefix", {"device": device, "link": bind}))
            segments.append(Fixed("\n!\n"))
        if device in doc.routers:
            segments.append(Fixed("router bgp "))
            segments.append(Placeholder("asn", {"device": device}))
            segments.append(Fixed("\n"))
            for peer, peer_iface in router_peers(doc, device):
                if (peer, peer_iface) not in addresses:
                    continue
                segments.append(Fixed(" neighbor "))
                segments.append(Placeholder("ip4_addr", {"device": device, "peer": peer, "peer_iface": peer_iface}))
                segments.append(Fixed(" remote-as "))
                segments.append(Placeholder("asn", {"device": peer}))
                segments.append(Fixed("\n"))
        devices.append(DeviceSkeleton(device=device, segments=tuple(segments)))
    return Skeleton(devices=tuple(devices))


def intended_value(ph: Placeholder, doc: TopologyDoc) -> str:
    """Canonical fill value for a placeholder (the mock's ground truth)."""
    addresses = canonical_link_addresses(doc)
    if ph.kind == "iface":
        a, a_if, b, b_if = ph.args["link"]
        return a_if if ph.args["device"] == a else b_if
    if ph.kind == "ip4_prefix":
        a, a_if, b, b_if = ph.args["link"]
        iface = a_if if ph.args["device"] == a else b_if
        return addresses[(ph.args["device"], iface)]
    if ph.kind == "ip4_addr":
        return addresses[(ph.args["peer"], ph.args["peer_iface"])].split("/")[0]
    if ph.kind == "asn":
        return str(canonical_asn(doc, ph.args["device"]))
    if ph.kind == "keyword":
        return ph.args["allowed"][0]
    if ph.kind == "device_ref":
        return ph.args.get("device", sorted(doc.devices())[0])
    raise ValueError(f"no intended value for kind {ph.kind!r}")


def case_vocab(doc: TopologyDoc, skeleton: Skeleton) -> TokenVocab:
    """Word vocabulary covering the skeleton literals and case entities."""
    texts = [seg.text for dev in skeleton.devices for seg in dev.segments if isinstance(seg, Fixed)]
    extras = set(doc.devices())
    for device in doc.devices():
        extras.update(doc.interfaces_of(device))
    for addr in canonical_link_addresses(doc).values():
        extras.add(addr)
        extras.add(addr.split("/")[0])
    for device in doc.routers:
        extras.add(str(canonical_asn(doc, device)))
    for dev in skeleton.devices:
        for seg in dev.segments:
            if isinstance(seg, Placeholder):
                extras.update(seg.args.get("allowed", []))
                extras.add(intended_value(seg, doc))
    return TokenVocab.build(texts, extras)


class _IntendedSource:
    """Stepwise distribution source: all mass on the canonical fill token."""

    def __init__(self, intended_ids: list[int], vocab_size: int):
        self.intended_ids = intended_ids
        self.vocab_size = vocab_size

    def next_distribution(self, prefix: list[int]) -> np.ndarray:
        dist = np.zeros(self.vocab_size)
        cursor = len(prefix)
        if cursor < len(self.intended_ids):
            dist[self.intended_ids[cursor]] = 1.0
        else:
            dist[0] = 1.0
        return dist


class MockBackend:
    """Offline stand-in for the edge LLM runtime.

    Planning returns the default plan/skeleton for the target topology;
    generation exposes per-step distributions that put all probability on
    the canonical fill, so the whole constrained-decoding path is
    exercised without any model.
    """

    exposes_distributions = True

    def __init__(self, config: MockBackendConfig = MockBackendConfig()):
        self.config = config

    def complete(self, request: BackendRequest) -> BackendResponse:
        if self.config.broken:
            raise BackendError("mock replica configured as broken")
        if request.role == "planning":
            doc = parse_topology(request.prompt_parts["target_topology"])
            plan = {
                "protocol": "bgp",
                "devices": {
                    device: {"asn": canonical_asn(doc, device)} for device in sorted(doc.routers)
                },
                "invariants": [
                    "link endpoints share a /24 subnet",
                    "bgp neighbors use directly linked peer addresses",
                ],
            }
            text = json.dumps({"plan": plan, "skeleton": default_skeleton(doc).to_obj()}, sort_keys=True)
            tokens = count_tokens(text)
            if tokens > request.token_cap:
                raise TokenCapExceeded(f"plan of {tokens} tokens exceeds cap {request.token_cap}")
            return BackendResponse(text=text, tokens_used=tokens)
        if request.role == "generation":
            raise BackendError("mock generation goes through the constrained decoder")
        raise BackendError(f"mock backend has no completion for role {request.role!r}")

    def distribution_source(self, skeleton: Skeleton, doc: TopologyDoc, vocab: TokenVocab) -> _IntendedSource:
        intended_ids = []
        for pos in flatten_positions(skeleton):
            token = pos.literal if pos.literal is not None else intended_value(pos.placeholder, doc)
            intended_ids.append(vocab.id(token))
        return _IntendedSource(intended_ids, len(vocab))

    # ---- fault injection (post-decode text corruption) ----

    def fault_fires(self, case_id: str, iteration: int) -> bool:
        if self.config.fault_script is not None:
            idx = iteration - 1
            return idx < len(self.config.fault_script) and self.config.fault_script[idx]
        if self.config.fault_rate <= 0.0:
            return False
        if self.config.fault_rate >= 1.0:
            return True
        rng = np.random.default_rng(stable_seed(self.config.seed, case_id, "fault", iteration))
        return bool(rng.random() < self.config.fault_rate)

    def corrupt(self, artifact: ConfigArtifact, doc: TopologyDoc, case_id: str) -> ConfigArtifact:
        """Deterministically corrupt one block, the same block every time."""
        kind = self.config.fault_kind
        target = self._fault_target(artifact, doc, case_id, kind)
        if target is None:
            return artifact
        device, text = target, artifact.configs[target]
        addresses = canonical_link_addresses(doc)
        ifaces = doc.interfaces_of(device)
        addressed = [i for i in ifaces if (device, i) in addresses]
        if kind == "bad_interface" and ifaces:
            return artifact.with_config(device, text.replace(f"interface {ifaces[0]}\n", f"interface {ifaces[0]}x\n", 1))
        if kind == "bad_address" and addressed:
            return artifact.with_config(device, text.replace(f" ip address {addresses[(device, addressed[0])]}\n", " ip address 10.99.99.1/24\n", 1))
        if kind == "placeholder_marker" and addressed:
            return artifact.with_config(device, text.replace(f" ip address {addresses[(device, addressed[0])]}\n", " ip address {{ip}}\n", 1))
        if kind == "bad_neighbor":
            match = re.search(r" neighbor (\S+) remote-as", text)
            if match:
                return artifact.with_config(device, text.replace(f" neighbor {match.group(1)} ", " neighbor 10.99.99.9 ", 1))
        return artifact

    def _fault_target(self, artifact: ConfigArtifact, doc: TopologyDoc, case_id: str, kind: str) -> str | None:
        def eligible(device: str) -> bool:
            if device not in artifact.configs:
                return False
            if kind == "bad_interface":
                return bool(doc.interfaces_of(device))
            if kind in ("bad_address", "placeholder_marker"):
                addresses = canonical_link_addresses(doc)
                return any((device, i) in addresses for i in doc.interfaces_of(device))
            return " neighbor " in artifact.configs[device]

        candidates = [d for d in sorted(doc.routers) if eligible(d)]
        if not candidates:
            return None
        rng = np.random.default_rng(stable_seed(self.config.seed, case_id, "fault-target"))
        return candidates[int(rng.integers(len(candidates)))]


# ----------------------------------------------------------- http backend


@dataclass(frozen=True)
class HttpBackendConfig:
    base_url: str
    model: str
    api_key_env: str = "TOPORAG_API_KEY"
    timeout_s: float = 60.0
    temperature: float = 0.0


class HttpBackend:
    """OpenAI-compatible chat-completions client (no logit access)."""

    exposes_distributions = False

    def __init__(self, config: HttpBackendConfig):
        self.config = config

    def complete(self, request: BackendRequest) -> BackendResponse:
        api_key = os.environ.get(self.config.api_key_env, "")
        if not api_key:
            raise BackendError(f"API key environment variable {self.config.api_key_env} is not set")
        system = request.prompt_parts.get("system", "")
        user = "\n\n".join(
            f"## {name}\n{text}" for name, text in sorted(request.prompt_parts.items()) if name != "system" and text
        )
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "max_tokens": request.token_cap,
            "temperature": self.config.temperature,
            "seed": request.seed,
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = requests.post(
                url,
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise BackendError(f"request to {url} failed: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {body!r:.200}") from exc
        tokens = int(body.get("usage", {}).get("completion_tokens") or count_tokens(text))
        if tokens > request.token_cap:
            raise TokenCapExceeded(f"backend reported {tokens} tokens over cap {request.token_cap}")
        return BackendResponse(text=text, tokens_used=tokens)


# ----------------------------------------------------------- backend pool


class BackendPool:
    """Round-robin dispatch over homogeneous replicas.

    A failing replica is retried once on the next replica before the error
    surfaces as AllReplicasFailed. The dispatch log records which replica
    served each request.
    """

    def __init__(self, backends: list):
        if not backends:
            raise ValueError("pool needs at least one backend")
        self.backends = list(backends)
        self.dispatch_log: list[int] = []
        self.failure_log: list[str] = []
        self._cursor = 0

    @property
    def exposes_distributions(self) -> bool:
        return bool(getattr(self.backends[0], "exposes_distributions", False))

    def _next_index(self) -> int:
        idx = self._cursor
        self._cursor = (self._cursor + 1) % len(self.backends)
        return idx

    def acquire(self):
        """Pick the replica for one request (used by the decoding path)."""
        idx = self._next_index()
        self.dispatch_log.append(idx)
        return self.backends[idx]

    def complete(self, request: BackendRequest) -> BackendResponse:
        idx = self._next_index()
        try:
            response = self.backends[idx].complete(request)
            self.dispatch_log.append(idx)
            return response
        except (BackendError, TokenCapExceeded) as first:
            if isinstance(first, TokenCapExceeded):
                raise  # a cap breach will not improve on another replica
            self.failure_log.append(f"replica {idx}: {first}")
            retry_idx = (idx + 1) % len(self.backends)
            try:
                response = self.backends[retry_idx].complete(request)
                self.dispatch_log.append(retry_idx)
                return response
            except BackendError as second:
                self.failure_log.append(f"replica {retry_idx}: {second}")
                raise AllReplicasFailed(
                    f"replicas {idx} and {retry_idx} both failed: {second}"
                ) from second


def backend_pool(backends: list) -> BackendPool:
    return BackendPool(backends)


# ------------------------------------------------------------------ plan


@dataclass
class PlanResult:
    plan: dict
    skeleton: Skeleton
    tokens_used: int


def plan(backend, context: TopoRagContext, env: BudgetEnvelope, seed: int = 0) -> PlanResult:
    """Invoke the planning role; retry twice on contract violations."""
    role = load_role("planning")
    doc = parse_topology(context.target_topology)
    tokens = 0
    violation = ""
    for attempt in range(1 + PLAN_RETRIES):
        parts = {
            "system": role.system_prompt,
            "target_topology": context.target_topology,
            "reference_topology": context.reference_topology,
            "reference_driver": context.reference_driver,
            "background_knowledge": context.background_knowledge,
        }
        if violation:
            parts["violation"] = f"your previous output was rejected: {violation}"
        request = BackendRequest(
            role="planning",
            prompt_parts=parts,
            token_cap=env.token_cap_per_call,
            seed=stable_seed(seed, "plan", attempt),
        )
        response = backend.complete(request)
        tokens += response.tokens_used
        try:
            raw = json.loads(response.text)
            skeleton = Skeleton.from_obj(raw["skeleton"])
            validate_skeleton(skeleton, doc)
            if not isinstance(raw.get("plan"), dict):
                raise ValueError("plan must be a JSON object")
            return PlanResult(plan=raw["plan"], skeleton=skeleton, tokens_used=tokens)
        except (json.JSONDecodeError, KeyError, ValueError, MalformedJson, TypeError) as exc:
            violation = str(exc)
    raise ContractViolation(f"planning output invalid after {1 + PLAN_RETRIES} attempts: {violation}")


# -------------------------------------------------------------- generate


@dataclass
class GenerateResult:
    artifact: ConfigArtifact
    tokens_used: int


def _adapt_driver(context: TopoRagContext, doc: TopologyDoc) -> str:
    """Rename reference-driver devices by sorted-order correspondence."""
    if not context.reference_driver:
        return f"# auto-generated driver for {doc.case_id}\n"
    try:
        ref_doc = parse_topology(context.reference_topology)
    except ToporagError:
        return context.reference_driver
    text = context.reference_driver
    mapping = list(zip(sorted(ref_doc.devices()), sorted(doc.devices())))
    for old, new in mapping:
        text = re.sub(rf"\b{re.escape(old)}\b", new, text)
    return text


def _decode_full(backend, skeleton: Skeleton, doc: TopologyDoc, env: BudgetEnvelope, seed: int,
                 devices: set[str] | None = None) -> tuple[dict[str, str], int]:
    """Constrained decode of the skeleton (optionally restricted to devices)."""
    sub = skeleton if devices is None else Skeleton(
        devices=tuple(d for d in skeleton.devices if d.device in devices)
    )
    vocab = case_vocab(doc, skeleton)
    source = backend.distribution_source(sub, doc, vocab)
    result = decode_with_skeleton(source, sub, doc, vocab, token_cap=env.token_cap_per_call, seed=seed)
    return result.device_texts, result.tokens_used


def _parse_sections(text: str) -> dict[str, str]:
    """Split '=== name ===' sections of a free-text generation response."""
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines(keepends=True):
        match = re.match(r"^===\s*(.+?)\s*===\s*$", line)
        if match:
            current = match.group(1)
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return {k: "".join(v) for k, v in sections.items()}


def _enforce_skeleton(text: str, dev_skeleton: DeviceSkeleton, doc: TopologyDoc,
                      vocab: TokenVocab, skeleton: Skeleton) -> str:
    """Post-hoc constraint enforcement for text-only backends.

    The generated device text is aligned token-wise against the skeleton;
    placeholder values outside their permitted set (and any misaligned
    output) fall back to the lexicographically first permitted token.
    The reconstruction is always skeleton-shaped.
    """
    positions = flatten_positions(skeleton)
    offset = 0
    while offset < len(positions) and positions[offset].device != dev_skeleton.device:
        offset += 1
    generated = iter(tokenize(text))
    parts = []
    cursor = offset
    for seg in dev_skeleton.segments:
        if isinstance(seg, Fixed):
            for _ in range(len(tokenize(seg.text))):
                next(generated, None)
                cursor += 1
            parts.append(seg.text)
            continue
        token = next(generated, None)
        permitted = permitted_tokens(skeleton, cursor, doc, vocab)
        if token is None or token not in vocab or vocab.id(token) not in permitted:
            token = min(vocab.token(i) for i in permitted)
        parts.append(token)
        cursor += 1
    return "".join(parts)


def generate(
    backend,
    context: TopoRagContext,
    plan_obj: dict,
    skeleton: Skeleton,
    patches: list[PatchDirective] | None,
    env: BudgetEnvelope,
    seed: int,
    previous: ConfigArtifact | None = None,
    iteration: int | None = None,
) -> GenerateResult:
    """Produce the iteration's artifact.

    With patches and a previous artifact, substitution edits are applied
    textually and only blocks marked regenerate-block are re-decoded;
    everything else keeps its previous bytes. Without patches the full
    skeleton is decoded (constrained per-token for distribution-exposing
    backends, post-hoc enforced for text-only ones).
    """
    doc = parse_topology(context.target_topology)
    case_id = doc.case_id
    mock = _unwrap_mock(backend)

    if patches and previous is not None:
        artifact, pending = apply_patches(previous, patches, doc)
        tokens = 0
        regen_devices = {p.device for p in pending}
        if regen_devices:
            texts, tokens, _ = _generate_texts(backend, context, plan_obj, skeleton, env, seed, doc, regen_devices, patches)
            for device, text in texts.items():
                artifact = artifact.with_config(device, text)
    else:
        texts, tokens, driver = _generate_texts(backend, context, plan_obj, skeleton, env, seed, doc, None, None)
        artifact = ConfigArtifact(configs=texts, driver=driver or _adapt_driver(context, doc))

    if mock is not None:
        if iteration is None:
            iteration = 1 if previous is None else 2
        degraded = mock.config.require_reference and not context.has_reference and iteration == 1
        if degraded:
            forced = MockBackend(MockBackendConfig(fault_kind="bad_neighbor", seed=mock.config.seed))
            corrupted = forced.corrupt(artifact, doc, case_id)
            if corrupted == artifact:  # no neighbor line to corrupt
                forced = MockBackend(MockBackendConfig(fault_kind="bad_address", seed=mock.config.seed))
                corrupted = forced.corrupt(artifact, doc, case_id)
            artifact = corrupted
        elif mock.fault_fires(case_id, iteration):
            artifact = mock.corrupt(artifact, doc, case_id)
    return GenerateResult(artifact=artifact, tokens_used=tokens)


def _generate_texts(backend, context, plan_obj, skeleton, env, seed, doc, devices, patches):
    """Returns (device texts, tokens used, driver text or None)."""
    if getattr(backend, "exposes_distributions", False):
        decode_backend = backend.acquire() if isinstance(backend, BackendPool) else backend
        texts, tokens = _decode_full(decode_backend, skeleton, doc, env, seed, devices)
        return texts, tokens, None
    role = load_role("generation")
    parts = {
        "system": role.system_prompt,
        "target_topology": context.target_topology,
        "reference_topology": context.reference_topology,
        "reference_driver": context.reference_driver,
        "background_knowledge": context.background_knowledge,
        "plan": json.dumps(plan_obj, sort_keys=True),
        "skeleton": skeleton.to_json(),
    }
    if patches:
        parts["patches"] = json.dumps([p.to_obj() for p in patches], sort_keys=True)
    if devices:
        parts["regenerate_only"] = ", ".join(sorted(devices))
    request = BackendRequest(
        role="generation", prompt_parts=parts, token_cap=env.token_cap_per_call, seed=seed
    )
    response = backend.complete(request)
    sections = _parse_sections(response.text)
    vocab = case_vocab(doc, skeleton)
    texts = {}
    wanted = devices if devices is not None else {d.device for d in skeleton.devices}
    for dev_skeleton in skeleton.devices:
        if dev_skeleton.device not in wanted:
            continue
        raw = sections.get(dev_skeleton.device, "")
        texts[dev_skeleton.device] = _enforce_skeleton(raw, dev_skeleton, doc, vocab, skeleton)
    return texts, response.tokens_used, sections.get("driver")


def _unwrap_mock(backend) -> MockBackend | None:
    if isinstance(backend, MockBackend):
        return backend
    if isinstance(backend, BackendPool) and isinstance(backend.backends[0], MockBackend):
        return backend.backends[0]
    return None


# ------------------------------------------------------------------ loop


PHASES = ("PLAN", "GENERATE", "VERIFY", "REPAIR", "PASSED", "CAPPED")
_TRANSITIONS = {
    "PLAN": {"GENERATE", "CAPPED"},
    "GENERATE": {"VERIFY", "CAPPED"},
    "VERIFY": {"PASSED", "REPAIR", "CAPPED"},
    "REPAIR": {"GENERATE", "CAPPED"},
}


@dataclass
class CaseState:
    """Mutable per-case loop state; transitions are validated."""

    case_id: str
    context: TopoRagContext
    envelope: BudgetEnvelope
    phase: str = "PLAN"
    iteration: int = 0
    pass_iteration: int | None = None
    tokens_total: int = 0
    verify_runs: int = 0
    failure_mode: str | None = None
    phase_history: list[str] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.phase_history.append(self.phase)

    def transition(self, new_phase: str) -> None:
        if new_phase not in _TRANSITIONS.get(self.phase, set()):
            raise RuntimeError(f"illegal phase transition {self.phase} -> {new_phase}")
        self.phase = new_phase
        self.phase_history.append(new_phase)

    def to_obj(self) -> dict:
        return {
            "case_id": self.case_id,
            "reference_id": self.context.reference_id,
            "similarity": self.context.similarity,
            "envelope": {
                "token_cap_per_call": self.envelope.token_cap_per_call,
                "max_iterations": self.envelope.max_iterations,
                "difficulty": self.envelope.difficulty,
            },
            "phase": self.phase,
            "iteration": self.iteration,
            "pass_iteration": self.pass_iteration,
            "tokens_total": self.tokens_total,
            "verify_runs": self.verify_runs,
            "failure_mode": self.failure_mode,
            "phase_history": self.phase_history,
            "iterations": self.iterations,
            "timing": {k: round(v, 6) for k, v in sorted(self.wall_clock.items())},
        }


@dataclass
class CaseRunConfig:
    out_dir: Path
    seed: int = 0
    n_trim: int = 10
    calibration: Calibration = field(default_factory=Calibration)
    envelope_override: BudgetEnvelope | None = None


class _PhaseTimer:
    def __init__(self, state: CaseState, phase_name: str):
        self.state = state
        self.name = phase_name

    def __enter__(self):
        self.start = time.perf_counter()

    def __exit__(self, *exc):
        self.state.wall_clock[self.name] = self.state.wall_clock.get(self.name, 0.0) + (
            time.perf_counter() - self.start
        )


def compute_envelope(context: TopoRagContext, calibration: Calibration) -> BudgetEnvelope:
    doc = parse_topology(context.target_topology)
    graph = build_graph(doc)
    inputs = DifficultyInputs(
        s_star=context.similarity,
        n_nodes=max(graph.n_nodes, 1),
        n_edges=graph.n_edges,
        max_degree=graph.max_degree,
    )
    return envelope(difficulty(inputs, calibration))


def run_case(case_id: str, context: TopoRagContext, backends, config: CaseRunConfig) -> CaseState:
    """Drive one case PLAN -> (GENERATE -> VERIFY -> REPAIR)* to a terminal
    phase, persisting every iteration's artifacts under the case directory."""
    env = config.envelope_override or compute_envelope(context, config.calibration)
    state = CaseState(case_id=case_id, context=context, envelope=env)
    case_dir = Path(config.out_dir) / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    (case_dir / "context.json").write_text(
        to_json(
            {
                "target_topology": context.target_topology,
                "reference_topology": context.reference_topology,
                "reference_driver": context.reference_driver,
                "background_knowledge": context.background_knowledge,
                "similarity": context.similarity,
                "reference_id": context.reference_id,
            }
        ),
        encoding="utf-8",
    )
    doc = parse_topology(context.target_topology)

    try:
        with _PhaseTimer(state, "plan"):
            plan_result = plan(backends, context, env, seed=config.seed)
        state.tokens_total += plan_result.tokens_used
        (case_dir / "plan.json").write_text(to_json(plan_result.plan), encoding="utf-8")
        (case_dir / "skeleton.json").write_text(plan_result.skeleton.to_json(), encoding="utf-8")
    except (ContractViolation, TokenCapExceeded, AllReplicasFailed, BackendError, ToporagError) as exc:
        state.failure_mode = _failure_mode(exc)
        state.iterations.append({"iteration": 0, "error": str(exc)})
        state.transition("CAPPED")
        _write_state(state, case_dir)
        return state

    artifact: ConfigArtifact | None = None
    patches: list[PatchDirective] | None = None
    while state.iteration < env.max_iterations:
        state.iteration += 1
        iter_dir = case_dir / f"iter_{state.iteration}"
        (iter_dir / "configs").mkdir(parents=True, exist_ok=True)
        iter_record: dict = {"iteration": state.iteration}

        state.transition("GENERATE")
        try:
            with _PhaseTimer(state, "generate"):
                gen = generate(
                    backends,
                    context,
                    plan_result.plan,
                    plan_result.skeleton,
                    patches,
                    env,
                    seed=stable_seed(config.seed, case_id, "gen", state.iteration),
                    previous=artifact,
                    iteration=state.iteration,
                )
        except (TokenCapExceeded, EmptyPermittedSet, AllReplicasFailed, BackendError) as exc:
            state.failure_mode = _failure_mode(exc)
            iter_record["error"] = str(exc)
            state.iterations.append(iter_record)
            state.transition("CAPPED")
            _write_state(state, case_dir)
            return state
        artifact = gen.artifact
        state.tokens_total += gen.tokens_used
        iter_record["tokens_used"] = gen.tokens_used
        for device, text in sorted(artifact.configs.items()):
            (iter_dir / "configs" / f"{device}.conf").write_text(text, encoding="utf-8")
        (iter_dir / "driver.py").write_text(artifact.driver, encoding="utf-8")

        state.transition("VERIFY")
        with _PhaseTimer(state, "verify"):
            verdict = verify(artifact, doc)
        state.verify_runs += 1
        (iter_dir / "verdict.json").write_text(to_json(verdict.to_obj()), encoding="utf-8")
        iter_record["passed"] = verdict.passed
        iter_record["violations"] = len(verdict.violations)
        state.iterations.append(iter_record)

        if verdict.passed:
            state.pass_iteration = state.iteration
            state.transition("PASSED")
            _write_state(state, case_dir)
            return state

        if state.iteration >= env.max_iterations:
            state.failure_mode = "persistent_verify_fail"
            state.transition("CAPPED")
            _write_state(state, case_dir)
            return state

        state.transition("REPAIR")
        with _PhaseTimer(state, "repair"):
            trace = trim(verdict, config.n_trim)
            patches = propose_patches(trace, artifact, doc)
        (iter_dir / "trace.json").write_text(to_json(trace.to_obj()), encoding="utf-8")
        (iter_dir / "patches.json").write_text(
            to_json([p.to_obj() for p in patches]), encoding="utf-8"
        )

    state.failure_mode = state.failure_mode or "persistent_verify_fail"
    state.transition("CAPPED")
    _write_state(state, case_dir)
    return state


def _failure_mode(exc: Exception) -> str:
    if isinstance(exc, ContractViolation):
        return "contract_violation"
    if isinstance(exc, EmptyPermittedSet):
        return "empty_constraint"
    if isinstance(exc, TokenCapExceeded):
        return "token_cap_exceeded"
    if isinstance(exc, (AllReplicasFailed, BackendError)):
        return "backend_error"
    return "backend_error"


def _write_state(state: CaseState, case_dir: Path) -> None:
    (case_dir / "state.json").write_text(to_json(state.to_obj()), encoding="utf-8")
