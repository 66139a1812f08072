"""Skeleton-driven constrained decoding.

A skeleton is an ordered list of per-device segments, each either a fixed
literal or a typed placeholder bound to topology entities. At every
decoding position the permitted token set is derived from the skeleton
(fixed positions force the next literal token; placeholder positions
enumerate schema-valid candidates), the backend's next-token distribution
is masked and renormalized onto it, and one token is sampled:

    p(y) = p_base(y) * [y in C] / sum_{v in C} p_base(v)

If the permitted mass is below 1e-12 the masked distribution falls back to
uniform over C, so an adversarial backend can never force schema-invalid
output.

The vocabulary is word-level: whitespace-delimited words with standalone
punctuation split off; dotted quads, prefixes, and interface names stay
single tokens. Id 0 is reserved for the end-of-output marker.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import (
    CursorOutOfRange,
    EmptyConstraint,
    EmptyPermittedSet,
    MalformedJson,
    TokenCapExceeded,
)
from .topo import TopologyDoc

END_TOKEN = "<end>"
PLACEHOLDER_KINDS = ("iface", "ip4_addr", "ip4_prefix", "asn", "keyword", "device_ref")
PERMITTED_MASS_FLOOR = 1e-12

_SPLIT_PUNCT = set(",;:!?()[]{}\"'")
_IP4_RE = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")
_IP4_PREFIX_RE = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})/(\d{1,2})$")
_INT_RE = re.compile(r"^\d+$")


def tokenize(text: str) -> list[str]:
    """Whitespace-split words; peel standalone punctuation into 1-char tokens.

    Characters like '.', '/', '-' stay inside words so addresses, prefixes,
    and interface names remain single tokens.
    """
    out: list[str] = []
    for chunk in text.split():
        lead = []
        while chunk and chunk[0] in _SPLIT_PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _SPLIT_PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        out.extend(lead)
        if chunk:
            out.append(chunk)
        out.extend(reversed(trail))
    return out


def is_ip4_addr(token: str) -> bool:
    m = _IP4_RE.match(token)
    return bool(m) and all(int(g) <= 255 for g in m.groups())


def is_ip4_prefix(token: str) -> bool:
    m = _IP4_PREFIX_RE.match(token)
    return bool(m) and all(int(g) <= 255 for g in m.groups()[:4]) and int(m.group(5)) <= 32


class TokenVocab:
    """Bijective token string <-> integer id map; id 0 is end-of-output."""

    def __init__(self, tokens: list[str]):
        if not tokens or tokens[0] != END_TOKEN:
            raise ValueError(f"vocab must start with the reserved {END_TOKEN!r} token")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @staticmethod
    def build(texts, extra_tokens=()) -> "TokenVocab":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        seen.update(extra_tokens)
        seen.discard(END_TOKEN)
        return TokenVocab([END_TOKEN] + sorted(seen))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def tokens(self) -> list[str]:
        return list(self._tokens)

    def ids_matching(self, predicate) -> set[int]:
        return {i for i, tok in enumerate(self._tokens) if i != 0 and predicate(tok)}


@dataclass(frozen=True)
class Fixed:
    text: str


@dataclass(frozen=True)
class Placeholder:
    kind: str
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PLACEHOLDER_KINDS:
            raise ValueError(f"unknown placeholder kind {self.kind!r}")


Segment = Fixed | Placeholder


@dataclass(frozen=True)
class DeviceSkeleton:
    device: str
    segments: tuple[Segment, ...]


@dataclass(frozen=True)
class Skeleton:
    devices: tuple[DeviceSkeleton, ...]

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True, indent=2) + "\n"

    def to_obj(self) -> list[dict]:
        out = []
        for dev in self.devices:
            segments = []
            for seg in dev.segments:
                if isinstance(seg, Fixed):
                    segments.append({"fixed": seg.text})
                else:
                    segments.append({"ph": {"kind": seg.kind, "args": seg.args}})
            out.append({"device": dev.device, "segments": segments})
        return out

    @staticmethod
    def from_obj(raw) -> "Skeleton":
        if not isinstance(raw, list):
            raise MalformedJson("skeleton must be a JSON array of device objects")
        devices = []
        for dev in raw:
            if not isinstance(dev, dict) or "device" not in dev or "segments" not in dev:
                raise MalformedJson(f"bad device skeleton entry: {dev!r}")
            segments: list[Segment] = []
            for seg in dev["segments"]:
                if "fixed" in seg:
                    segments.append(Fixed(str(seg["fixed"])))
                elif "ph" in seg:
                    ph = seg["ph"]
                    segments.append(Placeholder(kind=ph["kind"], args=dict(ph.get("args", {}))))
                else:
                    raise MalformedJson(f"segment is neither fixed nor ph: {seg!r}")
            devices.append(DeviceSkeleton(device=str(dev["device"]), segments=tuple(segments)))
        return Skeleton(devices=tuple(devices))

    @staticmethod
    def from_json(text: str) -> "Skeleton":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedJson(f"invalid skeleton JSON: {exc}") from exc
        return Skeleton.from_obj(raw)


def validate_skeleton(skeleton: Skeleton, doc: TopologyDoc) -> None:
    """Check every placeholder's bound entities against the topology."""
    devices = doc.devices()
    for dev in skeleton.devices:
        if dev.device not in devices:
            raise ValueError(f"skeleton device {dev.device!r} not in topology")
        for seg in dev.segments:
            if isinstance(seg, Fixed):
                continue
            bound = seg.args.get("device")
            if seg.kind in ("iface", "asn") and bound is not None and bound not in devices:
                raise ValueError(f"placeholder {seg.kind} bound to unknown device {bound!r}")
            if seg.kind == "iface" and bound is None:
                raise ValueError("iface placeholder requires a device binding")
            if seg.kind == "keyword" and not seg.args.get("allowed"):
                raise ValueError("keyword placeholder requires a non-empty allowed list")


@dataclass(frozen=True)
class Position:
    """One decoding step: either a forced literal or a placeholder slot."""

    device: str
    segment_index: int
    literal: str | None = None
    placeholder: Placeholder | None = None


def flatten_positions(skeleton: Skeleton) -> list[Position]:
    positions = []
    for dev in skeleton.devices:
        for si, seg in enumerate(dev.segments):
            if isinstance(seg, Fixed):
                for tok in tokenize(seg.text):
                    positions.append(Position(device=dev.device, segment_index=si, literal=tok))
            else:
                positions.append(Position(device=dev.device, segment_index=si, placeholder=seg))
    return positions


@dataclass(frozen=True)
class ConstraintSet:
    cursor: int
    permitted: frozenset[int]


def permitted_tokens(
    skeleton: Skeleton, cursor: int, topo: TopologyDoc, vocab: TokenVocab
) -> set[int]:
    """Permitted token ids for the given flattened skeleton position."""
    positions = flatten_positions(skeleton)
    if not 0 <= cursor < len(positions):
        raise CursorOutOfRange(f"cursor {cursor} outside skeleton of {len(positions)} positions")
    pos = positions[cursor]

    if pos.literal is not None:
        if pos.literal not in vocab:
            raise EmptyPermittedSet(f"literal token {pos.literal!r} missing from vocabulary")
        return {vocab.id(pos.literal)}

    ph = pos.placeholder
    assert ph is not None
    if ph.kind == "iface":
        device = ph.args.get("device")
        if device not in topo.devices():
            raise EmptyPermittedSet(f"iface placeholder bound to unknown device {device!r}")
        ids = {vocab.id(i) for i in topo.interfaces_of(device) if i in vocab}
    elif ph.kind == "ip4_addr":
        ids = vocab.ids_matching(is_ip4_addr)
    elif ph.kind == "ip4_prefix":
        ids = vocab.ids_matching(is_ip4_prefix)
    elif ph.kind == "asn":
        ids = vocab.ids_matching(lambda t: bool(_INT_RE.match(t)))
    elif ph.kind == "keyword":
        ids = {vocab.id(k) for k in ph.args.get("allowed", []) if k in vocab}
    elif ph.kind == "device_ref":
        ids = {vocab.id(d) for d in sorted(topo.devices()) if d in vocab}
    else:  # unreachable: Placeholder validates its kind
        raise EmptyPermittedSet(f"unsupported placeholder kind {ph.kind!r}")

    if not ids:
        raise EmptyPermittedSet(
            f"no vocabulary token satisfies {ph.kind} placeholder at position {cursor} "
            f"(device {pos.device!r}); schema/topology mismatch"
        )
    return ids


def constraint_at(skeleton: Skeleton, cursor: int, topo: TopologyDoc, vocab: TokenVocab) -> ConstraintSet:
    return ConstraintSet(cursor=cursor, permitted=frozenset(permitted_tokens(skeleton, cursor, topo, vocab)))


def constrain(dist: np.ndarray, permitted: set[int]) -> np.ndarray:
    """Mask a next-token distribution to the permitted set and renormalize.

    Falls back to uniform over the permitted set when the permitted mass is
    effectively zero; the result always sums to 1 and is zero off-support.
    """
    if not permitted:
        raise EmptyConstraint("permitted token set is empty")
    dist = np.asarray(dist, dtype=float)
    idx = np.fromiter(permitted, dtype=int)
    if idx.min() < 0 or idx.max() >= dist.shape[0]:
        raise EmptyConstraint("permitted set references tokens outside the vocabulary")
    if len(permitted) == dist.shape[0]:
        return dist.copy()  # full support: exact identity, no renormalization
    out = np.zeros_like(dist)
    mass = dist[idx].sum()
    if mass < PERMITTED_MASS_FLOOR:
        out[idx] = 1.0 / len(idx)
    else:
        out[idx] = dist[idx] / mass
    return out


class StepwiseDistributionSource(Protocol):
    """Anything that yields a next-token distribution given the prefix."""

    def next_distribution(self, prefix: list[int]) -> np.ndarray: ...


@dataclass
class DecodeResult:
    device_texts: dict[str, str]
    tokens_used: int
    token_ids: list[int]


def decode_with_skeleton(
    backend: StepwiseDistributionSource,
    skeleton: Skeleton,
    topo: TopologyDoc,
    vocab: TokenVocab,
    token_cap: int,
    seed: int,
    greedy: bool = False,
) -> DecodeResult:
    """Walk the skeleton, masking the backend distribution at every step.

    Fixed segments are emitted verbatim (each of their tokens still costs a
    decoding step under the singleton constraint); placeholder slots emit
    the sampled token. Raises TokenCapExceeded if the skeleton is not
    finished within token_cap steps.
    """
    if token_cap < 1:
        raise ValueError("token_cap must be at least 1")
    rng = np.random.default_rng(seed)
    device_parts: dict[str, list[str]] = {dev.device: [] for dev in skeleton.devices}
    prefix: list[int] = []
    tokens_used = 0
    cursor = 0

    for dev in skeleton.devices:
        for seg in dev.segments:
            steps = len(tokenize(seg.text)) if isinstance(seg, Fixed) else 1
            sampled: list[str] = []
            for _ in range(steps):
                if tokens_used >= token_cap:
                    raise TokenCapExceeded(
                        f"skeleton unfinished after {tokens_used} tokens (cap {token_cap})"
                    )
                permitted = permitted_tokens(skeleton, cursor, topo, vocab)
                dist = constrain(backend.next_distribution(prefix), permitted)
                if greedy:
                    token_id = int(np.argmax(dist))
                else:
                    token_id = int(rng.choice(len(dist), p=dist))
                prefix.append(token_id)
                sampled.append(vocab.token(token_id))
                tokens_used += 1
                cursor += 1
            if isinstance(seg, Fixed):
                device_parts[dev.device].append(seg.text)  # verbatim, not re-joined
            else:
                device_parts[dev.device].append(sampled[0])

    return DecodeResult(
        device_texts={dev: "".join(parts) for dev, parts in device_parts.items()},
        tokens_used=tokens_used,
        token_ids=prefix,
    )
