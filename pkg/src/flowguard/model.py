"""Domain types for call-tree traces and the protected-protocol configuration.

Everything here is immutable after construction and safe to share between
threads. Byte widths are enforced at construction time; structural trace
invariants are checked by :func:`validate_trace`, which reports violations
as data rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

from .keccak import keccak256

WEI_MAX = 1 << 256

# Synthesized funcIDs live above this bound; registered ones must stay below.
REGISTERED_FUNC_ID_LIMIT = 1 << 20


def _check_width(raw: bytes, width: int, what: str) -> None:
    if not isinstance(raw, bytes) or len(raw) != width:
        raise ValueError(f"{what} must be exactly {width} bytes, got {raw!r}")


def _parse_hex(text: str, width: int, what: str) -> bytes:
    if not isinstance(text, str) or not text.startswith("0x"):
        raise ValueError(f"{what} must be a 0x-prefixed hex string, got {text!r}")
    body = text[2:]
    if len(body) != 2 * width:
        raise ValueError(f"{what} must encode {width} bytes, got {text!r}")
    return bytes.fromhex(body)


@dataclass(frozen=True, slots=True)
class Address:
    """A 20-byte account address, rendered as lowercase 0x hex."""

    raw: bytes

    def __post_init__(self):
        _check_width(self.raw, 20, "address")

    @classmethod
    def from_hex(cls, text: str) -> "Address":
        return cls(_parse_hex(text, 20, "address"))

    def hex(self) -> str:
        return "0x" + self.raw.hex()

    def __str__(self) -> str:
        return self.hex()


@dataclass(frozen=True, slots=True)
class Selector:
    """First four bytes of calldata; absent for plain transfers/fallback."""

    raw: bytes

    def __post_init__(self):
        _check_width(self.raw, 4, "selector")

    @classmethod
    def from_hex(cls, text: str) -> "Selector":
        return cls(_parse_hex(text, 4, "selector"))

    def hex(self) -> str:
        return "0x" + self.raw.hex()

    def __str__(self) -> str:
        return self.hex()


@dataclass(frozen=True, slots=True)
class Word:
    """A 32-byte storage slot index or storage value."""

    raw: bytes

    def __post_init__(self):
        _check_width(self.raw, 32, "word")

    @classmethod
    def from_hex(cls, text: str) -> "Word":
        return cls(_parse_hex(text, 32, "word"))

    @classmethod
    def from_int(cls, value: int) -> "Word":
        return cls(value.to_bytes(32, "big"))

    def hex(self) -> str:
        return "0x" + self.raw.hex()

    def __str__(self) -> str:
        return self.hex()


@dataclass(frozen=True, slots=True)
class StorageKey:
    """A storage slot qualified by the contract whose storage it lives in."""

    contract: Address
    slot: Word


class CallKind(Enum):
    CALL = "call"
    DELEGATECALL = "delegatecall"
    STATICCALL = "staticcall"
    CREATE = "create"


class MutationKind(Enum):
    ETHER_TRANSFER = "ether"
    SELF_DESTRUCT = "selfdestruct"
    CREATE = "create"
    OTHER = "other"


class FrameEvent:
    """Marker base for the event union inside a call frame."""

    __slots__ = ()


@dataclass(frozen=True, slots=True)
class Read(FrameEvent):
    key: StorageKey
    value: Word


@dataclass(frozen=True, slots=True)
class Write(FrameEvent):
    key: StorageKey
    value: Word


@dataclass(frozen=True, slots=True)
class StateMutation(FrameEvent):
    kind: MutationKind


@dataclass(frozen=True, slots=True)
class SubCall(FrameEvent):
    frame: "CallFrame"


@dataclass(frozen=True, slots=True)
class CallFrame:
    kind: CallKind
    caller: Address
    callee: Address
    selector: Optional[Selector]
    value: int
    events: tuple[FrameEvent, ...] = ()
    reverted: bool = False

    def __post_init__(self):
        if not 0 <= self.value < WEI_MAX:
            raise ValueError(f"call value out of range: {self.value}")

    def context_address(self, parent_context: Address) -> Address:
        """Storage context this frame executes in.

        Delegatecalls run the callee's code against the caller's storage,
        so they inherit the parent context; everything else executes as
        the callee.
        """
        if self.kind is CallKind.DELEGATECALL:
            return parent_context
        return self.callee

    def subcalls(self) -> Iterator["CallFrame"]:
        for ev in self.events:
            if isinstance(ev, SubCall):
                yield ev.frame


class Label(Enum):
    BENIGN = "benign"
    ATTACK = "attack"


@dataclass(frozen=True, slots=True)
class TransactionTrace:
    tx_hash: bytes
    block_number: int
    index_in_block: int
    origin: Address
    root: CallFrame
    label: Optional[Label] = None
    lossy: bool = False

    def __post_init__(self):
        _check_width(self.tx_hash, 32, "txHash")
        if self.block_number < 0 or self.index_in_block < 0:
            raise ValueError("block number and index must be non-negative")

    def position(self) -> tuple[int, int]:
        return (self.block_number, self.index_in_block)

    def tx_hash_hex(self) -> str:
        return "0x" + self.tx_hash.hex()


class AddressClass(Enum):
    PROTECTED = "protected"
    EXTERNAL = "external"
    UNTRUSTED = "untrusted"


@dataclass(frozen=True, slots=True)
class FunctionMeta:
    address: Address
    selector: Optional[Selector]
    func_id: int
    static_read_only: bool = False
    erc20_benign: bool = False
    eoa_bypass_eligible: bool = False
    privileged: bool = False

    def __post_init__(self):
        if self.func_id < 1:
            raise ValueError("funcID must be a positive integer")

    @property
    def key(self) -> tuple[Address, Optional[Selector]]:
        return (self.address, self.selector)


@dataclass(frozen=True, slots=True)
class TxPosition:
    block_number: int
    index_in_block: int

    def as_tuple(self) -> tuple[int, int]:
        return (self.block_number, self.index_in_block)


@dataclass(frozen=True, slots=True)
class DisabledWindow:
    """Inclusive span of corpus positions during which the guard is off."""

    start: TxPosition
    end: TxPosition

    def contains(self, trace: TransactionTrace) -> bool:
        return self.start.as_tuple() <= trace.position() <= self.end.as_tuple()


@dataclass(frozen=True)
class ProtocolConfig:
    protected: frozenset[Address]
    external: frozenset[Address] = frozenset()
    admins: frozenset[Address] = frozenset()
    other_protocols: frozenset[Address] = frozenset()
    functions: dict[tuple[Address, Optional[Selector]], FunctionMeta] = field(
        default_factory=dict
    )
    static_restore_slots: frozenset[StorageKey] = frozenset()
    disabled_windows: tuple[DisabledWindow, ...] = ()
    # Memo for synthesized metas; keyed like `functions`. Not part of the
    # config's value (identical lookups must stay deterministic per config).
    _synth: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self) -> list[str]:
        """Return every configuration invariant violation."""
        problems = []
        overlap = self.protected & self.external
        for addr in sorted(overlap, key=lambda a: a.raw):
            problems.append(f"address {addr} is both protected and external")
        seen_ids: dict[int, tuple] = {}
        for key, meta in self.functions.items():
            addr, sel = key
            where = f"function {addr}/{sel.hex() if sel else 'fallback'}"
            if key != meta.key:
                problems.append(f"{where}: registry key does not match meta")
            if addr not in self.protected:
                problems.append(f"{where}: address is not protected")
            if meta.func_id >= REGISTERED_FUNC_ID_LIMIT:
                problems.append(
                    f"{where}: registered funcID {meta.func_id} must be "
                    f"< {REGISTERED_FUNC_ID_LIMIT}"
                )
            if meta.func_id in seen_ids and seen_ids[meta.func_id] != key:
                problems.append(f"{where}: duplicate funcID {meta.func_id}")
            seen_ids.setdefault(meta.func_id, key)
            if meta.static_read_only and meta.erc20_benign:
                problems.append(
                    f"{where}: staticReadOnly and erc20Benign are mutually exclusive"
                )
        for skey in self.static_restore_slots:
            if skey.contract not in self.protected:
                problems.append(
                    f"staticRestoreSlots: contract {skey.contract} is not protected"
                )
        for window in self.disabled_windows:
            if window.start.as_tuple() > window.end.as_tuple():
                problems.append(
                    f"guardDisabledWindows: start {window.start} after end {window.end}"
                )
        return problems

    def in_disabled_window(self, trace: TransactionTrace) -> bool:
        return any(w.contains(trace) for w in self.disabled_windows)


def classify_address(config: ProtocolConfig, addr: Address) -> AddressClass:
    """Partition an address into protected / external / untrusted.

    EOAs have no registry entry and therefore land in UNTRUSTED, which is
    the right bucket for call-flow purposes.
    """
    if addr in config.protected:
        return AddressClass.PROTECTED
    if addr in config.external:
        return AddressClass.EXTERNAL
    return AddressClass.UNTRUSTED


def _synthesize_func_id(config: ProtocolConfig, addr: Address, selector) -> int:
    digest = keccak256(addr.raw + (selector.raw if selector else b""))
    base = REGISTERED_FUNC_ID_LIMIT + (
        int.from_bytes(digest[:4], "big") & 0x7FFFFFFF
    )
    used = config._synth.setdefault("ids", set())
    candidate = base
    while candidate in used:
        candidate += 1
    used.add(candidate)
    return candidate


def function_meta(
    config: ProtocolConfig, callee: Address, selector: Optional[Selector]
) -> FunctionMeta:
    """Look up (or deterministically synthesize) the meta for a protected function.

    Unregistered functions get a stable hash-derived funcID in a range
    disjoint from registered IDs, with all behavior flags off.
    """
    if callee not in config.protected:
        raise ValueError(f"{callee} is not a protected contract")
    meta = config.functions.get((callee, selector))
    if meta is not None:
        return meta
    cached = config._synth.get((callee, selector))
    if cached is not None:
        return cached
    meta = FunctionMeta(
        address=callee,
        selector=selector,
        func_id=_synthesize_func_id(config, callee, selector),
    )
    config._synth[(callee, selector)] = meta
    return meta


@dataclass(frozen=True, slots=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def _validate_frame(
    frame: CallFrame,
    parent_context: Address,
    path: str,
    in_static: bool,
    out: list[Violation],
) -> None:
    context = frame.context_address(parent_context)
    static_here = in_static or frame.kind is CallKind.STATICCALL
    for i, ev in enumerate(frame.events):
        here = f"{path}.events[{i}]"
        if isinstance(ev, Write):
            if static_here:
                out.append(Violation(here, "write inside a staticcall subtree"))
        elif isinstance(ev, StateMutation):
            if static_here:
                out.append(
                    Violation(here, "state mutation inside a staticcall subtree")
                )
        elif isinstance(ev, SubCall):
            child = ev.frame
            if child.caller != context:
                out.append(
                    Violation(
                        here,
                        f"caller {child.caller} does not match enclosing "
                        f"context {context}",
                    )
                )
            _validate_frame(child, context, here, static_here, out)


def validate_trace(trace: TransactionTrace) -> list[Violation]:
    """Check structural invariants of a trace; an empty list means well-formed."""
    out: list[Violation] = []
    if trace.root.caller != trace.origin:
        out.append(
            Violation(
                "root",
                f"root caller {trace.root.caller} is not the origin {trace.origin}",
            )
        )
    _validate_frame(trace.root, trace.origin, "root", False, out)
    return out


@dataclass(frozen=True, slots=True)
class RuntimeProps:
    """Tracked per-execution outcome: runtime read-only and read-after-write."""

    read_only: bool
    raw_dependent: bool
