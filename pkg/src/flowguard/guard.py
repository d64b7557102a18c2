"""The guard state machine: invocation counting, flow hashing, verdicts.

One :class:`GuardState` protects one protocol. Its transient fields mirror
transaction-scoped storage and are wiped by :func:`reset_transient` before
every transaction; the pattern whitelist and the disabled flag persist.

A flow pattern is the bracket sequence of surviving funcIDs for one
invocation (+id on entry, -id on exit, read-only executions removed), and
its identity is a keccak-256 left fold over that sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

from .errors import GuardProtocolError, NegativeSumError
from .keccak import keccak256
from .model import RuntimeProps
from .policy import PolicyToggles, revert_condition

UNSAFE_PATTERN = "Unsafe pattern detected"

EMPTY_TRACE_HASH = b"\x00" * 32

# Counts pop-safety assertion failures for diagnostics; a correct walker
# never trips this.
_pop_mismatches = 0


@dataclass(frozen=True, slots=True)
class Verdict:
    allowed: bool
    reason: Optional[str] = None

    @property
    def is_revert(self) -> bool:
        return not self.allowed

    def __str__(self) -> str:
        return "Allow" if self.allowed else f"Revert: {self.reason}"


ALLOW = Verdict(True)
REVERT_UNSAFE = Verdict(False, UNSAFE_PATTERN)


@dataclass(frozen=True, slots=True)
class InvocationRecord:
    """One top-level entry into the protected set within a transaction.

    ``inv_num`` is the 1-based ordinal of the entry among all top-level
    entries of its transaction, skipped ones included.
    """

    inv_num: int
    simplified_trace: tuple[int, ...]
    cf_hash: bytes
    props: RuntimeProps
    skipped: bool
    entry_func_id: int


class GuardState:
    """Mutable guard-contract state; single-threaded per transaction."""

    __slots__ = (
        "sum",
        "inv_count",
        "effective_inv_count",
        "call_trace",
        "is_cf_reentrancy",
        "is_cf_raw",
        "allowed_patterns",
        "disabled",
        "last_completed",
    )

    def __init__(self, allowed_patterns: Iterable[bytes] = (), disabled: bool = False):
        self.allowed_patterns: set[bytes] = set(allowed_patterns)
        self.disabled = disabled
        self.sum = 0
        self.inv_count = 0
        self.effective_inv_count = 0
        self.call_trace: list[int] = []
        self.is_cf_reentrancy = False
        self.is_cf_raw = False
        # (trace segment, hash, nonempty) of the most recently completed
        # invocation; cleared by every event that does not complete one.
        self.last_completed: Optional[tuple[tuple[int, ...], bytes, bool]] = None


def reset_transient(state: GuardState) -> None:
    """Zero the transaction-scoped fields; whitelist and disabled survive."""
    state.sum = 0
    state.inv_count = 0
    state.effective_inv_count = 0
    state.call_trace.clear()
    state.is_cf_reentrancy = False
    state.is_cf_raw = False
    state.last_completed = None


def enter_func(state: GuardState, func_id: int) -> int:
    """Record entry into a protected function; returns the invocation count.

    A zero open-frame sum means a fresh invocation; anything else means the
    protected set was re-entered while another protected function is open.
    """
    if func_id <= 0:
        raise ValueError(f"funcID must be positive, got {func_id}")
    if state.disabled:
        raise GuardProtocolError("enter_func on a disabled guard")
    if state.sum == 0:
        state.inv_count += 1
    else:
        state.is_cf_reentrancy = True
    state.sum += func_id
    state.call_trace.append(func_id)
    state.last_completed = None
    return state.inv_count


def exit_func(
    state: GuardState,
    func_id: int,
    read_only: bool,
    raw_dependent: bool,
    toggles: PolicyToggles,
) -> Verdict:
    """Record exit from a protected function and, at invocation completion,
    render the verdict.

    Read-only executions are removed from the flow (their entry is popped);
    everything else pushes the negated funcID as an end marker. The revert
    check runs only when the sum returns to zero, so re-entrant patterns are
    judged whole -- otherwise whitelisted nested flows could never complete.
    """
    global _pop_mismatches
    state.sum -= func_id
    if state.sum < 0:
        raise NegativeSumError(
            f"exit of funcID {func_id} drives the open-frame sum negative"
        )
    if read_only:
        if not state.call_trace or state.call_trace[-1] != func_id:
            _pop_mismatches += 1
            top = state.call_trace[-1] if state.call_trace else None
            raise GuardProtocolError(
                f"read-only pop expected {func_id} on top of the call trace, "
                f"found {top}"
            )
        state.call_trace.pop()
    else:
        state.call_trace.append(-func_id)
    if raw_dependent:
        state.is_cf_raw = True
    if state.sum != 0:
        state.last_completed = None
        return ALLOW
    segment = tuple(state.call_trace)
    state.call_trace.clear()
    cf_hash = compute_cf_hash(segment)
    nonempty = bool(segment)
    if nonempty:
        state.effective_inv_count += 1
    state.last_completed = (segment, cf_hash, nonempty)
    if revert_condition(state, toggles, cf_hash, nonempty):
        return REVERT_UNSAFE
    return ALLOW


@lru_cache(maxsize=1 << 16)
def _fold_step(entry: int, acc: bytes) -> bytes:
    return keccak256((entry % (1 << 256)).to_bytes(32, "big") + acc)


def compute_cf_hash(trace: Sequence[int]) -> bytes:
    """Left-fold keccak-256 over a signed funcID sequence.

    Each step hashes the 32-byte big-endian two's-complement entry
    concatenated with the running hash; the empty sequence maps to 32 zero
    bytes. Flow patterns repeat heavily across a corpus, so fold steps are
    memoized.
    """
    acc = EMPTY_TRACE_HASH
    for entry in trace:
        acc = _fold_step(entry, acc)
    return acc


def whitelist_add(state: GuardState, cf_hash: bytes) -> None:
    if len(cf_hash) != 32:
        raise ValueError("whitelist entries are 32-byte hashes")
    state.allowed_patterns.add(cf_hash)


def whitelist_remove(state: GuardState, cf_hash: bytes) -> None:
    state.allowed_patterns.discard(cf_hash)


def pop_mismatch_count() -> int:
    """How many times the read-only pop assertion has failed this process."""
    return _pop_mismatches
