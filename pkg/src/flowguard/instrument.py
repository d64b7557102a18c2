"""Call-tree walker reproducing the instrumented function variants.

The walker descends a transaction's call tree in event order. Entering a
protected storage context from outside the protected set is an entry the
guard must see (or a documented skip/bypass); protected-to-protected calls
run as the trusted variant: tracked, merged into the parent, invisible to
the guard.

Storage tracking mirrors the on-chain instrumentation deliberately, down
to its quirks: written slots are published for later read-after-write
checks only when a frame finishes, and each frame's restore check is
scoped to that frame activation.
"""

from __future__ import annotations

from typing import Callable, Optional

from .errors import MalformedTraceError
from .guard import (
    ALLOW,
    EMPTY_TRACE_HASH,
    GuardState,
    InvocationRecord,
    Verdict,
    enter_func,
    exit_func,
)
from .model import (
    Address,
    CallFrame,
    CallKind,
    ProtocolConfig,
    Read,
    RuntimeProps,
    StateMutation,
    StorageKey,
    SubCall,
    TransactionTrace,
    Word,
    Write,
    function_meta,
    validate_trace,
)
from .policy import PolicyToggles

_COUNTER_FIELDS = (
    "enter_func_calls",
    "exit_func_calls",
    "tracked_reads",
    "tracked_writes",
    "eoa_bypasses",
    "admin_bypasses",
    "static_read_only_skips",
    "erc20_skips",
)


class OverheadCounters:
    """Event counters standing in for gas: how often each mechanism fired."""

    __slots__ = _COUNTER_FIELDS

    def __init__(self):
        for name in _COUNTER_FIELDS:
            setattr(self, name, 0)

    def add(self, other: "OverheadCounters") -> None:
        for name in _COUNTER_FIELDS:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in _COUNTER_FIELDS}

    def __eq__(self, other) -> bool:
        if not isinstance(other, OverheadCounters):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __repr__(self) -> str:
        return f"OverheadCounters({self.as_dict()})"


class TxContext:
    """Transaction-scoped tracking state, reset at every transaction start."""

    __slots__ = ("storage_writes", "current_inv_num", "counters")

    def __init__(self, counters: Optional[OverheadCounters] = None):
        self.storage_writes: dict[int, set[StorageKey]] = {}
        self.current_inv_num = 0
        self.counters = counters if counters is not None else OverheadCounters()


class FrameTracking:
    """Per-frame-activation journal of storage touches."""

    __slots__ = (
        "read_elements",
        "write_elements",
        "temp_reads",
        "temp_writes",
        "read_only",
        "raw_dependent",
    )

    def __init__(self):
        self.read_elements: list[StorageKey] = []
        self.write_elements: list[StorageKey] = []
        # First-read value per slot, captured only before the frame's first
        # write to that slot; last-written value per slot.
        self.temp_reads: dict[StorageKey, Word] = {}
        self.temp_writes: dict[StorageKey, Word] = {}
        self.read_only = True
        self.raw_dependent = False


def merge_props(parent: RuntimeProps, child: RuntimeProps) -> RuntimeProps:
    """Aggregate a callee's runtime properties into its protected caller."""
    return RuntimeProps(
        parent.read_only and child.read_only,
        parent.raw_dependent or child.raw_dependent,
    )


def subtree_read_only(frame: CallFrame) -> bool:
    """Judge a call into non-protected code from its observed subtree.

    There is no source knowledge of foreign code, so the call counts as
    read-only only when nothing below it moved ether, created a contract,
    wrote storage, or mutated state. Static calls are read-only by EVM
    guarantee; reverted branches left no effects and are ignored.
    """
    if frame.kind is CallKind.STATICCALL:
        return True
    if frame.kind is CallKind.CREATE or frame.value > 0:
        return False
    for ev in frame.events:
        if isinstance(ev, (Write, StateMutation)):
            return False
        if isinstance(ev, SubCall) and not ev.frame.reverted:
            if not subtree_read_only(ev.frame):
                return False
    return True


EntryCallback = Callable[[CallFrame, Address], None]


def scan_unprotected(
    frame: CallFrame,
    context: Address,
    config: ProtocolConfig,
    on_entry: Optional[EntryCallback],
) -> None:
    """Walk non-protected frames, routing protected entries to ``on_entry``."""
    for ev in frame.events:
        if not isinstance(ev, SubCall) or ev.frame.reverted:
            continue
        sub = ev.frame
        sub_context = sub.context_address(context)
        if sub_context in config.protected:
            if on_entry is not None:
                on_entry(sub, sub_context)
        else:
            scan_unprotected(sub, sub_context, config, on_entry)


def track_frame(
    frame: CallFrame,
    ctx: TxContext,
    inv_num: int,
    config: ProtocolConfig,
    toggles: PolicyToggles,
    context_addr: Optional[Address] = None,
    on_protected_entry: Optional[EntryCallback] = None,
) -> tuple[RuntimeProps, FrameTracking]:
    """Execute one protected frame's instrumentation.

    Processes events in order; recurses into protected sub-calls as the
    trusted variant and merges their properties. Sub-calls into foreign code
    are scanned for re-entries (reported through ``on_protected_entry``) and
    flip the read-only flag unless their whole subtree is effect-free.

    After the body, written slots either prove restored (last written value
    equals the pre-write read, forgiven when ``enable_re``) or mark the
    frame state-changing and are published under ``inv_num`` for later
    invocations' dependency checks. Statically-known restore slots are never
    tracked at all.
    """
    context = context_addr if context_addr is not None else frame.callee
    static_slots = config.static_restore_slots
    counters = ctx.counters
    ft = FrameTracking()
    for ev in frame.events:
        if isinstance(ev, Read):
            if ev.key in static_slots:
                continue
            counters.tracked_reads += 1
            ft.read_elements.append(ev.key)
            if ev.key not in ft.temp_writes:
                ft.temp_reads[ev.key] = ev.value
        elif isinstance(ev, Write):
            if ev.key in static_slots:
                continue
            counters.tracked_writes += 1
            ft.write_elements.append(ev.key)
            ft.temp_writes[ev.key] = ev.value
        elif isinstance(ev, StateMutation):
            ft.read_only = False
        elif isinstance(ev, SubCall):
            sub = ev.frame
            if sub.reverted:
                continue
            sub_context = sub.context_address(context)
            if sub_context in config.protected:
                sub_props, _ = track_frame(
                    sub,
                    ctx,
                    inv_num,
                    config,
                    toggles,
                    context_addr=sub_context,
                    on_protected_entry=on_protected_entry,
                )
                ft.read_only = ft.read_only and sub_props.read_only
                ft.raw_dependent = ft.raw_dependent or sub_props.raw_dependent
            else:
                scan_unprotected(sub, sub_context, config, on_protected_entry)
                if not subtree_read_only(sub):
                    ft.read_only = False
    for key in ft.write_elements:
        restored = (
            key in ft.temp_reads and ft.temp_writes[key] == ft.temp_reads[key]
        )
        if toggles.enable_re and restored:
            continue
        ft.read_only = False
        ctx.storage_writes.setdefault(inv_num, set()).add(key)
    if not ft.raw_dependent:
        for key in ft.read_elements:
            if any(
                key in ctx.storage_writes.get(i, ()) for i in range(1, inv_num)
            ):
                ft.raw_dependent = True
                break
    return RuntimeProps(ft.read_only, ft.raw_dependent), ft


class _TransactionReverted(Exception):
    def __init__(self, verdict: Verdict):
        self.verdict = verdict


def simulate_transaction(
    config: ProtocolConfig,
    toggles: PolicyToggles,
    trace: TransactionTrace,
    guard: GuardState,
    *,
    enforce: bool = True,
    honor_bypasses: bool = True,
    validate: bool = True,
) -> tuple[Verdict, list[InvocationRecord], OverheadCounters]:
    """Replay one transaction against the guard.

    Administrator transactions and transactions inside a configured
    guard-off window are allowed wholesale. Otherwise every top-level entry
    into the protected set becomes an invocation: skipped (statically
    read-only or benign-token) functions never reach the guard, eligible
    direct-from-origin calls run tracked but unguarded, and everything else
    goes through enter/exit with a verdict at invocation completion.

    ``enforce=False`` evaluates verdicts but never aborts, which is what
    corpus censusing needs; ``honor_bypasses=False`` additionally routes
    administrator and eligible-EOA traffic through the guard so their flows
    become observable.
    """
    if validate:
        problems = validate_trace(trace)
        if problems:
            raise MalformedTraceError(
                f"trace {trace.tx_hash_hex()}: " + "; ".join(map(str, problems))
            )
    counters = OverheadCounters()
    if honor_bypasses and (
        guard.disabled
        or trace.origin in config.admins
        or config.in_disabled_window(trace)
    ):
        counters.admin_bypasses += 1
        return ALLOW, [], counters
    ctx = TxContext(counters)
    records: list[InvocationRecord] = []
    entry_ordinal = 0

    def on_entry(frame: CallFrame, context: Address) -> None:
        nonlocal entry_ordinal
        meta = function_meta(config, context, frame.selector)
        top_level = guard.sum == 0
        if top_level:
            entry_ordinal += 1
        ordinal = entry_ordinal
        if meta.static_read_only:
            counters.static_read_only_skips += 1
            if top_level:
                records.append(_skipped_record(ordinal, meta.func_id))
            return
        if toggles.enable_erc20 and meta.erc20_benign:
            counters.erc20_skips += 1
            if top_level:
                records.append(_skipped_record(ordinal, meta.func_id))
            return
        if (
            honor_bypasses
            and meta.eoa_bypass_eligible
            and top_level
            and frame.caller == trace.origin
        ):
            counters.eoa_bypasses += 1
            ctx.current_inv_num += 1
            props, _ = track_frame(
                frame,
                ctx,
                ctx.current_inv_num,
                config,
                toggles,
                context_addr=context,
                on_protected_entry=on_entry,
            )
            records.append(
                InvocationRecord(
                    inv_num=ordinal,
                    simplified_trace=(),
                    cf_hash=EMPTY_TRACE_HASH,
                    props=props,
                    skipped=True,
                    entry_func_id=meta.func_id,
                )
            )
            return
        if top_level:
            ctx.current_inv_num += 1
        counters.enter_func_calls += 1
        enter_func(guard, meta.func_id)
        props, _ = track_frame(
            frame,
            ctx,
            ctx.current_inv_num,
            config,
            toggles,
            context_addr=context,
            on_protected_entry=on_entry,
        )
        read_only = props.read_only if toggles.enable_rr else False
        counters.exit_func_calls += 1
        verdict = exit_func(
            guard, meta.func_id, read_only, props.raw_dependent, toggles
        )
        completed = guard.last_completed
        if completed is not None:
            segment, cf_hash, _nonempty = completed
            records.append(
                InvocationRecord(
                    inv_num=ordinal,
                    simplified_trace=segment,
                    cf_hash=cf_hash,
                    props=RuntimeProps(read_only, props.raw_dependent),
                    skipped=False,
                    entry_func_id=meta.func_id,
                )
            )
        if enforce and verdict.is_revert:
            raise _TransactionReverted(verdict)

    root = trace.root
    try:
        if not root.reverted:
            root_context = root.context_address(trace.origin)
            if root_context in config.protected:
                on_entry(root, root_context)
            else:
                scan_unprotected(root, root_context, config, on_entry)
    except _TransactionReverted as stop:
        return stop.verdict, records, counters
    return ALLOW, records, counters


def _skipped_record(ordinal: int, func_id: int) -> InvocationRecord:
    return InvocationRecord(
        inv_num=ordinal,
        simplified_trace=(),
        cf_hash=EMPTY_TRACE_HASH,
        props=RuntimeProps(True, False),
        skipped=True,
        entry_func_id=func_id,
    )
