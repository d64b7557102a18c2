"""File formats: native traces and configs, corpus manifests, whitelists,
and a best-effort adapter from standard node call-tracer output.

The native trace format is canonical JSON: fixed key order, lowercase 0x
hex for every byte string, decimal strings for wei amounts, two-space
indentation, trailing newline. Files written by :func:`serialize_trace`
survive a parse/serialize round trip byte-identically.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Iterable, Optional

from .errors import ParseError, UnsupportedShapeError, ValidationError
from .model import (
    Address,
    CallFrame,
    CallKind,
    DisabledWindow,
    FrameEvent,
    FunctionMeta,
    Label,
    MutationKind,
    ProtocolConfig,
    Read,
    REGISTERED_FUNC_ID_LIMIT,
    Selector,
    StateMutation,
    StorageKey,
    SubCall,
    TransactionTrace,
    TxPosition,
    WEI_MAX,
    Word,
    Write,
    validate_trace,
)

# The widely deployed token functions that only move balances or
# allowances; configs mark these benign on designated token contracts.
ERC20_BENIGN_SELECTORS = {
    "transfer": Selector.from_hex("0xa9059cbb"),
    "transferFrom": Selector.from_hex("0x23b872dd"),
    "approve": Selector.from_hex("0x095ea7b3"),
    "increaseAllowance": Selector.from_hex("0x39509351"),
    "decreaseAllowance": Selector.from_hex("0xa457c2d7"),
}


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ParseError(f"missing required key {key!r}", path)
    return obj[key]


def _check_keys(obj, allowed: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(f"expected an object, got {type(obj).__name__}", path)
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"unknown keys {sorted(unknown)}", path)


def _hex_field(obj: dict, key: str, width: int, path: str) -> bytes:
    text = _require(obj, key, path)
    try:
        if not isinstance(text, str) or not text.startswith("0x"):
            raise ValueError(f"expected 0x hex string, got {text!r}")
        body = text[2:]
        if len(body) != 2 * width:
            raise ValueError(f"expected {width} bytes, got {text!r}")
        return bytes.fromhex(body)
    except ValueError as exc:
        raise ParseError(f"{key}: {exc}", path) from None


_FRAME_KEYS = {"kind", "caller", "callee", "selector", "value", "reverted", "events"}
_TX_KEYS = {"txHash", "blockNumber", "indexInBlock", "origin", "label", "lossy", "root"}
_STORAGE_KEYS = {"contract", "slot", "value"}


def _storage_parts(obj: dict, path: str) -> tuple[StorageKey, Word]:
    _check_keys(obj, _STORAGE_KEYS, path)
    contract = Address(_hex_field(obj, "contract", 20, path))
    slot = Word(_hex_field(obj, "slot", 32, path))
    value = Word(_hex_field(obj, "value", 32, path))
    return StorageKey(contract, slot), value


def _frame_from_obj(obj, path: str, dropping: bool) -> CallFrame:
    if not isinstance(obj, dict):
        raise ParseError("frame must be an object", path)
    _check_keys(obj, _FRAME_KEYS, path)
    try:
        kind = CallKind(_require(obj, "kind", path))
    except ValueError:
        raise ParseError(f"unknown call kind {obj.get('kind')!r}", path) from None
    caller = Address(_hex_field(obj, "caller", 20, path))
    callee = Address(_hex_field(obj, "callee", 20, path))
    raw_sel = obj.get("selector")
    selector = None
    if raw_sel is not None:
        selector = Selector(_hex_field(obj, "selector", 4, path))
    raw_value = obj.get("value", "0")
    try:
        value = int(raw_value)
        if not 0 <= value < WEI_MAX:
            raise ValueError("out of range")
    except (TypeError, ValueError):
        raise ParseError(f"value must be a decimal wei string, got {raw_value!r}", path) from None
    reverted = bool(obj.get("reverted", False))
    # Reverted execution left no persistent effects: its storage events are
    # dropped on ingestion, only the frame skeleton survives for censusing.
    drop_here = dropping or reverted
    events: list[FrameEvent] = []
    for i, item in enumerate(obj.get("events", ())):
        ev_path = f"{path}.events[{i}]"
        if not isinstance(item, dict) or len(item) != 1:
            raise ParseError("event must be a single-key object", ev_path)
        (tag, body), = item.items()
        if tag == "read":
            if not drop_here:
                key, value_word = _storage_parts(body, ev_path)
                events.append(Read(key, value_word))
        elif tag == "write":
            if not drop_here:
                key, value_word = _storage_parts(body, ev_path)
                events.append(Write(key, value_word))
        elif tag == "mutation":
            if not drop_here:
                _check_keys(body, {"kind"}, ev_path)
                try:
                    events.append(StateMutation(MutationKind(body.get("kind"))))
                except ValueError:
                    raise ParseError(
                        f"unknown mutation kind {body.get('kind')!r}", ev_path
                    ) from None
        elif tag == "sub":
            events.append(SubCall(_frame_from_obj(body, ev_path, drop_here)))
        else:
            raise ParseError(f"unknown event tag {tag!r}", ev_path)
    return CallFrame(
        kind=kind,
        caller=caller,
        callee=callee,
        selector=selector,
        value=value,
        events=tuple(events),
        reverted=reverted,
    )


def trace_from_obj(obj, path: str = "tx") -> TransactionTrace:
    if not isinstance(obj, dict):
        raise ParseError("transaction must be an object", path)
    _check_keys(obj, _TX_KEYS, path)
    tx_hash = _hex_field(obj, "txHash", 32, path)
    block_number = _require(obj, "blockNumber", path)
    index_in_block = _require(obj, "indexInBlock", path)
    if not isinstance(block_number, int) or not isinstance(index_in_block, int):
        raise ParseError("blockNumber and indexInBlock must be integers", path)
    origin = Address(_hex_field(obj, "origin", 20, path))
    raw_label = obj.get("label")
    label = None
    if raw_label is not None:
        try:
            label = Label(raw_label)
        except ValueError:
            raise ParseError(f"unknown label {raw_label!r}", path) from None
    lossy = bool(obj.get("lossy", False))
    root = _frame_from_obj(_require(obj, "root", path), f"{path}.root", False)
    try:
        return TransactionTrace(
            tx_hash=tx_hash,
            block_number=block_number,
            index_in_block=index_in_block,
            origin=origin,
            root=root,
            label=label,
            lossy=lossy,
        )
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def _frame_to_obj(frame: CallFrame) -> dict:
    events = []
    for ev in frame.events:
        if isinstance(ev, Read):
            events.append({"read": _storage_obj(ev.key, ev.value)})
        elif isinstance(ev, Write):
            events.append({"write": _storage_obj(ev.key, ev.value)})
        elif isinstance(ev, StateMutation):
            events.append({"mutation": {"kind": ev.kind.value}})
        elif isinstance(ev, SubCall):
            events.append({"sub": _frame_to_obj(ev.frame)})
    return {
        "kind": frame.kind.value,
        "caller": frame.caller.hex(),
        "callee": frame.callee.hex(),
        "selector": frame.selector.hex() if frame.selector else None,
        "value": str(frame.value),
        "reverted": frame.reverted,
        "events": events,
    }


def _storage_obj(key: StorageKey, value: Word) -> dict:
    return {
        "contract": key.contract.hex(),
        "slot": key.slot.hex(),
        "value": value.hex(),
    }


def trace_to_obj(trace: TransactionTrace) -> dict:
    return {
        "txHash": trace.tx_hash_hex(),
        "blockNumber": trace.block_number,
        "indexInBlock": trace.index_in_block,
        "origin": trace.origin.hex(),
        "label": trace.label.value if trace.label else None,
        "lossy": trace.lossy,
        "root": _frame_to_obj(trace.root),
    }


def serialize_trace(trace: TransactionTrace) -> str:
    return json.dumps(trace_to_obj(trace), indent=2) + "\n"


def serialize_traces(traces: Iterable[TransactionTrace]) -> str:
    return json.dumps([trace_to_obj(t) for t in traces], indent=2) + "\n"


def parse_trace_text(text: str, path: str = "<memory>") -> list[TransactionTrace]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", path) from None
    if isinstance(obj, list):
        return [trace_from_obj(item, f"{path}[{i}]") for i, item in enumerate(obj)]
    return [trace_from_obj(obj, path)]


def load_trace_file(path) -> list[TransactionTrace]:
    path = Path(path)
    return parse_trace_text(path.read_text(), str(path))


_CONFIG_KEYS = {
    "protected",
    "external",
    "admins",
    "otherProtocols",
    "functions",
    "staticRestoreSlots",
    "guardDisabledWindows",
}
_FUNCTION_KEYS = {
    "address",
    "selector",
    "funcID",
    "staticReadOnly",
    "erc20Benign",
    "eoaBypassEligible",
    "privileged",
}


def _address_list(obj: dict, key: str, path: str) -> frozenset[Address]:
    out = []
    for i, text in enumerate(obj.get(key, ())):
        try:
            out.append(Address.from_hex(text))
        except ValueError as exc:
            raise ParseError(str(exc), f"{path}.{key}[{i}]") from None
    return frozenset(out)


def config_from_obj(obj, path: str = "config") -> ProtocolConfig:
    if not isinstance(obj, dict):
        raise ParseError("config must be an object", path)
    _check_keys(obj, _CONFIG_KEYS, path)
    protected = _address_list(obj, "protected", path)
    external = _address_list(obj, "external", path)
    admins = _address_list(obj, "admins", path)
    other = _address_list(obj, "otherProtocols", path)
    functions: dict = {}
    duplicates: list[str] = []
    for i, entry in enumerate(obj.get("functions", ())):
        fn_path = f"{path}.functions[{i}]"
        if not isinstance(entry, dict):
            raise ParseError("function entry must be an object", fn_path)
        _check_keys(entry, _FUNCTION_KEYS, fn_path)
        address = Address(_hex_field(entry, "address", 20, fn_path))
        raw_sel = entry.get("selector")
        selector = (
            Selector(_hex_field(entry, "selector", 4, fn_path))
            if raw_sel is not None
            else None
        )
        func_id = _require(entry, "funcID", fn_path)
        if not isinstance(func_id, int) or func_id < 1:
            raise ParseError(f"funcID must be a positive integer, got {func_id!r}", fn_path)
        meta = FunctionMeta(
            address=address,
            selector=selector,
            func_id=func_id,
            static_read_only=bool(entry.get("staticReadOnly", False)),
            erc20_benign=bool(entry.get("erc20Benign", False)),
            eoa_bypass_eligible=bool(entry.get("eoaBypassEligible", False)),
            privileged=bool(entry.get("privileged", False)),
        )
        if meta.key in functions:
            duplicates.append(f"{fn_path}: duplicate registration for {address}")
        functions[meta.key] = meta
    restore_slots = []
    for i, entry in enumerate(obj.get("staticRestoreSlots", ())):
        slot_path = f"{path}.staticRestoreSlots[{i}]"
        if not isinstance(entry, dict):
            raise ParseError("restore slot entry must be an object", slot_path)
        _check_keys(entry, {"contract", "slot"}, slot_path)
        restore_slots.append(
            StorageKey(
                Address(_hex_field(entry, "contract", 20, slot_path)),
                Word(_hex_field(entry, "slot", 32, slot_path)),
            )
        )
    windows = []
    for i, entry in enumerate(obj.get("guardDisabledWindows", ())):
        win_path = f"{path}.guardDisabledWindows[{i}]"
        if not isinstance(entry, dict):
            raise ParseError("window entry must be an object", win_path)
        _check_keys(entry, {"start", "end"}, win_path)
        windows.append(
            DisabledWindow(
                start=_position(entry.get("start"), f"{win_path}.start"),
                end=_position(entry.get("end"), f"{win_path}.end"),
            )
        )
    config = ProtocolConfig(
        protected=protected,
        external=external,
        admins=admins,
        other_protocols=other,
        functions=functions,
        static_restore_slots=frozenset(restore_slots),
        disabled_windows=tuple(windows),
    )
    problems = duplicates + config.validate()
    if problems:
        raise ValidationError(problems)
    return config


def _position(obj, path: str) -> TxPosition:
    if not isinstance(obj, dict):
        raise ParseError("position must be an object", path)
    _check_keys(obj, {"blockNumber", "indexInBlock"}, path)
    block = _require(obj, "blockNumber", path)
    index = _require(obj, "indexInBlock", path)
    if not isinstance(block, int) or not isinstance(index, int):
        raise ParseError("position fields must be integers", path)
    return TxPosition(block, index)


def load_config(path) -> ProtocolConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", str(path)) from None
    return config_from_obj(obj, str(path))


def seed_erc20_benign(
    config: ProtocolConfig, tokens: Iterable[Address]
) -> ProtocolConfig:
    """Mark the five canonical token functions benign on protected tokens.

    Existing registrations keep their funcID; missing ones are registered
    with the smallest unused IDs, deterministically.
    """
    tokens = sorted(set(tokens), key=lambda a: a.raw)
    missing = [t for t in tokens if t not in config.protected]
    if missing:
        raise ValidationError(
            [f"token {t} is not a protected contract" for t in missing]
        )
    functions = dict(config.functions)
    used = {meta.func_id for meta in functions.values()}
    next_id = 1
    for token in tokens:
        for name in sorted(ERC20_BENIGN_SELECTORS):
            selector = ERC20_BENIGN_SELECTORS[name]
            key = (token, selector)
            existing = functions.get(key)
            if existing is not None:
                functions[key] = dataclasses.replace(
                    existing, erc20_benign=True, static_read_only=False
                )
                continue
            while next_id in used or next_id >= REGISTERED_FUNC_ID_LIMIT:
                next_id += 1
            if next_id >= REGISTERED_FUNC_ID_LIMIT:
                raise ValidationError(["no registered funcIDs left"])
            functions[key] = FunctionMeta(
                address=token,
                selector=selector,
                func_id=next_id,
                erc20_benign=True,
            )
            used.add(next_id)
    return dataclasses.replace(config, functions=functions, _synth={})


@dataclasses.dataclass(frozen=True)
class CorpusManifest:
    name: str
    trace_files: tuple[Path, ...]
    config_file: Path
    hack_tx_hashes: frozenset[bytes]
    benign_label_default: bool = False


_MANIFEST_KEYS = {"name", "traceFiles", "configFile", "hackTxHashes", "benignLabelDefault"}


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", str(path)) from None
    if not isinstance(obj, dict):
        raise ParseError("manifest must be an object", str(path))
    _check_keys(obj, _MANIFEST_KEYS, str(path))
    base = path.parent
    hashes = []
    for i, text in enumerate(obj.get("hackTxHashes", ())):
        try:
            if not isinstance(text, str) or not text.startswith("0x"):
                raise ValueError(f"expected 0x hex string, got {text!r}")
            raw = bytes.fromhex(text[2:])
            if len(raw) != 32:
                raise ValueError("txHash must be 32 bytes")
            hashes.append(raw)
        except ValueError as exc:
            raise ParseError(str(exc), f"{path}.hackTxHashes[{i}]") from None
    return CorpusManifest(
        name=str(obj.get("name", path.stem)),
        trace_files=tuple(base / p for p in _require(obj, "traceFiles", str(path))),
        config_file=base / _require(obj, "configFile", str(path)),
        hack_tx_hashes=frozenset(hashes),
        benign_label_default=bool(obj.get("benignLabelDefault", False)),
    )


def load_traces(manifest: CorpusManifest) -> list[TransactionTrace]:
    """Load, label, order, and validate a whole corpus."""
    traces: list[TransactionTrace] = []
    for file_path in manifest.trace_files:
        traces.extend(load_trace_file(file_path))
    labeled = []
    for trace in traces:
        if trace.tx_hash in manifest.hack_tx_hashes:
            if trace.label is not Label.ATTACK:
                trace = dataclasses.replace(trace, label=Label.ATTACK)
        elif trace.label is None and manifest.benign_label_default:
            trace = dataclasses.replace(trace, label=Label.BENIGN)
        labeled.append(trace)
    labeled.sort(key=lambda t: t.position())
    problems: list[str] = []
    seen_positions: dict[tuple[int, int], bytes] = {}
    corpus_hashes = set()
    for trace in labeled:
        corpus_hashes.add(trace.tx_hash)
        clash = seen_positions.get(trace.position())
        if clash is not None and clash != trace.tx_hash:
            problems.append(
                f"{trace.tx_hash_hex()}: duplicate corpus position {trace.position()}"
            )
        seen_positions[trace.position()] = trace.tx_hash
        for violation in validate_trace(trace):
            problems.append(f"{trace.tx_hash_hex()}: {violation}")
    for missing in sorted(manifest.hack_tx_hashes - corpus_hashes):
        problems.append(f"hack tx 0x{missing.hex()} is not in the corpus")
    if problems:
        raise ValidationError(problems)
    return labeled


_NODE_KIND = {
    "CALL": CallKind.CALL,
    "STATICCALL": CallKind.STATICCALL,
    "DELEGATECALL": CallKind.DELEGATECALL,
    "CREATE": CallKind.CREATE,
    "CREATE2": CallKind.CREATE,
}

_ZERO_WORD = Word(b"\x00" * 32)


def _node_hex_bytes(text, what: str, path: str) -> bytes:
    if not isinstance(text, str) or not text.startswith("0x"):
        raise UnsupportedShapeError(f"{what} must be 0x hex, got {text!r}", path)
    body = text[2:]
    if len(body) % 2:
        body = "0" + body
    return bytes.fromhex(body)


def _node_address(text, what: str, path: str) -> Address:
    raw = _node_hex_bytes(text, what, path)
    return Address(raw.rjust(20, b"\x00")[-20:])


def _node_word(text, path: str) -> Word:
    raw = _node_hex_bytes(text, "word", path)
    return Word(raw.rjust(32, b"\x00")[-32:])


def _convert_node_frame(
    node: dict,
    context_of_parent: Optional[Address],
    path: str,
    prestate: Optional[dict],
    lossy_paths: list[str],
) -> Optional[CallFrame]:
    node_type = str(node.get("type", "")).upper()
    if node_type == "SELFDESTRUCT":
        return None  # handled by the caller as a mutation event
    kind = _NODE_KIND.get(node_type)
    if kind is None:
        raise UnsupportedShapeError(f"unsupported call type {node_type!r}", path)
    caller = _node_address(node.get("from"), "from", path)
    to = node.get("to")
    if to is None:
        if kind is not CallKind.CREATE:
            raise UnsupportedShapeError("missing 'to' address", path)
        callee = Address(b"\x00" * 20)
    else:
        callee = _node_address(to, "to", path)
    input_hex = node.get("input") or "0x"
    input_bytes = _node_hex_bytes(input_hex, "input", path)
    selector = None
    if kind is not CallKind.CREATE and len(input_bytes) >= 4:
        selector = Selector(input_bytes[:4])
    raw_value = node.get("value")
    value = int(raw_value, 16) if isinstance(raw_value, str) else 0
    reverted = "error" in node
    frame_context = (
        context_of_parent
        if kind is CallKind.DELEGATECALL and context_of_parent is not None
        else callee
    )
    events: list[FrameEvent] = []
    accesses = node.get("storageAccesses")
    if accesses is None:
        lossy_paths.append(path)
    else:
        for i, acc in enumerate(accesses):
            acc_path = f"{path}.storageAccesses[{i}]"
            op = acc.get("op")
            if op not in ("read", "write"):
                raise UnsupportedShapeError(f"unknown storage op {op!r}", acc_path)
            contract = (
                _node_address(acc["contract"], "contract", acc_path)
                if "contract" in acc
                else frame_context
            )
            slot = _node_word(acc.get("slot"), acc_path)
            if "value" in acc:
                value_word = _node_word(acc.get("value"), acc_path)
            else:
                value_word = _prestate_lookup(prestate, contract, slot)
                if value_word is None:
                    value_word = _ZERO_WORD
                    lossy_paths.append(acc_path)
            key = StorageKey(contract, slot)
            if op == "read":
                events.append(Read(key, value_word))
            else:
                events.append(Write(key, value_word))
    for i, child in enumerate(node.get("calls", ())):
        child_path = f"{path}.calls[{i}]"
        child_frame = _convert_node_frame(
            child, frame_context, child_path, prestate, lossy_paths
        )
        if child_frame is None:
            events.append(StateMutation(MutationKind.SELF_DESTRUCT))
        else:
            events.append(SubCall(child_frame))
    frame = CallFrame(
        kind=kind,
        caller=caller,
        callee=callee,
        selector=selector,
        value=value,
        events=tuple(events),
        reverted=reverted,
    )
    if reverted:
        frame = _strip_reverted_effects(frame)
    return frame


def _strip_reverted_effects(frame: CallFrame) -> CallFrame:
    kept = tuple(
        SubCall(_strip_reverted_effects(ev.frame))
        for ev in frame.events
        if isinstance(ev, SubCall)
    )
    return dataclasses.replace(frame, events=kept)


def _prestate_lookup(prestate, contract: Address, slot: Word) -> Optional[Word]:
    if not prestate:
        return None
    account = prestate.get(contract.hex())
    if not account:
        return None
    storage = account.get("storage", account)
    text = storage.get(slot.hex())
    return _node_word(text, "prestate") if text is not None else None


def convert_node_trace(
    node_obj: dict,
    prestate: Optional[dict] = None,
    *,
    tx_hash: Optional[bytes] = None,
    block_number: int = 0,
    index_in_block: int = 0,
    label: Optional[Label] = None,
) -> tuple[TransactionTrace, list[str]]:
    """Convert call-tracer output into a native trace.

    Accepts either a bare top-level call object or a wrapper carrying
    ``result`` plus transaction metadata. Frames without storage access
    data convert with empty event lists and are reported (and flagged on
    the trace) as lossy.
    """
    if not isinstance(node_obj, dict):
        raise UnsupportedShapeError("node trace must be a JSON object")
    wrapper = node_obj
    if "result" in node_obj and isinstance(node_obj["result"], dict):
        node_obj = node_obj["result"]
    if tx_hash is None:
        text = wrapper.get("txHash")
        tx_hash = (
            _node_hex_bytes(text, "txHash", "txHash").rjust(32, b"\x00")[-32:]
            if text
            else b"\x00" * 32
        )
    block_number = wrapper.get("blockNumber", block_number)
    index_in_block = wrapper.get("indexInBlock", index_in_block)
    lossy_paths: list[str] = []
    root = _convert_node_frame(node_obj, None, "root", prestate, lossy_paths)
    if root is None:
        raise UnsupportedShapeError("root frame cannot be a selfdestruct")
    trace = TransactionTrace(
        tx_hash=tx_hash,
        block_number=block_number,
        index_in_block=index_in_block,
        origin=root.caller,
        root=root,
        label=label,
        lossy=bool(lossy_paths),
    )
    return trace, lossy_paths


def load_whitelist(path) -> set[bytes]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", str(path)) from None
    if not isinstance(obj, list):
        raise ParseError("whitelist must be a JSON array", str(path))
    out = set()
    for i, text in enumerate(obj):
        if (
            not isinstance(text, str)
            or not text.startswith("0x")
            or len(text) != 66
        ):
            raise ParseError(
                f"expected 0x-prefixed 64-hex-digit string, got {text!r}",
                f"{path}[{i}]",
            )
        try:
            out.add(bytes.fromhex(text[2:]))
        except ValueError:
            raise ParseError(f"invalid hex {text!r}", f"{path}[{i}]") from None
    return out


def save_whitelist(path, hashes: Iterable[bytes]) -> None:
    entries = sorted("0x" + h.hex() for h in hashes)
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")
