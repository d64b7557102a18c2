"""Whitelisting policy toggles, named ablation presets, and the revert rule.

Two policies are always on: a single simple invocation that depends on
nothing before it is benign, and a fully read-only invocation can be
dropped outright. The four toggles layer on top of that floor:

* ``enable_rr``    - prune invocations that were read-only at runtime
* ``enable_re``    - forgive storage writes whose final value restores the
                     first-read value (re-entrancy-guard slots and the like)
* ``enable_erc20`` - skip the five canonical benign token functions
* ``enable_raw``   - judge multi-invocation flows by actual read-after-write
                     dependency instead of treating any multi-invocation
                     transaction as suspect
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .guard import GuardState


@dataclass(frozen=True, slots=True)
class PolicyToggles:
    enable_rr: bool
    enable_re: bool
    enable_erc20: bool
    enable_raw: bool


class Preset(Enum):
    BASELINE = "baseline"
    BASELINE_RR = "baseline-rr"
    BASELINE_RR_RE = "baseline-rr-re"
    BASELINE_RR_RE_ERC20 = "baseline-rr-re-erc20"
    CROSSGUARD = "crossguard"


_PRESET_TOGGLES = {
    Preset.BASELINE: PolicyToggles(False, False, False, False),
    Preset.BASELINE_RR: PolicyToggles(True, False, False, False),
    Preset.BASELINE_RR_RE: PolicyToggles(True, True, False, False),
    Preset.BASELINE_RR_RE_ERC20: PolicyToggles(True, True, True, False),
    Preset.CROSSGUARD: PolicyToggles(True, True, True, True),
}

# Ablation order: each step only prunes more or skips more.
PRESET_CHAIN = (
    Preset.BASELINE,
    Preset.BASELINE_RR,
    Preset.BASELINE_RR_RE,
    Preset.BASELINE_RR_RE_ERC20,
    Preset.CROSSGUARD,
)


def preset_toggles(preset: Preset) -> PolicyToggles:
    return _PRESET_TOGGLES[preset]


def parse_preset(name: str) -> Preset:
    try:
        return Preset(name)
    except ValueError:
        valid = ", ".join(p.value for p in Preset)
        raise ValueError(f"unknown preset {name!r} (valid: {valid})") from None


def revert_condition(
    state: "GuardState",
    toggles: PolicyToggles,
    cf_hash: bytes,
    invocation_nonempty: bool,
) -> bool:
    """Decide, at invocation completion, whether the transaction must revert.

    Called only when the open-frame sum has returned to zero. Invocations
    whose simplified trace is empty never trigger a check: they could be
    deleted from the transaction without changing its outcome.

    With ``enable_raw`` the check is hash-unlisted AND (re-entrant flow OR
    read-after-write dependency). Without it, dependency tracking is not
    trusted and any transaction with two or more surviving invocations is
    treated as dependent.
    """
    if not invocation_nonempty:
        return False
    if cf_hash in state.allowed_patterns:
        return False
    if toggles.enable_raw:
        return state.is_cf_reentrancy or state.is_cf_raw
    is_multi = state.effective_inv_count >= 2
    return state.is_cf_reentrancy or is_multi
