"""Full verification registry run plus fault-injection sanity.

The registry holds the expensive cross-validation (brute-force oracles,
convergence certificates, unification identities); this module simply
requires all of it to pass and proves the checks can actually fail.
"""

import pytest

from latentlab.errors import ConfigError
from latentlab.verification import CHECKS, run_checks


def test_every_check_passes():
    results = run_checks()
    assert len(results) == len(CHECKS)
    failed = [(name, r) for name, r in results if not r.ok]
    detail = "\n".join(f"{name}: {r.detail}" for name, r in failed)
    assert not failed, f"{len(failed)} checks failed:\n{detail}"


def test_fault_injection_flips_checks():
    clean = run_checks("planner.shap*")
    assert len(clean) == 2 and all(r.ok for _, r in clean)
    faulted = run_checks("planner.shap*", inject_fault="shaping-sign")
    assert all(not r.ok for _, r in faulted)


def test_fault_restored_after_injection():
    run_checks("planner.shaping_correspondence", inject_fault="shaping-sign")
    again = run_checks("planner.shaping_correspondence")
    assert all(r.ok for _, r in again)


def test_unknown_fault_rejected():
    with pytest.raises(ConfigError):
        run_checks(inject_fault="no-such-fault")
