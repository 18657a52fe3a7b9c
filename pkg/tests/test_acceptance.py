"""Top-level acceptance gate.

One test per criterion; each prints a single PASS/FAIL line with its
measured detail and timing, then asserts the verdict.  Run with `-s` (or
read the captured output on failure) to see the lines.
"""

import pytest

from latentlab.verification import ACCEPTANCE


@pytest.mark.parametrize("criterion", ACCEPTANCE, ids=lambda f: f.__name__)
def test_acceptance(criterion):
    r = criterion()
    line = (
        f"{'PASS' if r.ok else 'FAIL'} [{r.number:02d}] {r.name} "
        f"({r.seconds:.1f}s): {r.detail}"
    )
    print(line)
    assert r.ok, line
