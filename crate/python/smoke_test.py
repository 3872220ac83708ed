#!/usr/bin/env python3
"""Smoke test for the fbdsdej_py extension module.

Builds nothing itself: run `cargo build -p fbdsdej-py` (or --release) first,
then `python3 python/smoke_test.py`. The script locates the compiled cdylib,
exposes it under the importable module name, and exercises the main surface.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_cdylib() -> Path:
    candidates = []
    for profile in ("release", "debug"):
        for stem in ("libfbdsdej_py.so", "libfbdsdej_py.dylib", "fbdsdej_py.dll"):
            p = ROOT / "target" / profile / stem
            if p.exists():
                candidates.append(p)
    if not candidates:
        sys.exit("build the extension first: cargo build -p fbdsdej-py")
    return max(candidates, key=lambda p: p.stat().st_mtime)


def main() -> None:
    lib = locate_cdylib()
    tmp = Path(tempfile.mkdtemp(prefix="fbdsdej_py_"))
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy2(lib, tmp / f"fbdsdej_py{suffix}")
    sys.path.insert(0, str(tmp))

    import fbdsdej_py as fb

    print(f"fbdsdej_py version {fb.version()} from {lib}")

    # driver aggregate of the coupled example at a hand-checked point
    p1 = fb.Problem.example1(horizon=1.0)
    a = p1.eval_a_scalar(0.0, 1.0, 1.0, 4.0, 4.0, 8.0)
    assert a == [-1.0, -1.0, -5.0, 0.0, -2.0], a

    # hypothesis check: example1 satisfies a package, example2 does not
    rep1 = json.loads(p1.check(n_samples=2000, seed=1))
    assert rep1["standard_package_ok"], rep1
    assert abs(rep1["a1_standard"]["theta_diag"] - 0.25) < 0.01
    assert abs(rep1["a2_standard"]["beta"] - 1.0) < 1e-6

    p2 = fb.Problem.example2()
    assert abs(p2.horizon - 3 * math.pi / 4) < 1e-12
    rep2 = json.loads(p2.check(n_samples=1000, seed=2))
    assert not rep2["a1_standard"]["feasible"], rep2
    assert not rep2["a1_primed"]["feasible"], rep2

    # closed-form residuals: trivial is exact, sin/cos is first order
    r_triv = json.loads(p2.residual_closed_form("trivial", steps=100))
    assert r_triv["sup_forward"] == 0.0 and r_triv["sup_backward"] == 0.0
    r_cf = json.loads(p2.residual_closed_form("sin-cos", steps=200))
    assert 0.0 < max(r_cf["sup_forward"], r_cf["sup_backward"]) <= 0.05, r_cf

    # decoupled solve matches the hand solution Y_0 = x + phi_T + theta1 x T
    pd = fb.Problem.decoupled(0.3, horizon=1.0, x=[1.0], phi_t=[0.7])
    sol = json.loads(pd.solve(steps=50, paths=2000, seed=3))
    assert sol["final_alpha"] == 1.0, sol
    assert abs(sol["y0_mean"] - 1.0) < 1e-3, sol
    assert abs(sol["Y0_mean"] - 2.0) < 1e-3, sol
    assert sol["sup_forward_residual"] < 0.05

    print("smoke test passed")


if __name__ == "__main__":
    main()
