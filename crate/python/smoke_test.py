#!/usr/bin/env python3
"""Smoke test for the pydsattn extension module.

Builds the cdylib with cargo, loads it, and checks the core pipeline:
teacher attention, marginal structure, calibration, compiled reconstruction,
teacher recovery from the exact dual, and the save/load round trip.
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_and_import():
    subprocess.run(
        ["cargo", "build", "-p", "pydsattn"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "debug", "libpydsattn.so")
    if not os.path.exists(lib):  # e.g. macOS
        lib = os.path.join(ROOT, "target", "debug", "libpydsattn.dylib")
    stage = tempfile.mkdtemp(prefix="pydsattn_")
    shutil.copyfile(lib, os.path.join(stage, "pydsattn.so"))
    sys.path.insert(0, stage)
    import pydsattn

    return pydsattn


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"  {name}: {status} {detail}")
    if not ok:
        raise SystemExit(f"smoke test failed at: {name}")


def main():
    m = build_and_import()
    print(f"loaded pydsattn from {m.__file__}")

    cfg = m.TeacherConfig(epsilon=1.0, budget=6, kernel="score")
    check("teacher config", cfg.ending_side == "column", repr(cfg))

    case = m.gen_case(seed=42, n=16, d_h=4, d_v=3, mask_fraction=0.0)
    check("case shape", case.n == 16 and case.d_h == 4 and case.d_v == 3, repr(case))
    again = m.gen_case(seed=42, n=16, d_h=4, d_v=3)
    check("determinism", case.q == again.q)

    a_teacher = m.teacher_attention(case, cfg)
    row_err, col_err = m.marginal_errors(a_teacher)
    check(
        "teacher column marginal (even budget ends on a column)",
        col_err < 1e-12,
        f"row_err={row_err:.2e} col_err={col_err:.2e}",
    )

    # Calibrate on a handful of unlabeled cases, evaluate on a fresh one.
    fit_cases = [m.gen_case(seed=100 + i, n=16, d_h=4, d_v=3) for i in range(8)]
    layer = m.CompiledLayer.fit(fit_cases, cfg, slices=8, bank_seed=3, ridge=1e-3)
    check("fit", layer.slices == 8 and math.isfinite(layer.fit_residual), repr(layer))

    a_hat = layer.attention(case, mode="two_sided")
    _, col_err = m.marginal_errors(a_hat)
    check("compiled column marginal", col_err < 1e-12, f"col_err={col_err:.2e}")
    rmse, rel = m.teacher_agreement(a_hat, a_teacher, case.v)
    check("teacher agreement finite", math.isfinite(rmse) and math.isfinite(rel),
          f"rmse={rmse:.3e} rel_l2={rel:.3e}")

    # Exact teacher dual through the one-sided closure recovers the teacher.
    f_t = m.teacher_dual(case, cfg)
    check("dual centered", abs(sum(f_t)) / len(f_t) < 1e-12)
    features = m.sliced_features(case, slices=8, bank_seed=3)
    check("features shape", len(features) == 16 and len(features[0]) == 8)
    pot = m.slice_potential_1d([0.0, 1.0], [0.0, 2.0])
    check("1d potential", pot == [0.0, 0.5], str(pot))

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "layer.json")
        layer.save(path)
        loaded = m.CompiledLayer.load(path)
        y0 = layer.head_output(case, mode="one_sided")
        y1 = loaded.head_output(case, mode="one_sided")
        check("save/load round trip bit-identical", y0 == y1)

    masked = m.gen_case(seed=9, n=12, d_h=4, d_v=2, mask_fraction=0.25)
    a_masked = layer_masked = None
    layer_masked = m.CompiledLayer.fit([masked], cfg, slices=4, bank_seed=5)
    a_masked = layer_masked.attention(masked, mode="one_sided")
    padded_cols = [j for j, active in enumerate(masked.active_keys) if not active]
    leak = max(abs(a_masked[i][j]) for i in range(12) for j in padded_cols)
    check("masked columns exactly zero", leak == 0.0, f"padded={padded_cols}")

    results = m.selftest()
    for name, passed, detail in results:
        check(f"selftest {name}", passed, detail)

    print("smoke test passed")


if __name__ == "__main__":
    main()
