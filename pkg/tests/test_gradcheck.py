import numpy as np
import pytest

from uclidnet import gradcheck
from uclidnet.tensor import corrupt_gradient


def test_op_suite_passes():
    report = gradcheck.run(seeds=(0, 1), include_micro=False)
    assert report.passed, report.lines()
    names = set(report.worst())
    for op in ("conv3d", "conv_transpose3d", "instance_norm", "bilinear_sample2d", "chamfer_l2", "bce"):
        assert op in names


@pytest.mark.parametrize("op", ["conv_transpose3d", "sigmoid", "bilinear_sample2d"])
def test_corrupted_gradient_is_named(op):
    with corrupt_gradient(op):
        report = gradcheck.run(seeds=(0,), include_micro=False)
    assert not report.passed
    # composite cases (bce wraps sigmoid) may fail alongside, but the op itself is named
    assert op in {r.name for r in report.failures()}
    assert any(line.startswith("FAIL") and op in line for line in report.lines())
    assert report.lines()[-1].endswith("FAIL")


def test_report_lists_max_error_per_op():
    report = gradcheck.run(seeds=(3,), include_micro=False)
    lines = report.lines()
    assert len(lines) == len(report.worst()) + 1
    assert all("max rel err" in l for l in lines[:-1])


def test_stable_central_skips_kink():
    # |x| sampled 5e-6 from its kink: the 1e-4 step straddles it, smaller steps do not
    f = lambda d: abs(5e-6 + d)
    assert gradcheck.stable_central(f, gradcheck.MICRO_STEPS) == pytest.approx(1.0, abs=1e-9)


def test_rel_error_floor():
    assert gradcheck.rel_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert gradcheck.rel_error(2.0, 1.0) == 0.5


def test_micro_model_single_seed():
    fn, inputs = gradcheck.micro_case(0)
    err = gradcheck.check_function(fn, inputs, 1, np.random.default_rng(0), h=gradcheck.MICRO_STEPS)
    assert err <= gradcheck.RTOL
