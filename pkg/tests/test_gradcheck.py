import pytest

from elder import gradcheck as gc


@pytest.fixture(scope="module")
def suite():
    return gc.run_suite(0)


def test_fresh_weights_pass_every_check(suite):
    failed = [r for r in suite if not r.passed]
    assert not failed, gc.format_report(failed)


def test_report_has_one_row_per_check(suite):
    lines = gc.format_report(suite).splitlines()
    assert len(lines) == len(suite) + 1
    assert lines[0].split() == ["check", "tolerance", "error", "status"]
    assert {r.name for r in suite} >= {"lsr grad", "red grad", "dsv grad", "lsr jfb", "lsr exact implicit"}


@pytest.mark.parametrize("primitive", ["elu", "conv2d", "downsample"])
def test_corrupted_backward_is_caught(primitive):
    with gc.corrupted_backward(primitive):
        results = gc.check_primitives() + gc.check_network() + [gc.check_regularizer_grad("lsr")]
    assert not all(r.passed for r in results)
    assert all(r.passed for r in gc.check_primitives())


def test_corruption_is_undone_after_errors():
    with pytest.raises(RuntimeError):
        with gc.corrupted_backward("elu"):
            raise RuntimeError
    assert all(r.passed for r in gc.check_primitives())


def test_relative_error_zero_reference():
    assert gc.relative_error([0.0], [0.0]) == 0.0
    assert gc.relative_error([2.0], [1.0]) == 1.0
