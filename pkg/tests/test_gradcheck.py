import numpy as np
import pytest

from scarf import autodiff as ad
from scarf.gradcheck import CASES, COMPOSITE_CASES, OP_CASES, STACK_CASE, relative_error, run_suite


def test_case_groups_partition_the_suite():
    assert set(OP_CASES) | set(COMPOSITE_CASES) | {STACK_CASE} == set(CASES)
    assert len(OP_CASES) + len(COMPOSITE_CASES) + 1 == len(CASES)


def test_relative_error_uses_norms():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([3.0, 4.0]), np.array([0.0, 0.0])) == 1.0
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-3


def test_op_cases_touch_every_recorded_op():
    seen = set()
    for name in OP_CASES:
        case = CASES[name](0)
        with ad.Tape() as tape:
            case.loss()
        seen |= {node.op for node in tape.nodes}
    assert {"abs", "add", "bce_with_logits", "bilinear_sample", "concat", "gelu", "layer_norm", "linear",
            "mul", "reshape", "scale", "slice", "softmax", "stack", "sub", "sum", "transpose"} <= seen


@pytest.mark.parametrize("name", COMPOSITE_CASES)
def test_composites_ten_seeds(name):
    result = run_suite([name], range(10))[name]
    assert result["passed"], result
