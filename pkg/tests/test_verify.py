import numpy as np
import pytest

from mt3 import autodiff as ad
from mt3 import verify


def test_relative_error_definition():
    assert verify.relative_error([1.0, 2.0], [1.0, 2.0]) == 0
    assert verify.relative_error([0.0, 4.0], [0.0, 3.0]) == pytest.approx(0.25)
    assert verify.relative_error([0.0], [0.0]) == 0


def test_numeric_grad_of_known_function():
    (g,) = verify.numeric_grad(lambda v: float(np.sum(v[0] ** 3)), [np.array([1.0, -2.0])])
    np.testing.assert_allclose(g, [3.0, 12.0], rtol=1e-7)


def test_op_table_covers_every_primitive():
    prims = {"add", "sub", "mul", "div", "neg", "affine", "identity", "exp", "log", "sqrt", "pow",
             "relu", "reshape", "transpose", "broadcast", "sum_to", "sum", "slice", "scatter",
             "concat", "matmul", "unfold", "fold"}
    assert prims <= set(verify.OP_CASES)


def test_meta_gradient_check_small_problem():
    res = verify.meta_gradient_check(seed=0)
    assert res.passed and res.value < 1e-4
    theta0, _ = verify.toy_meta_problem(0)
    assert sum(v.size for v in theta0.values()) <= 50


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_meta_gradient_check_other_seeds(seed):
    assert verify.meta_gradient_check(seed=seed).value < 1e-4


def test_first_order_toy_differs_from_second_order():
    with ad.precision("float64"):
        theta0, fn = verify.toy_meta_problem(0)
        leaves = {n: ad.Tensor(v, requires_grad=True) for n, v in theta0.items()}
        g2 = ad.grad_map(fn(leaves, True), leaves)
        leaves = {n: ad.Tensor(v, requires_grad=True) for n, v in theta0.items()}
        g1 = ad.grad_map(fn(leaves, False), leaves)
    diff = np.sqrt(sum(np.sum((g2[n].data - g1[n].data) ** 2) for n in theta0))
    assert diff > 1e-6


@pytest.mark.parametrize("op,prim", [("conv2d", "unfold"), ("group_norm", "sqrt"),
                                     ("cross_entropy", "exp"), ("l2_normalize", "div")])
def test_composite_checks_catch_primitive_mutations(op, prim):
    with ad.inject_sign_error(prim):
        (res,) = verify.op_gradient_checks(trials=3, ops=[op])
    assert not res.passed


def test_unknown_mutation_name_rejected():
    with pytest.raises(ValueError):
        with ad.inject_sign_error("conv2d"):
            pass


def test_all_primitive_mutations_caught():
    for prim in sorted(ad.PRIMITIVES):
        with ad.inject_sign_error(prim):
            (res,) = verify.op_gradient_checks(trials=3, ops=[prim])
        assert not res.passed, prim


def test_run_all_passes_and_reports():
    results = verify.run_all(trials=3, second_order_trials=1)
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]
    names = {r.name for r in results}
    assert "meta_gradient" in names and any(n.startswith("hvp:") for n in names)
    d = results[0].to_dict()
    assert {"name", "passed", "value", "tolerance"} <= set(d)


def test_property_and_format_checks():
    for r in verify.loss_property_checks() + verify.group_norm_checks(trials=5) + \
            verify.format_checks():
        assert r.passed, r
