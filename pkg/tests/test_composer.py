import numpy as np
import pytest

from cpoly import tensor as tn
from cpoly.adapters import LoraModule, SkillInventory, init_inventory
from cpoly.composer import ComposedAdapter, VariantMismatchError, compose
from cpoly.routing import init_allocation, noise_rng, routing_weights
from cpoly.tensor import Tensor

from oracles import compose_bruteforce


def randomize(inv: SkillInventory, rng) -> SkillInventory:
    for p in inv.parameters():
        p.data = rng.normal(size=p.shape)
    return inv


def make(variant, T=3, A=3, B=1, d=4, r=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    inv = randomize(init_inventory(A, B, T, d, r, seed=seed), rng)
    alloc = init_allocation(T, A, seed=seed, variant=variant, B=B, **kw)
    if alloc.logits_A is not None:
        alloc.logits_A.data = rng.normal(size=alloc.logits_A.shape)
    return ComposedAdapter(inv, alloc)


def as_lists(m: LoraModule):
    return m.down.data.tolist(), m.up.data.tolist()


def test_matches_term_by_term_oracle():
    rng = np.random.default_rng(3)
    ca = make("cpoly", T=2, A=3, B=1, d=2, r=1, seed=3)
    ca.allocation.weights_B.data = rng.normal(size=(2, 2))
    h = rng.normal(size=(2, 2))
    base = rng.normal(size=(2, 2))
    for task in range(2):
        w = routing_weights(ca.allocation, task, "eval")
        expected = compose_bruteforce(
            h.tolist(), base.tolist(),
            [as_lists(m) for m in ca.inventory.common], w.common.data[0].tolist(),
            [as_lists(m) for m in ca.inventory.specific_flat()], w.specific.data[0].tolist(),
        )
        got = compose(Tensor(h), Tensor(base), task, ca, mode="eval").data
        assert np.allclose(got, expected, rtol=0, atol=1e-12)


def test_zero_routing_leaves_base_projection():
    ca = make("cpoly", normalize=False)
    ca.allocation.logits_A.data[...] = -1e4  # sigmoid underflows to exactly 0
    ca.allocation.weights_B.data[...] = 0.0
    rng = np.random.default_rng(0)
    h, base = rng.normal(size=(5, 4)), rng.normal(size=(4, 4))
    assert np.array_equal(compose(Tensor(h), Tensor(base), 1, ca).data, h @ base)


def test_reduction_chain_is_bitwise():
    rng = np.random.default_rng(11)
    T, d, r = 4, 6, 3
    shared = randomize(init_inventory(1, 0, T, d, r, seed=1), rng)
    lora = ComposedAdapter(shared, init_allocation(T, 1, 0, variant="lora", B=0))
    moe = ComposedAdapter(shared, init_allocation(T, 1, 0, variant="moe"))
    moe.allocation.logits_A.data[...] = 0.8
    poly = ComposedAdapter(shared, init_allocation(T, 1, 0, variant="poly"))
    poly.allocation.logits_A.data[...] = 0.8
    with_specific = SkillInventory(common=shared.common, d=d, r=r,
                                   specific=randomize(init_inventory(1, 1, T, d, r, seed=2), rng).specific)
    cpoly = ComposedAdapter(with_specific, init_allocation(T, 1, 0, variant="cpoly"))
    cpoly.allocation.logits_A.data[...] = 0.8
    cpoly.allocation.weights_B.data[...] = 0.0
    base = Tensor(rng.normal(size=(d, d)))
    for trial in range(10):
        h = Tensor(rng.normal(size=(3, d)))
        task = trial % T
        outs = [compose(h, base, task, ca, mode="eval").data for ca in (lora, moe, poly, cpoly)]
        for a, b in zip(outs, outs[1:]):
            assert np.array_equal(a, b)


def test_multi_skill_moe_equals_poly_with_identical_rows():
    moe = make("moe", T=3, A=4, B=0, seed=5)
    poly = ComposedAdapter(moe.inventory, init_allocation(3, 4, 0, variant="poly"))
    poly.allocation.logits_A.data = np.repeat(moe.allocation.logits_A.data, 3, axis=0)
    rng = np.random.default_rng(5)
    base = Tensor(rng.normal(size=(4, 4)))
    h = Tensor(rng.normal(size=(2, 4)))
    for t in range(3):
        assert np.array_equal(compose(h, base, t, moe).data, compose(h, base, t, poly).data)


def test_linear_in_input():
    ca = make("cpoly")
    rng = np.random.default_rng(2)
    base = Tensor(rng.normal(size=(4, 4)))
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    f = lambda h: compose(Tensor(h), base, 2, ca).data
    assert np.allclose(f(2.0 * x - 3.0 * y), 2.0 * f(x) - 3.0 * f(y), rtol=0, atol=1e-12)


def test_masked_tasks_are_isolated():
    ca = make("cpoly", mask_off_diagonal=True)
    ca.allocation.weights_B.data = np.random.default_rng(0).normal(size=(3, 3))
    rng = np.random.default_rng(4)
    h, base = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(4, 4)))
    before = compose(h, base, 0, ca).data
    for m in ca.inventory.specific[1] + ca.inventory.specific[2]:
        m.up.data = m.up.data + 5.0
    assert np.array_equal(compose(h, base, 0, ca).data, before)


def test_unmasked_foreign_skill_receives_gradient():
    ca = make("cpoly")
    ca.allocation.weights_B.data[0, 1] = 0.3
    rng = np.random.default_rng(4)
    h, base = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(4, 4)))
    tn.backward(tn.sum(compose(h, base, 0, ca)))
    assert np.abs(ca.allocation.weights_B.grad[0, [1, 2]]).max() > 0
    assert np.abs(ca.inventory.specific[1][0].up.grad).max() > 0


def test_variant_mismatch():
    inv = init_inventory(3, 0, 2, 4, 2, seed=0)
    with pytest.raises(VariantMismatchError):
        ComposedAdapter(inv, init_allocation(2, 3, 0, variant="cpoly"))
    with pytest.raises(VariantMismatchError):
        ComposedAdapter(init_inventory(3, 1, 2, 4, 2, seed=0), init_allocation(2, 3, 0, variant="poly"))
    with pytest.raises(VariantMismatchError):
        ComposedAdapter(inv, init_allocation(2, 4, 0, variant="poly"))


@pytest.mark.parametrize("variant,mask", [("cpoly", False), ("cpoly", True), ("poly", False), ("moe", False)])
def test_full_path_gradients_in_train_mode(variant, mask):
    B = 1 if variant == "cpoly" else 0
    ca = make(variant, T=3, A=3, B=B, d=4, r=2, seed=8, mask_off_diagonal=mask)
    if ca.allocation.weights_B is not None:
        ca.allocation.weights_B.data = ca.allocation.weights_B.data + 0.2
    rng = np.random.default_rng(8)
    h = Tensor(rng.normal(size=(3, 4)))
    base = Tensor(rng.normal(size=(4, 4)))
    target = Tensor(rng.normal(size=(3, 4)))

    def fn():
        out = compose(h, base, 1, ca, mode="train", rng=noise_rng(0, 3, 0, 1, 1))
        return tn.mean_squared_error(out, target)

    leaves = ca.parameters()
    for leaf in leaves:
        leaf.requires_grad = True
    analytic = tn.analytic_grad(fn, leaves)
    for a, leaf in zip(analytic, leaves):
        assert tn.max_relative_error(a, tn.numerical_grad(fn, leaf)) < 1e-6
