import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpoly import tensor as tn
from cpoly.adapters import (
    LoraModule,
    init_inventory,
    init_lora,
    load_inventory,
    lora_forward,
    param_count,
    routing_param_count,
    save_inventory,
)
from cpoly.tensor import ShapeError, Tensor

from oracles import naive_matmul


def test_hand_example():
    m = LoraModule(down=Tensor([[1.0], [2.0]]), up=Tensor([[3.0, 4.0]]))
    out = lora_forward(Tensor([[1.0, 1.0]]), Tensor(np.eye(2)), m)
    assert out.data.tolist() == [[10.0, 13.0]]


def test_zero_update_and_zero_input(rng):
    base = Tensor(rng.normal(size=(4, 4)))
    m = LoraModule(down=Tensor(rng.normal(size=(4, 2))), up=Tensor(np.zeros((2, 4))))
    h = rng.normal(size=(3, 4))
    assert np.array_equal(lora_forward(Tensor(h), base, m).data, h @ base.data)
    m.up = Tensor(rng.normal(size=(2, 4)))
    assert not lora_forward(Tensor(np.zeros((3, 4))), base, m).data.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_fresh_module_is_a_no_op(d, r, seed):
    r = min(r, d)
    rng = np.random.default_rng(seed)
    base = Tensor(rng.normal(size=(d, d)))
    h = Tensor(rng.normal(size=(2, d)))
    assert np.array_equal(lora_forward(h, base, init_lora(d, r, seed)).data, (h @ base).data)


def test_init_is_seeded_and_rank_checked():
    assert np.array_equal(init_lora(8, 2, 5).down.data, init_lora(8, 2, 5).down.data)
    assert not np.array_equal(init_lora(8, 2, 5).down.data, init_lora(8, 2, 6).down.data)
    with pytest.raises(ValueError):
        init_lora(4, 5, 0)


def test_down_entries_have_mean_zero_and_variance_one_over_d():
    d, r = 256, 4
    down = init_lora(d, r, 11).down.data
    sigma = 1 / np.sqrt(d)
    assert abs(down.mean()) <= 3 * sigma / np.sqrt(d * r)
    assert down.var() == pytest.approx(1 / d, rel=0.15)


def test_width_mismatch_raises(rng):
    m = init_lora(4, 2, 0)
    with pytest.raises(ShapeError):
        lora_forward(Tensor(np.ones((2, 3))), Tensor(np.eye(4)), m)
    with pytest.raises(ShapeError):
        lora_forward(Tensor(np.ones((2, 4))), Tensor(np.eye(3)), m)


def test_gradients_flow_only_into_factors(rng):
    base = Tensor(rng.normal(size=(3, 3)))
    m = LoraModule(down=Tensor(rng.normal(size=(3, 2)), requires_grad=True),
                   up=Tensor(rng.normal(size=(2, 3)), requires_grad=True))
    h = Tensor(rng.normal(size=(4, 3)))
    tn.backward(tn.sum(lora_forward(h, base, m)))
    assert base.grad is None
    # d/dup of sum(h down up) = (h down)^T 1
    hd = naive_matmul(h.data.tolist(), m.down.data.tolist())
    expected_up = np.array([[sum(row[i] for row in hd)] * 3 for i in range(2)])
    assert np.allclose(m.up.grad, expected_up, rtol=1e-13)


def test_parameter_counts():
    assert param_count(1, 0, 5, 8, 64) == 1024
    assert param_count(4, 0, 5, 2, 64) == 4 * 2 * 2 * 64 == param_count(1, 0, 5, 8, 64)
    assert param_count(4, 0, 3, 2, 64) == param_count(4, 0, 30, 2, 64)
    assert param_count(3, 1, 8, 2, 64, n_adapted_matrices=6) == 6 * 11 * 256
    assert routing_param_count(3, 1, 8) == 8 * (3 + 8)


@pytest.mark.parametrize("d", [16, 64, 256])
def test_four_rank2_experts_match_one_rank8(d):
    assert param_count(4, 0, 1, 2, d) == param_count(1, 0, 1, 8, d)


def test_inventory_layout_and_roundtrip(tmp_path):
    inv = init_inventory(3, 2, 4, d=8, r=2, seed=3)
    assert (inv.A, inv.B, inv.T, len(inv)) == (3, 2, 4, 11)
    assert inv.specific_flat()[2 * 2 + 1] is inv.specific[2][1]
    assert inv.trainable_param_count == param_count(3, 2, 4, 2, 8)
    for i, p in enumerate(inv.parameters()):
        p.data = p.data + i  # make every tensor distinct
    save_inventory(tmp_path / "ckpt", {"layer0.q": inv}, meta={"note": "x"})
    loaded, meta = load_inventory(tmp_path / "ckpt")
    assert meta["note"] == "x"
    for a, b in zip(inv.parameters(), loaded["layer0.q"].parameters()):
        assert np.array_equal(a.data, b.data)


def test_inventory_rejects_bad_shapes():
    with pytest.raises(ValueError):
        init_inventory(0, 1, 2, 4, 2, seed=0)
