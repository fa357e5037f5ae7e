import numpy as np
import pytest

from conftest import naive_matmul
from loraprune_lab import checks
from loraprune_lab.errors import ConfigError, DimensionError, InvariantError
from loraprune_lab.lora import INIT_STD, PARALLEL, SEQUENTIAL, Linear, LoraModule, attach_lora
from loraprune_lab.models import Model, ModelSpec
from loraprune_lab.oracles import leave_one_out_importance
from loraprune_lab.tensor import Tape, reduce_sum


def make_module(rng, d=5, k=4, r=2, mode=PARALLEL, bias=True):
    b = rng.normal(size=(1, k)) if bias else None
    a_cols = k if mode == PARALLEL else d
    return LoraModule(Linear(rng.normal(size=(d, k)), b, name="m"),
                      rng.normal(size=(r, a_cols)), rng.normal(size=(d, r)), mode)


@pytest.mark.parametrize("mode", [PARALLEL, SEQUENTIAL])
def test_attach_is_identity_at_init(rng, mode):
    layer = Linear(rng.normal(size=(6, 4)), name="fc")
    m = attach_lora(layer, 2, mode, rng)
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(m.forward(x).data, x @ layer.weight.data, atol=1e-12, rtol=0)
    assert not m.B.data.any()
    assert m.A.shape == ((2, 4) if mode == PARALLEL else (2, 6))
    assert not layer.weight.requires_grad


def test_attach_init_std():
    m = attach_lora(Linear(np.zeros((200, 300))), 100, PARALLEL, np.random.default_rng(0))
    assert abs(m.A.data.std() - INIT_STD) < 1e-3
    assert abs(m.A.data.mean()) < 1e-3


@pytest.mark.parametrize("rank", [0, 4, 5])
def test_attach_rank_bounds(rank):
    with pytest.raises(ConfigError):
        attach_lora(Linear(np.zeros((4, 6))), rank)


def test_bad_factor_shapes(rng):
    with pytest.raises(DimensionError):
        LoraModule(Linear(np.zeros((4, 3))), np.zeros((2, 4)), np.zeros((4, 2)), PARALLEL)


def test_fully_masked_is_bias_only(rng):
    m = make_module(rng)
    m.apply_mask(np.zeros(m.shape))
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(m.forward(x).data, np.repeat(m.bias.data, 3, axis=0))
    m_nb = make_module(rng, bias=False)
    m_nb.apply_mask(np.zeros(m_nb.shape))
    np.testing.assert_array_equal(m_nb.forward(x).data, np.zeros((3, 4)))


@pytest.mark.parametrize("mode", [PARALLEL, SEQUENTIAL])
def test_forward_against_dense_oracle(rng, mode):
    m = make_module(rng, mode=mode, d=5, k=5 if mode == SEQUENTIAL else 4)
    m.apply_mask((rng.uniform(size=m.shape) < 0.6).astype(float))
    x = rng.normal(size=(3, 5))
    ba = naive_matmul(m.B.data, m.A.data)
    if mode == PARALLEL:
        w = m.W0.data + ba
    else:
        w = naive_matmul(ba + np.eye(5), m.W0.data)
    expected = naive_matmul(x, w * m.mask) + m.bias.data
    np.testing.assert_allclose(m.forward(x).data, expected, atol=1e-12, rtol=0)


def test_sequential_forward_non_square(rng):
    m = make_module(rng, d=6, k=3, mode=SEQUENTIAL)
    x = rng.normal(size=(2, 6))
    w = (m.B.data @ m.A.data + np.eye(6)) @ m.W0.data
    np.testing.assert_allclose(m.forward(x).data, x @ w + m.bias.data, atol=1e-12)


def test_merge_zero_update_is_base():
    layer = Linear(np.array([[1.0, 2.0], [3.0, 4.0]]))
    m = LoraModule(layer, np.array([[1.0, 0.0]]), np.zeros((2, 1)), PARALLEL)
    np.testing.assert_array_equal(m.merge().data, layer.weight.data)
    assert not m.merge().requires_grad


def test_merge_two_diagonal_update():
    # rank 1 adapter cannot express diag(0.5, 0.5); use a 3x3 base with rank 2
    w0 = np.array([[1.0, 2.0, 0.0], [3.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
    m = LoraModule(Linear(w0), np.array([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]]),
                   np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]), PARALLEL)
    np.testing.assert_array_equal(m.merge().data[:2, :2], [[1.5, 2.0], [3.0, 4.5]])


def test_merge_equivalence_random():
    assert checks.check_merge_equivalence(cases=20, seed=3).passed


def test_apply_mask_rules(rng):
    m = make_module(rng)
    m.apply_mask(np.ones(m.shape))
    assert m.sparsity() == 0.0
    half = np.ones(m.shape)
    half.ravel()[: half.size // 2] = 0
    m.apply_mask(half)
    assert m.sparsity() == 0.5
    with pytest.raises(InvariantError):
        m.apply_mask(np.ones(m.shape))
    with pytest.raises(InvariantError):
        m.apply_mask(np.full(m.shape, 0.5) * half)
    with pytest.raises(DimensionError):
        m.apply_mask(np.ones((2, 2)))


def test_single_entry_removal_matches_leave_one_out(rng):
    spec = ModelSpec(arch="mlp", in_dim=4, classes=3, hidden=(5,), rank=1, seed=2)
    model = Model.init(spec, trainable=False)
    model.attach_lora(rng)
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
    loo = leave_one_out_importance(model, x, y, "fc0")
    base_loss = model.loss_value(x, y)
    mask = np.ones((4, 5))
    mask[0, 0] = 0.0
    model.layers["fc0"].apply_mask(mask)
    assert (base_loss - model.loss_value(x, y)) ** 2 == pytest.approx(loo[0, 0], rel=1e-12, abs=1e-300)


def test_backward_reaches_factors_but_not_base(rng):
    m = make_module(rng, mode=SEQUENTIAL, d=4, k=4)
    x = rng.normal(size=(3, 4))
    with Tape() as tape:
        loss = reduce_sum(m.forward(x))
    tape.backward(loss)
    assert m.A.grad is not None and m.B.grad is not None
    assert m.W0.grad is None
