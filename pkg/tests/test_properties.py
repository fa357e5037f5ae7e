import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loraprune_lab import criteria as C
from loraprune_lab import tensor as T
from loraprune_lab.models import Model, ModelSpec
from loraprune_lab.pruner import prune_step
from loraprune_lab.tensor import Tape, Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def grad_of(fn, w):
    w.grad = None
    with Tape() as tape:
        loss = fn(w)
    tape.backward(loss)
    return w.grad


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear_in_the_loss(x, a, b):
    w = Tensor(x, requires_grad=True)
    f = lambda t: T.reduce_sum(T.gelu(t))
    g = lambda t: T.reduce_mean(T.hadamard(t, t))
    combined = grad_of(lambda t: T.add(T.scale(f(t), a), T.scale(g(t), b)), w)
    np.testing.assert_allclose(combined, a * grad_of(f, w) + b * grad_of(g, w), atol=1e-10)


def one_layer(n_out):
    spec = ModelSpec(arch="mlp", in_dim=5, classes=2, hidden=(n_out,), rank=1)
    model = Model.init(spec, trainable=False)
    model.attach_lora(np.random.default_rng(0))
    return model


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(0, 100)), st.floats(1e-3, 1e3), st.floats(0, 0.95))
def test_top_k_is_scale_invariant(scores, c, target):
    a, b = one_layer(4), one_layer(4)
    prune_step(a, _state(scores), target)
    prune_step(b, _state(scores * c), target)
    np.testing.assert_array_equal(a.layers["fc0"].mask, b.layers["fc0"].mask)


def _state(scores):
    s = C.ImportanceState()
    s.smooth["fc0"] = np.asarray(scores, dtype=float).reshape(5, -1)
    return s


@settings(max_examples=50, deadline=None)
@given(st.lists(arrays(np.float64, 6, elements=st.floats(0, 50)), min_size=1, max_size=12),
       st.floats(0, 1), st.sampled_from(C.EMA_MODES))
def test_ema_stays_within_input_range(seq, lam, mode):
    state = C.ImportanceState(lam=lam)
    for inst in seq:
        C.ema_update(state, {"l": inst}, mode)
    lo, hi = np.min(seq, axis=0), np.max(seq, axis=0)
    assert np.all(state.smooth["l"] >= lo - 1e-9) and np.all(state.smooth["l"] <= hi + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 0.95), min_size=1, max_size=8), st.integers(0, 2**31))
def test_masks_only_shrink(targets, seed):
    rng = np.random.default_rng(seed)
    model = one_layer(6)
    mask = model.layers["fc0"].mask.copy()
    for target in sorted(targets):
        prune_step(model, _state(rng.normal(size=30)), target)
        new = model.layers["fc0"].mask
        assert np.all(new <= mask)
        assert model.layers["fc0"].n_pruned() == int(np.floor(target * 30 + 1e-9))
        mask = new.copy()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (4, 3), elements=finite))
def test_scores_are_non_negative(w, g):
    assert np.all(C.importance_taylor_exact(w, g) >= 0)
    assert np.all(C.importance_magnitude(w) >= 0)
