import numpy as np
import pytest

from tempomesh.errors import CheckpointError, ShapeError
from tempomesh.layers import (
    AdamW,
    Attention,
    FeedForward,
    Linear,
    TransformerBlock,
    apply_rotary,
    fourier_features,
    timestep_embedding,
)
from tempomesh.numerics import CHECK_DTYPE, Tape, Tensor, backward, finite_diff_check, make_rng, tsum


def test_linear_shapes_and_zero_init():
    """Linear stores weights as (in, out); zero-init layers output their bias"""
    layer = Linear(4, 3, make_rng(0))
    assert layer.weight.shape == (4, 3)
    assert layer(Tensor(np.ones((5, 4)))).shape == (5, 3)
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((5, 3))))

    zero = Linear(4, 3, make_rng(0), zero_init=True)
    np.testing.assert_array_equal(zero(Tensor(np.ones((2, 4)))).numpy(), np.zeros((2, 3)))


def test_state_dict_round_trip_and_mismatch():
    """Parameters load back by name; wrong names or shapes are rejected"""
    a = FeedForward(4, 8, make_rng(0))
    b = FeedForward(4, 8, make_rng(1))
    b.load_state_dict(a.state_dict())
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    np.testing.assert_array_equal(a(x).numpy(), b(x).numpy())
    assert a.num_parameters() == 4 * 8 + 8 + 8 * 4 + 4

    state = a.state_dict()
    state.pop("fc1.bias")
    with pytest.raises(CheckpointError):
        b.load_state_dict(state)
    other = FeedForward(4, 6, make_rng(0))
    with pytest.raises(CheckpointError):
        other.load_state_dict(a.state_dict())


def test_fourier_features_width():
    """k coordinates give k * 2 * n features"""
    out = fourier_features(Tensor(np.zeros((7, 3))), 5)
    assert out.shape == (7, 30)
    # sin(0) = 0 and cos(0) = 1 per coordinate block
    np.testing.assert_allclose(out.numpy()[0, :5], 0.0)
    np.testing.assert_allclose(out.numpy()[0, 5:10], 1.0)


def test_timestep_embedding_shape():
    assert timestep_embedding(np.array([0.0, 500.0]), 64).shape == (2, 64)


def test_rotary_preserves_norm_and_validates():
    """Rotary phases rotate channel pairs without changing their length"""
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4, 8)))
    out = apply_rotary(x, [0.0, 1.0, 2.0, 5.0])
    np.testing.assert_allclose(
        np.linalg.norm(out.numpy(), axis=-1), np.linalg.norm(x.numpy(), axis=-1), rtol=1e-5
    )
    np.testing.assert_allclose(out.numpy()[:, 0], x.numpy()[:, 0], rtol=1e-6)
    with pytest.raises(ShapeError):
        apply_rotary(Tensor(np.ones((4, 7))), np.arange(4))
    with pytest.raises(ShapeError):
        apply_rotary(Tensor(np.ones((4, 8))), np.arange(3))


def test_rotary_scores_depend_on_offsets_only():
    """Shifting every position by the same amount leaves q.k scores unchanged"""
    rng = np.random.default_rng(1)
    q = Tensor(rng.standard_normal((4, 8)), dtype=CHECK_DTYPE)
    k = Tensor(rng.standard_normal((4, 8)), dtype=CHECK_DTYPE)
    pos = np.array([0.0, 1.0, 2.0, 3.0])
    scores = apply_rotary(q, pos).numpy() @ apply_rotary(k, pos).numpy().T
    shifted = apply_rotary(q, pos + 7).numpy() @ apply_rotary(k, pos + 7).numpy().T
    np.testing.assert_allclose(scores, shifted, atol=1e-10)


def test_attention_validates_heads():
    with pytest.raises(ShapeError):
        Attention(10, 3, make_rng(0))
    with pytest.raises(ShapeError):
        Attention(6, 2, make_rng(0), rotary=True)


def test_self_attention_is_permutation_equivariant():
    """Without rotary positions, permuting tokens permutes the output"""
    block = TransformerBlock(8, 2, make_rng(0))
    x = np.random.default_rng(2).standard_normal((5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    out = block(Tensor(x)).numpy()
    out_perm = block(Tensor(x[perm])).numpy()
    np.testing.assert_allclose(out_perm, out[perm], rtol=1e-4, atol=1e-5)


def test_attention_gradient_in_64_bit():
    """A 64-bit attention layer passes the finite-difference check"""
    attn = Attention(4, 2, make_rng(0), rotary=True).to_dtype(CHECK_DTYPE)
    positions = np.arange(3, dtype=np.float64)

    def fn(x):
        return tsum(attn(x, positions=positions) * Tensor(np.linspace(-1, 1, 4), dtype=CHECK_DTYPE))

    x = np.random.default_rng(4).standard_normal((3, 4))
    assert finite_diff_check(fn, x) < 1e-4


def test_adamw_moves_towards_minimum():
    """AdamW decreases a quadratic and clips large gradients"""
    w = Tensor(np.array([3.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0, max_grad_norm=1.0)
    start = float(np.sum(w.data**2))
    stats = None
    for _ in range(20):
        with Tape() as tape:
            loss = tsum(w * w)
        stats = opt.step(backward(tape, loss, wrt=[w]))
    assert float(np.sum(w.data**2)) < start
    assert stats.clipped
    assert w.dtype == np.float32


def test_adamw_cosine_schedule():
    """The learning rate decays from the peak to the floor over the schedule"""
    w = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, lr=1.0, total_steps=10, min_lr_ratio=0.1)
    assert opt.current_lr() == pytest.approx(1.0)
    for _ in range(5):
        opt.step({})
    assert opt.current_lr() == pytest.approx(0.1 + 0.9 * 0.5)
    for _ in range(10):
        opt.step({})
    assert opt.current_lr() == pytest.approx(0.1)
