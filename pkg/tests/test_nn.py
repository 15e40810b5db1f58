import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdopt import nn
from mdopt.errors import BatchIndexError, DivergenceError, LayoutError


def random_batch(spec, m, rng):
    return nn.Batch(
        rng.integers(0, spec.num_users, m),
        rng.integers(0, spec.num_items, m),
        rng.integers(0, 2, m),
    )


def _pattern(spec, values, layout, batch):
    _, pre, _ = nn._forward(spec, nn.ParamVector(values, layout), batch)
    return [z > 0 for z in pre]


def fd_partial(spec, params, batch, c, h):
    """Fourth-order central difference of the loss along coordinate ``c``.

    Returns None when the stencil crosses a ReLU kink, where the loss is not
    smooth and no difference quotient is a valid reference.
    """
    base = _pattern(spec, params.values, params.layout, batch) if spec.activation == "relu" else None
    vals = {}
    for k in (-2, -1, 1, 2):
        v = params.values.copy()
        v[c] += k * h
        if base is not None:
            if any(np.any(a != b) for a, b in zip(base, _pattern(spec, v, params.layout, batch))):
                return None
        vals[k] = nn.loss(spec, nn.ParamVector(v, params.layout), batch)
    return (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * h)


def fd_check(spec, params, batch, rng, per_block=20, steps=(1e-3, 1e-4, 1e-5, 1e-6)):
    """Worst relative error of analytic vs finite-difference partials, 20 coordinates per block.

    The largest step whose stencil stays on one side of every ReLU kink is used.
    """
    _, g = nn.loss_and_grad(spec, params, batch)
    worst = 0.0
    for name in spec.layout.names:
        sl = spec.layout.slice(name)
        coords = np.arange(sl.start, sl.stop)
        if name.endswith("_emb"):
            # only referenced rows have non-zero gradient; sample among those
            ids = batch.user_ids if name == "user_emb" else batch.item_ids
            rows = np.unique(ids)
            d = spec.embed_dim
            coords = (sl.start + rows[:, None] * d + np.arange(d)).ravel()
        checked = 0
        for c in rng.permutation(coords):
            fd = next((v for h in steps if (v := fd_partial(spec, params, batch, c, h)) is not None), None)
            if fd is None:
                continue
            denom = max(abs(fd), abs(g.values[c]), 1e-8)
            worst = max(worst, abs(fd - g.values[c]) / denom)
            checked += 1
            if checked == per_block:
                break
        assert checked > 0, f"no smooth coordinate found in block {name}"
    return worst


class TestLayout:
    def test_block_order_and_size(self):
        spec = nn.ModelSpec(5, 7, embed_dim=3, hidden=(4, 2))
        lay = spec.layout
        assert lay.names == ["user_emb", "item_emb", "dense0.W", "dense0.b", "dense1.W", "dense1.b", "out.W", "out.b"]
        assert lay.size == 15 + 21 + 6 * 4 + 4 + 4 * 2 + 2 + 2 + 1

    def test_block_is_view(self):
        spec = nn.ModelSpec(5, 7, embed_dim=3, hidden=(4,))
        p = nn.ParamVector.zeros(spec.layout)
        p.block("dense0.b")[:] = 1.0
        assert p.values[spec.layout.slice("dense0.b")].sum() == 4.0

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            nn.ModelSpec(5, 7, hidden=())
        with pytest.raises(ValueError):
            nn.ModelSpec(5, 7, activation="gelu")
        with pytest.raises(ValueError):
            nn.ModelSpec(0, 7)


class TestParamVector:
    def test_arithmetic(self):
        lay = nn.Layout.flat(3)
        a = nn.ParamVector([1.0, 2.0, 3.0], lay)
        b = nn.ParamVector([0.5, 0.5, 0.5], lay)
        assert np.array_equal((a + b).values, [1.5, 2.5, 3.5])
        assert np.array_equal((a - b).values, [0.5, 1.5, 2.5])
        assert np.array_equal((2 * a).values, [2, 4, 6])
        assert np.array_equal(a.axpy(-2, b).values, [0, 1, 2])
        assert a.dot(b) == 3.0

    def test_layout_mismatch_raises(self):
        a = nn.ParamVector.zeros(nn.Layout.flat(3))
        b = nn.ParamVector.zeros(nn.Layout.flat(3, "other"))
        with pytest.raises(LayoutError):
            a + b
        with pytest.raises(LayoutError):
            nn.ParamVector(np.zeros(4), nn.Layout.flat(3))

    def test_operands_untouched(self):
        a = nn.ParamVector([1.0, 2.0], nn.Layout.flat(2))
        before = a.values.copy()
        a.axpy(3.0, a)
        assert np.array_equal(a.values, before)

    def test_bitwise_equal_distinguishes_signed_zero(self):
        lay = nn.Layout.flat(1)
        assert not nn.ParamVector([0.0], lay).bitwise_equal(nn.ParamVector([-0.0], lay))


class TestForward:
    def test_hand_computed(self):
        spec = nn.ModelSpec(2, 2, embed_dim=1, hidden=(1,))
        p = nn.ParamVector.zeros(spec.layout)
        p.block("user_emb")[:] = [[1.0], [2.0]]
        p.block("item_emb")[:] = [[-1.0], [0.5]]
        p.block("dense0.W")[:] = [[1.0], [2.0]]
        p.block("dense0.b")[:] = [0.5]
        p.block("out.W")[:] = [2.0]
        p.block("out.b")[:] = [-1.0]
        batch = nn.Batch([1, 0], [1, 0], [1, 0])
        # user 1 item 1: relu(2 + 1 + 0.5) = 3.5 -> logit 6; user 0 item 0: relu(1 - 2 + 0.5) = 0 -> logit -1
        expected = 1 / (1 + np.exp(-np.array([6.0, -1.0])))
        assert np.allclose(nn.forward(spec, p, batch), expected, rtol=0, atol=1e-15)
        loss = np.mean([np.log1p(np.exp(-6.0)), np.log1p(np.exp(-1.0))])
        assert nn.loss(spec, p, batch) == pytest.approx(loss, rel=1e-14)

    def test_out_of_range_ids(self):
        spec = nn.ModelSpec(3, 3, embed_dim=2, hidden=(2,))
        p = nn.init_params(spec)
        with pytest.raises(BatchIndexError):
            nn.forward(spec, p, nn.Batch([3], [0], [1]))
        with pytest.raises(BatchIndexError):
            nn.forward(spec, p, nn.Batch([0], [-1], [1]))

    def test_init_deterministic(self):
        spec = nn.ModelSpec(10, 10, embed_dim=4, hidden=(8,))
        assert nn.init_params(spec, 3).bitwise_equal(nn.init_params(spec, 3))
        assert not nn.init_params(spec, 3).bitwise_equal(nn.init_params(spec, 4))
        assert np.all(nn.init_params(spec).block("dense0.b") == 0)

    def test_extreme_logits_stay_finite(self):
        spec = nn.ModelSpec(2, 2, embed_dim=1, hidden=(1,))
        p = nn.ParamVector.zeros(spec.layout)
        p.block("out.b")[:] = [800.0]
        loss, g = nn.loss_and_grad(spec, p, nn.Batch([0], [0], [0]))
        assert loss == pytest.approx(800.0)
        assert np.all(np.isfinite(g.values))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_typed(self):
        spec = nn.ModelSpec(2, 2, embed_dim=1, hidden=(1,))
        p = nn.ParamVector.zeros(spec.layout)
        p.block("out.b")[:] = [np.nan]
        with pytest.raises(DivergenceError):
            nn.loss_and_grad(spec, p, nn.Batch([0], [0], [0]))


class TestGradient:
    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_finite_differences(self, activation, rng):
        spec = nn.ModelSpec(30, 25, embed_dim=4, hidden=(8, 5), activation=activation)
        params = nn.init_params(spec, 1)
        batch = random_batch(spec, 64, rng)
        assert fd_check(spec, params, batch, rng) <= 1e-5

    def test_sample_weight_scales_gradient(self, rng):
        spec = nn.ModelSpec(10, 10, embed_dim=3, hidden=(4,))
        p = nn.init_params(spec)
        batch = random_batch(spec, 16, rng)
        _, g = nn.loss_and_grad(spec, p, batch)
        _, g2 = nn.loss_and_grad(spec, p, batch, sample_weight=np.full(16, 2.0))
        assert np.allclose(g2.values, 2 * g.values, rtol=1e-14, atol=0)

    def test_unreferenced_rows_get_zero_gradient(self, rng):
        spec = nn.ModelSpec(10, 10, embed_dim=3, hidden=(4,))
        _, g = nn.loss_and_grad(spec, nn.init_params(spec), nn.Batch([1, 2], [3, 3], [1, 0]))
        emb = g.block("user_emb")
        assert np.all(emb[[0, 3, 4, 5, 6, 7, 8, 9]] == 0)
        assert np.any(emb[1] != 0)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**16), m=st.integers(1, 12))
    def test_fd_property(self, seed, m):
        rng = np.random.default_rng(seed)
        spec = nn.ModelSpec(6, 6, embed_dim=2, hidden=(3,), activation="tanh")
        params = nn.init_params(spec, seed)
        assert fd_check(spec, params, random_batch(spec, m, rng), rng, per_block=5) <= 1e-5


class TestHvp:
    def test_exact_on_quadratic(self, rng):
        A = rng.normal(size=(6, 6))
        A = A @ A.T + np.eye(6)
        lay = nn.Layout.flat(6)

        def grad(p):
            return nn.ParamVector(A @ p.values, lay)

        x = nn.ParamVector(rng.normal(size=6), lay)
        v = nn.ParamVector(rng.normal(size=6), lay)
        assert np.allclose(nn.fd_hvp(grad, x, v, 1e-3).values, A @ v.values, rtol=1e-10, atol=1e-10)

    def test_rejects_bad_input(self):
        lay = nn.Layout.flat(2)
        z = nn.ParamVector.zeros(lay)
        with pytest.raises(ValueError):
            nn.fd_hvp(lambda p: p, z, z)
        with pytest.raises(ValueError):
            nn.fd_hvp(lambda p: p, z, nn.ParamVector([1.0, 0.0], lay), eps=0)

    def test_neural_hvp_symmetric(self, rng):
        spec = nn.ModelSpec(8, 8, embed_dim=2, hidden=(4,), activation="tanh")
        p = nn.init_params(spec)
        batch = random_batch(spec, 32, rng)
        u = nn.ParamVector(rng.normal(size=spec.layout.size), spec.layout)
        w = nn.ParamVector(rng.normal(size=spec.layout.size), spec.layout)
        # u^T H w == w^T H u up to finite-difference error
        a = u.dot(nn.hvp(spec, p, batch, w))
        b = w.dot(nn.hvp(spec, p, batch, u))
        assert a == pytest.approx(b, rel=1e-5, abs=1e-8)
