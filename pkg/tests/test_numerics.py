import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from attncap import numerics as nx
from attncap.model import ModelConfig, forward, init_model

TOL = 1e-4


def grad_check(fn, *arrays, seed=0):
    """Analytic vs central-difference gradient of sum(w * fn(*arrays)) for each input."""
    rng = np.random.default_rng(seed)
    leaves = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    w = rng.standard_normal(out.shape)
    loss = nx.sum(out * w)
    analytic = nx.grad(loss, leaves)
    errs = []
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [nx.Tensor(x) if j == i else nx.Tensor(arrays[j]) for j in range(len(arrays))]
            return float((fn(*args).data * w).sum())
        numeric = nx.finite_difference_gradient(f, a, eps=1e-6)
        errs.append(nx.max_rel_error(analytic[i], numeric))
    return max(errs)


def shapes(rng, ndim_max=3, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=rng.integers(1, ndim_max + 1)))


CASES = range(24)


@pytest.mark.parametrize("case", CASES)
def test_elementwise_gradients(case):
    rng = np.random.default_rng(case)
    s = shapes(rng)
    a, b = rng.standard_normal(s), rng.standard_normal(s)
    bcast = rng.standard_normal(s[-1:])
    assert grad_check(nx.add, a, bcast) < TOL
    assert grad_check(nx.sub, a, b) < TOL
    assert grad_check(nx.mul, a, bcast) < TOL
    assert grad_check(nx.square, a) < TOL
    assert grad_check(lambda x: nx.sum(x) * 1.0, a) < TOL
    assert grad_check(nx.gelu, a * 2) < TOL


@pytest.mark.parametrize("case", CASES)
def test_matmul_and_structural_gradients(case):
    rng = np.random.default_rng(100 + case)
    batch = tuple(int(v) for v in rng.integers(1, 4, size=rng.integers(0, 2)))
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    a, b = rng.standard_normal(batch + (n, k)), rng.standard_normal((k, m))
    assert grad_check(nx.matmul, a, b) < TOL
    assert grad_check(nx.transpose, a) < TOL
    c = rng.standard_normal(batch + (n, m))
    assert grad_check(lambda x, y: nx.concat([x, y], axis=-1), a, c) < TOL
    assert grad_check(lambda x: x[..., -1:, :], a) < TOL
    assert grad_check(lambda x: nx.take(x, np.array([0, 0, n - 1])) if x.data.ndim == 2 else x[0], a) < TOL


@pytest.mark.parametrize("case", CASES)
def test_softmax_layernorm_ce_gradients(case):
    rng = np.random.default_rng(200 + case)
    nq, nk, T = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 7))
    nq = min(nq, nk)
    m = rng.standard_normal((nq, nk)) * 2
    scale = float(rng.uniform(0.5, 3.0))
    assert grad_check(lambda x: nx.softmax_rows(x, scale=scale), m) < TOL
    assert grad_check(lambda x: nx.softmax_rows(x, scale=scale, causal=True), m) < TOL
    x = rng.standard_normal((nq, T))
    assert grad_check(nx.layer_norm, x) < TOL
    tgt = rng.integers(0, T, size=nq)
    assert grad_check(lambda z: nx.cross_entropy(z, tgt), x) < TOL
    assert grad_check(lambda z: nx.cross_entropy(z[0], int(tgt[0])), x) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_full_forward_gradient_two_heads(seed):
    cfg = ModelConfig(T=5, N=4, B=4, H=2, L=1, d_h=3, ffn_mult=2)
    params = init_model(cfg, seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.T, size=(3, cfg.N))
    names = params.trainable

    def loss_of(ws):
        logits = forward(params, tokens[:, :-1], weights=ws, last_only=True)
        return nx.cross_entropy(logits, tokens[:, -1])

    leaves = {k: nx.Tensor(params.tensors[k], requires_grad=True) for k in names}
    # perturb biases away from zero so their gradients are generic
    for k in names:
        if k.endswith(("b1", "b2")):
            leaves[k].data = rng.standard_normal(leaves[k].shape) * 0.1
    analytic = nx.grad(loss_of(leaves), [leaves[k] for k in names])
    for k, g in zip(names, analytic):
        def f(x, k=k):
            ws = {n: nx.Tensor(x if n == k else leaves[n].data) for n in names}
            return float(loss_of(ws).data)
        assert nx.max_rel_error(g, nx.finite_difference_gradient(f, leaves[k].data)) < TOL, k


def test_shared_subexpression_accumulates():
    x = nx.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x
    (g,) = nx.grad(nx.sum(y), [x])
    np.testing.assert_allclose(g, 2 * x.data + 1)


def test_grad_contracts():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nx.ContractError):
        nx.grad(x * 2.0, [x])
    const = nx.sum(nx.Tensor(np.ones(3)))
    np.testing.assert_array_equal(nx.grad(const, [x])[0], np.zeros(3))
    unrelated = nx.Tensor(np.ones(2), requires_grad=True)
    assert nx.grad(nx.sum(x), [unrelated])[0].tolist() == [0.0, 0.0]


def test_dimension_and_contract_errors():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(nx.ContractError):
        nx.softmax_rows(np.ones((2, 2)), scale=0.0)
    with pytest.raises(nx.ContractError):
        nx.layer_norm(np.ones((3, 1)))
    with pytest.raises(IndexError):
        nx.cross_entropy(np.zeros((2, 4)), np.array([0, 4]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)), st.booleans(), st.floats(0.1, 10))
def test_softmax_rows_are_distributions(m, causal, scale):
    if causal and m.shape[-2] > m.shape[-1]:
        with pytest.raises(nx.ContractError):
            nx.softmax_rows(m, scale=scale, causal=causal)
        return
    p = nx.softmax_rows(m, scale=scale, causal=causal).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    if causal:
        nq, nk = m.shape[-2:]
        i, j = np.indices((nq, nk))
        assert np.all(p[..., j > i + (nk - nq)] == 0)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_moments(x):
    y = nx.layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    expected = var / (var + nx.LN_EPS)
    np.testing.assert_allclose((y**2).mean(axis=-1), expected, rtol=1e-9, atol=1e-12)


def test_gelu_exact_form():
    from scipy.stats import norm

    x = np.linspace(-4, 4, 41)
    np.testing.assert_allclose(nx.gelu(x).data, x * norm.cdf(x), rtol=1e-13, atol=1e-15)


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5, 7))
    t = rng.integers(0, 7, size=5)
    ref = -np.mean(z[np.arange(5), t] - np.log(np.exp(z).sum(axis=1)))
    assert nx.cross_entropy(z, t).data == pytest.approx(ref, rel=1e-13)


def test_repeated_backward_is_bit_exact():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))

    def run():
        x, y = nx.Tensor(a, requires_grad=True), nx.Tensor(b, requires_grad=True)
        z = nx.softmax_rows(x @ y, scale=1.7)
        return nx.grad(nx.cross_entropy(z, np.array([0, 1, 2, 0])), [x, y])

    g1, g2 = run(), run()
    for u, v in zip(g1, g2):
        assert u.tobytes() == v.tobytes()


def test_dropout_scaling_and_identity():
    x = np.ones((200, 50))
    np.testing.assert_array_equal(nx.dropout(x, 0.3, None).data, x)
    y = nx.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
