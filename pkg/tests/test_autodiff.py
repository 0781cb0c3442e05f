import numpy as np
import pytest
from helpers import fd_gradcheck

from mvgnn import autodiff as ad
from mvgnn.errors import ContractError, FormatError, IndexRangeError, ShapeError


def t(data, grad=True):
    return ad.Tensor(np.asarray(data, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- forward values


def test_scatter_sum_forward():
    out = ad.scatter_sum(t([1.0, 2.0, 3.0]), np.array([0, 0, 1]), 2)
    assert np.array_equal(out.data, [3.0, 3.0])


def test_sigmoid_zero():
    assert ad.sigmoid(t([0.0])).data[0] == 0.5


def test_concat_shapes():
    out = ad.concat([t(np.zeros((2, 3))), t(np.zeros((2, 5)))], axis=-1)
    assert out.shape == (2, 8)


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="mse"):
        ad.mse(t(np.zeros(3)), t(np.zeros(4)))
    with pytest.raises(ShapeError, match="linear"):
        ad.linear(t(np.zeros((2, 3))), t(np.zeros((4, 5))))
    with pytest.raises(IndexRangeError):
        ad.scatter_sum(t([1.0, 2.0]), np.array([0, 5]), 2)
    with pytest.raises(IndexRangeError):
        ad.gather(t([1.0, 2.0]), np.array([3]))


def test_forward_matches_with_tape_disabled():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((2, 3))
    with_tape = ad.linear(t(x), t(w)).data
    with ad.no_grad():
        without = ad.linear(t(x), t(w)).data
    assert np.array_equal(with_tape, without)


# ---------------------------------------------------------------- backward


def test_sum_of_squares_gradient():
    x = t([3.0])
    loss = ad.tsum(ad.mul(x, x))
    ad.backward(loss)
    assert np.allclose(x.grad, [6.0])


def test_constant_input_gets_no_grad():
    x = t([2.0])
    c = t([5.0], grad=False)
    loss = ad.tsum(ad.mul(x, c))
    ad.backward(loss)
    assert c.grad is None
    assert np.allclose(x.grad, [5.0])


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        ad.backward(t([1.0, 2.0]))


def test_linear_mse_gradcheck():
    rng = np.random.default_rng(1)
    w = t(rng.standard_normal((2, 3)))
    b = t(rng.standard_normal(2))
    x = t(rng.standard_normal((5, 3)), grad=False)
    y = np.asarray(rng.standard_normal((5, 2)))
    fd_gradcheck(lambda: ad.mse(ad.linear(x, w, b), ad.constant(y)), [w, b])


@pytest.mark.parametrize(
    "name,builder",
    [
        ("add", lambda x, y: ad.add(x, y)),
        ("sub", lambda x, y: ad.sub(x, y)),
        ("mul", lambda x, y: ad.mul(x, y)),
        ("div", lambda x, y: ad.div(x, ad.add(ad.mul(y, y), 1.0))),
        ("sigmoid", lambda x, y: ad.sigmoid(x)),
        ("silu", lambda x, y: ad.silu(x)),
        ("concat", lambda x, y: ad.concat([x, y], axis=0)),
        ("narrow", lambda x, y: ad.narrow(x, 1, 1, 2)),
        ("reshape", lambda x, y: ad.reshape(x, (12,))),
        ("sum_axis", lambda x, y: ad.tsum(x, axis=1)),
        ("mean", lambda x, y: ad.mean(x)),
    ],
)
def test_elementwise_ops_gradcheck(name, builder):
    rng = np.random.default_rng(abs(hash(name)) % 2**31)
    x = t(rng.standard_normal((3, 4)))
    y = t(rng.standard_normal((3, 4)))

    def fn():
        out = builder(x, y)
        return ad.tsum(ad.mul(out, out)) if out.data.ndim else out

    fd_gradcheck(fn, [x], rng=rng)


def test_sqrt_gradcheck():
    rng = np.random.default_rng(7)
    x = t(rng.uniform(0.5, 2.0, size=(3, 4)))
    fd_gradcheck(lambda: ad.tsum(ad.sqrt(x)), [x], rng=rng)


def test_gather_scatter_gradcheck():
    rng = np.random.default_rng(2)
    v = t(rng.standard_normal((4, 3)))
    idx = np.array([0, 2, 2, 1, 3])

    def fn():
        g = ad.gather(v, idx)
        s = ad.scatter_sum(g, np.array([0, 0, 1, 1, 1]), 2)
        return ad.tsum(ad.mul(s, s))

    fd_gradcheck(fn, [v], rng=rng)


def test_scatter_grad_is_gather_of_upstream():
    rng = np.random.default_rng(3)
    v = t(rng.standard_normal(5))
    idx = np.array([0, 1, 0, 2, 1])
    out = ad.scatter_sum(v, idx, 3)
    loss = ad.tsum(ad.mul(out, ad.constant([1.0, 2.0, 3.0])))
    ad.backward(loss)
    assert np.array_equal(v.grad, np.array([1.0, 2.0, 3.0])[idx])


def test_grade_mix_gradcheck():
    rng = np.random.default_rng(4)
    v = t(rng.standard_normal((2, 3, 8)))
    w = t(rng.standard_normal((4, 2, 3)))
    fd_gradcheck(lambda: ad.tsum(ad.mul(ad.grade_mix(v, w), ad.grade_mix(v, w))), [v, w], rng=rng)


def test_geom_prod_gradcheck():
    rng = np.random.default_rng(5)
    a = t(rng.standard_normal((2, 2, 8)))
    b = t(rng.standard_normal((2, 2, 8)))
    fd_gradcheck(lambda: ad.tsum(ad.mul(ad.geom_prod(a, b), ad.geom_prod(a, b))), [a, b], rng=rng)


def test_mv_norm_gradcheck():
    rng = np.random.default_rng(6)
    v = t(rng.standard_normal((3, 2, 8)))
    fd_gradcheck(lambda: ad.tsum(ad.mv_norm(v)), [v], rng=rng)


def test_mv_norm_zero_input():
    v = t(np.zeros((1, 2, 8)))
    out = ad.mv_norm(v)
    assert np.array_equal(out.data, np.zeros((1, 2)))
    ad.backward(ad.tsum(out))
    assert np.all(np.isfinite(v.grad))


# ---------------------------------------------------------------- Adam


def test_adam_single_step():
    store = ad.ParameterStore()
    p = store.add("p", np.array([1.0]))
    state = ad.adam_step(store, grads={"p": np.array([1.0])}, lr=0.1, t=1)
    # at t=1 with bias correction the step is exactly lr * g/(|g|+eps)
    assert abs(p.data[0] - 0.9) <= 1e-6
    assert "p" in state


def test_adam_decoupled_weight_decay():
    store = ad.ParameterStore()
    p = store.add("p", np.array([2.0]))
    ad.adam_step(store, grads={"p": np.array([0.0])}, lr=0.1, weight_decay=0.01, t=1)
    assert np.allclose(p.data, 2.0 - 0.1 * 0.01 * 2.0)


def test_adam_missing_grad():
    store = ad.ParameterStore()
    store.add("p", np.array([1.0]))
    with pytest.raises(ContractError):
        ad.adam_step(store, grads={}, lr=0.1)


def test_adam_deterministic():
    results = []
    for _ in range(2):
        store = ad.ParameterStore()
        p = store.add("p", np.array([1.0, -2.0]))
        state = None
        rng = np.random.default_rng(9)
        for step in range(1, 6):
            g = rng.standard_normal(2)
            state = ad.adam_step(store, grads={"p": g}, lr=0.05, weight_decay=1e-4, t=step, state=state)
        results.append(p.data.copy())
    assert np.array_equal(results[0], results[1])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    store = ad.ParameterStore()
    store.add("layer.w", rng.standard_normal((3, 4)))
    store.add("layer.b", rng.standard_normal(4))
    store.add("scalar", np.array(1.5))
    path = tmp_path / "ck.mvgn"
    ad.save_checkpoint(path, store)
    data = ad.load_checkpoint(path)
    assert set(data) == {"layer.w", "layer.b", "scalar"}
    for name, tens in store.items():
        assert np.array_equal(data[name], tens.data)
    # bit-exact file round trip
    ad.save_checkpoint(tmp_path / "ck2.mvgn", store)
    assert (tmp_path / "ck.mvgn").read_bytes() == (tmp_path / "ck2.mvgn").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.mvgn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        ad.load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    store = ad.ParameterStore()
    store.add("w", np.arange(6.0).reshape(2, 3))
    path = tmp_path / "ck.mvgn"
    ad.save_checkpoint(path, store)
    blob = path.read_bytes()
    (tmp_path / "trunc.mvgn").write_bytes(blob[:-5])
    with pytest.raises(FormatError):
        ad.load_checkpoint(tmp_path / "trunc.mvgn")


def test_load_into_mismatch(tmp_path):
    store = ad.ParameterStore()
    store.add("w", np.zeros(3))
    ad.save_checkpoint(tmp_path / "ck.mvgn", store)
    other = ad.ParameterStore()
    other.add("different", np.zeros(3))
    with pytest.raises(ContractError):
        ad.load_into(tmp_path / "ck.mvgn", other)
