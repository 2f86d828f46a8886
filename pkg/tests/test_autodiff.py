import math

import numpy as np
import pytest

from promptraj import autodiff as ad
from promptraj.errors import ContractError, DimensionError, NumericError

from helpers import check_grad, numeric_grad

RNG = np.random.default_rng(0)


def test_softmax_symmetry():
    out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_sums_to_one():
    x = RNG.standard_normal((4, 7))
    out = ad.softmax(ad.Tensor(x), axis=1)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_matmul_identity():
    a = RNG.standard_normal((3, 3))
    out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a))
    np.testing.assert_allclose(out.data, a)


def test_gelu_at_zero():
    assert ad.gelu(ad.Tensor([0.0])).data[0] == 0.0


def test_layer_norm_constant_input():
    out = ad.layer_norm(ad.Tensor(np.full(5, 3.7)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_standardizes():
    x = RNG.standard_normal((3, 16)) * 4 + 2
    y = ad.layer_norm(ad.Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError) as ei:
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(ei.value) and "(4, 2)" in str(ei.value)


def test_non_finite_raises():
    with pytest.raises(NumericError):
        ad.Tensor([np.nan])


def test_backward_mse_simple():
    # loss = mean((x - 0)^2) with x=[2] -> grad 2*x = 4
    x = ad.Tensor([2.0], requires_grad=True)
    loss = ad.mse_mean(x, ad.Tensor([0.0]))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [4.0])


def test_backward_requires_scalar():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    y = ad.add(x, x)
    with pytest.raises(ContractError):
        ad.backward(y)


def test_unreachable_leaf_grad_absent():
    x = ad.Tensor([1.0], requires_grad=True)
    other = ad.Tensor([3.0], requires_grad=True)
    loss = ad.mse_mean(x, ad.Tensor([0.0]))
    ad.backward(loss)
    assert other.grad is None


def test_backward_accumulates_across_calls():
    x = ad.Tensor([2.0], requires_grad=True)
    for _ in range(2):
        loss = ad.mse_mean(x, ad.Tensor([0.0]))
        ad.backward(loss)
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        w = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        y = ad.gelu(ad.matmul(x, w))
        loss = ad.mse_mean(y, ad.Tensor(np.zeros((4, 4))))
        ad.backward(loss)
        return x.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


_OTHER = np.random.default_rng(99).standard_normal((4, 5))
_ZERO = np.zeros((4, 5))


@pytest.mark.parametrize("name,build", [
    ("add", lambda x: ad.mse_mean(ad.add(x, ad.Tensor(_OTHER)), ad.Tensor(_ZERO))),
    ("sub", lambda x: ad.mse_mean(ad.sub(ad.Tensor(_OTHER), x), ad.Tensor(_ZERO))),
    ("mul", lambda x: ad.mse_mean(ad.mul(x, ad.Tensor(_OTHER)), ad.Tensor(_ZERO))),
    ("scale", lambda x: ad.mse_mean(ad.scale(x, -1.7), ad.Tensor(_ZERO))),
    ("softmax", lambda x: ad.mse_mean(ad.softmax(x, axis=-1), ad.Tensor(_ZERO))),
    ("layer_norm", lambda x: ad.mse_mean(ad.layer_norm(x, axis=-1), ad.Tensor(_ZERO))),
    ("gelu", lambda x: ad.mse_mean(ad.gelu(x), ad.Tensor(_ZERO))),
    ("transpose", lambda x: ad.mse_mean(ad.transpose(x), ad.Tensor(_ZERO.T))),
    ("reshape", lambda x: ad.mse_mean(ad.reshape(x, (20,)), ad.Tensor(np.zeros(20)))),
    ("slice", lambda x: ad.mse_mean(ad.slice_(x, (slice(1, 3), slice(None))), ad.Tensor(np.zeros((2, 5))))),
    ("mean_all", lambda x: ad.mse_mean(ad.mean_all(x), ad.Tensor(0.0))),
])
def test_op_gradients_vs_finite_differences(name, build):
    x0 = np.random.default_rng(hash(name) % 2**32).standard_normal((4, 5))
    check_grad(build, x0, rtol=1e-4)


def test_matmul_chain_gradient():
    rng = np.random.default_rng(11)
    b = ad.Tensor(rng.standard_normal((5, 3)))
    c = ad.Tensor(rng.standard_normal((3, 4)))

    def build(x):
        return ad.mse_mean(ad.matmul(ad.matmul(x, b), c), ad.Tensor(np.zeros((4, 4))))

    check_grad(build, rng.standard_normal((4, 5)), rtol=1e-4)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(12)
    w = ad.Tensor(rng.standard_normal((4, 4)))

    def build(x):
        return ad.mse_mean(ad.matmul(x, w), ad.Tensor(np.zeros((2, 3, 4))))

    check_grad(build, rng.standard_normal((2, 3, 4)), rtol=1e-4)


def test_concat_gradient():
    rng = np.random.default_rng(13)
    other = ad.Tensor(rng.standard_normal((2, 3)))

    def build(x):
        return ad.mse_mean(ad.concat([x, other], axis=0), ad.Tensor(np.zeros((4, 3))))

    check_grad(build, rng.standard_normal((2, 3)), rtol=1e-4)


def test_embedding_lookup_gradient():
    rng = np.random.default_rng(14)
    idx = np.array([0, 2, 2, 1])

    def build(x):
        return ad.mse_mean(ad.embedding_lookup(x, idx), ad.Tensor(np.zeros((4, 3))))

    check_grad(build, rng.standard_normal((5, 3)), rtol=1e-4)


def test_broadcast_add_gradient():
    rng = np.random.default_rng(15)
    big = ad.Tensor(rng.standard_normal((3, 4, 2)))

    def build(x):
        return ad.mse_mean(ad.add(big, x), ad.Tensor(np.zeros((3, 4, 2))))

    check_grad(build, rng.standard_normal((2,)), rtol=1e-4)


def test_adamw_single_step():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected m_hat/sqrt(v_hat) = 1 at t=1
    np.testing.assert_allclose(p.data, [1.0 - 0.1], atol=1e-6)


def test_adamw_decoupled_decay():
    p = ad.Tensor(np.array([2.0]), requires_grad=True)
    opt = ad.AdamW({"p": p}, lr=0.1, weight_decay=0.01)
    p.grad = np.array([0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.01 * 2.0], atol=1e-15)


def test_adamw_step_counter():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.AdamW({"p": p}, lr=0.1)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert opt.step_count == 2


def test_adamw_missing_grad_names_param():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.AdamW({"weights": p})
    with pytest.raises(ContractError) as ei:
        opt.step()
    assert "weights" in str(ei.value)


def test_clip_grad_norm_clips():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([2.0, 0.0])
    pre = ad.clip_grad_norm({"p": p}, 1.0)
    assert pre == pytest.approx(2.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, abs=1e-12)


def test_clip_grad_norm_noop_below_max():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([0.3, 0.4])
    pre = ad.clip_grad_norm({"p": p}, 1.0)
    assert pre == pytest.approx(0.5)
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])


def test_clip_grad_norm_property():
    rng = np.random.default_rng(3)
    for _ in range(50):
        params = {f"p{i}": ad.Tensor(np.zeros(4), requires_grad=True) for i in range(3)}
        for p in params.values():
            p.grad = rng.standard_normal(4) * rng.uniform(0, 5)
        max_norm = rng.uniform(0.1, 3.0)
        ad.clip_grad_norm(params, max_norm)
        post = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values()))
        assert post <= max_norm + 1e-9


def test_clip_grad_norm_rejects_bad_max():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.zeros(2)
    with pytest.raises(ContractError):
        ad.clip_grad_norm({"p": p}, 0.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    params = {"a": ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True),
              "b": ad.Tensor(rng.standard_normal(4), requires_grad=True)}
    opt = ad.AdamW(params, lr=0.05, weight_decay=0.1)
    for _ in range(3):
        for p in params.values():
            p.grad = rng.standard_normal(p.shape)
        opt.step()
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, params, opt, extra={"note": "x"})
    loaded = ad.load_checkpoint(path)
    for k in params:
        np.testing.assert_array_equal(loaded["params"][k].data, params[k].data)
    assert loaded["optimizer"]["step"] == 3
    np.testing.assert_array_equal(loaded["optimizer"]["m"]["a"], opt.m["a"])
    assert loaded["extra"] == {"note": "x"}
