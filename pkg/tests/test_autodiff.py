import math

import numpy as np
import pytest

from o3n import autodiff as ad
from o3n.autodiff import (
    SGD,
    Checkpoint,
    ParamSet,
    Tensor,
    decode_checkpoint,
    encode_checkpoint,
    grad_check,
    load_checkpoint,
    parameter,
    save_checkpoint,
    sgd_step,
)
from o3n.errors import LabelOutOfRange, MalformedContainer, ShapeError
from o3n.o3nmodel import ConvSpec, O3NConfig, O3NNetwork, TrunkConfig


def f64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def away_from_zero(rng, *shape, margin=0.1):
    x = rng.uniform(margin, 2.0, size=shape)
    return Tensor(x * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((2, 5, 5, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(k)).data, x)

    def test_all_ones(self):
        out = ad.conv2d(Tensor(np.ones((1, 3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0

    def test_padding_and_stride_shape(self):
        out = ad.conv2d(Tensor(np.zeros((2, 32, 32, 15))), Tensor(np.zeros((5, 5, 15, 16))), stride=2, pad=2)
        assert out.shape == (2, 16, 16, 16)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 5, 5, 2))), Tensor(np.zeros((3, 3, 3, 1))))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_gradients(self, stride, pad):
        rng = np.random.default_rng(stride + 3 * pad)
        t = {"x": f64(rng, 2, 5, 5, 3), "k": f64(rng, 3, 3, 3, 4), "b": f64(rng, 4)}
        w = rng.normal(size=ad.conv2d(t["x"], t["k"], t["b"], stride, pad).shape)

        def fn():
            return ad.total(ad.mul(ad.conv2d(t["x"], t["k"], t["b"], stride, pad), Tensor(w)))

        assert grad_check(fn, t, eps=1e-3) < 1e-4


class TestElementwise:
    def test_relu_values(self):
        assert ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_gradient_away_from_kink(self):
        rng = np.random.default_rng(1)
        t = {"x": away_from_zero(rng, 4, 6)}
        w = Tensor(rng.normal(size=(4, 6)))
        assert grad_check(lambda: ad.total(ad.mul(ad.relu(t["x"]), w)), t) < 1e-4

    def test_maxpool_value(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        assert ad.maxpool(x, 2).data.item() == 4.0

    def test_maxpool_gradient(self):
        rng = np.random.default_rng(2)
        # a permutation keeps every window maximum unique and well separated
        x = rng.permutation(2 * 6 * 6 * 3).reshape(2, 6, 6, 3).astype(np.float64)
        t = {"x": Tensor(x, requires_grad=True)}
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        assert grad_check(lambda: ad.total(ad.mul(ad.maxpool(t["x"], 2), w)), t) < 1e-4

    def test_maxpool_routes_gradient_to_argmax(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1), requires_grad=True)
        ad.total(ad.maxpool(x, 2)).backward()
        assert x.grad.reshape(-1).tolist() == [0.0, 0.0, 0.0, 1.0]

    def test_dropout_rate_zero_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert ad.dropout(x, 0.0, np.random.default_rng(0), train=True) is x

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert ad.dropout(x, 0.8, None, train=False) is x

    def test_dropout_scaling_and_gradient(self):
        rng = np.random.default_rng(3)
        x = Tensor(np.ones(10_000), requires_grad=True)
        y = ad.dropout(x, 0.8, rng, train=True)
        kept = y.data != 0
        np.testing.assert_allclose(y.data[kept], 5.0)
        assert abs(kept.mean() - 0.2) < 0.02
        ad.total(y).backward()
        np.testing.assert_array_equal(x.grad, y.data)

    def test_concat_and_combine_gradients(self):
        rng = np.random.default_rng(4)
        t = {"a": f64(rng, 3, 4), "b": f64(rng, 3, 2), "v": f64(rng, 3, 5, 4)}
        w1, w2 = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 4)))

        def fn():
            cat = ad.total(ad.mul(ad.concat([t["a"], t["b"]]), w1))
            mix = ad.total(ad.mul(ad.combine_branches(t["v"], [-4, -2, 0, 2, 4]), w2))
            return ad.add(cat, mix)

        assert grad_check(fn, t) < 1e-4


class TestAffine:
    def test_gradients(self):
        rng = np.random.default_rng(5)
        t = {"x": f64(rng, 4, 7), "w": f64(rng, 7, 3), "b": f64(rng, 3)}
        wt = Tensor(rng.normal(size=(4, 3)))
        assert grad_check(lambda: ad.total(ad.mul(ad.affine(t["x"], t["w"], t["b"]), wt)), t) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestSoftmaxXent:
    def test_uniform_logits(self):
        loss, probs = ad.softmax_xent(Tensor(np.zeros((1, 6))), [2])
        np.testing.assert_allclose(probs, 1 / 6)
        assert loss.data.item() == pytest.approx(math.log(6), abs=1e-12)
        assert loss.data.item() == pytest.approx(1.7918, abs=1e-4)

    def test_large_logits_stable(self):
        loss, probs = ad.softmax_xent(Tensor(np.array([[1000.0, 0.0]])), [0])
        assert np.isfinite(loss.data) and np.isfinite(probs).all()
        np.testing.assert_allclose(probs, [[1.0, 0.0]], atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        t = {"z": f64(rng, 4, 6)}
        labels = [0, 5, 2, 2]
        assert grad_check(lambda: ad.softmax_xent(t["z"], labels)[0], t) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            ad.softmax_xent(Tensor(np.zeros((2, 3))), [0, 3])


def tiny_o3n(fusion, dtype=np.float64):
    trunk = TrunkConfig(convs=(ConvSpec(4, 3, 1, 2), ConvSpec(5, 3, 1, 1)), fc_dim=6, input_hw=(8, 8))
    cfg = O3NConfig(N=2, W=3, encoder="stack_of_diff", fusion=fusion, trunk=trunk, head_dim=5)
    return O3NNetwork(cfg, rng=np.random.default_rng(7), dtype=dtype), cfg


@pytest.mark.parametrize("fusion", ["sum_of_diff", "concat"])
def test_full_o3n_graph_gradients(fusion):
    net, cfg = tiny_o3n(fusion)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, cfg.N + 1, 8, 8, cfg.trunk.c_in))
    answers = [1, 3]
    err = grad_check(lambda: net.loss(x, answers)[0], net.params, eps=1e-5, max_coords=15)
    assert err < 1e-4


class TestSGD:
    def test_plain_step(self):
        w = {"w": np.array([1.0])}
        sgd_step(w, {"w": np.array([2.0])}, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert w["w"].item() == pytest.approx(0.8)

    def test_zero_gradient_keeps_weight(self):
        w = {"w": np.array([1.5])}
        sgd_step(w, {"w": np.array([0.0])}, lr=0.1, momentum=0.7, weight_decay=0.0)
        assert w["w"].item() == 1.5

    def test_two_momentum_steps(self):
        w = {"w": np.array([0.0])}
        vel = None
        for _ in range(2):
            vel = sgd_step(w, {"w": np.array([1.0])}, lr=0.1, momentum=0.9, weight_decay=0.0, velocity=vel)
        assert w["w"].item() == pytest.approx(-0.29)

    def test_lr_multiplier(self):
        w = {"a": np.array([0.0]), "b": np.array([0.0])}
        g = {"a": np.array([1.0]), "b": np.array([1.0])}
        sgd_step(w, g, lr=0.01, momentum=0.0, weight_decay=0.0, lr_mult={"b": 10.0})
        assert w["a"].item() == pytest.approx(-0.01) and w["b"].item() == pytest.approx(-0.1)

    def test_gradient_shape_checked(self):
        with pytest.raises(ShapeError):
            sgd_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, lr=0.1)

    def test_clipping_bounds_update(self):
        p = ParamSet(w=parameter(np.zeros(4), dtype=np.float64))
        p["w"].grad = np.full(4, 100.0)
        SGD(p, momentum=0.0, weight_decay=0.0, clip_norm=1.0).step(1.0)
        assert np.linalg.norm(p["w"].data) == pytest.approx(1.0)


def two_layer(rng, d_in, hidden, classes):
    return ParamSet(
        w1=parameter(rng.normal(0, math.sqrt(2 / d_in), (d_in, hidden))),
        b1=parameter(np.zeros(hidden)),
        w2=parameter(rng.normal(0, math.sqrt(2 / hidden), (hidden, classes))),
        b2=parameter(np.zeros(classes)),
    )


def mlp_logits(p, x):
    return ad.affine(ad.relu(ad.affine(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def train_mlp(seed, steps):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(16, 10)).astype(np.float32)
    y = (x @ rng.normal(size=(10, 3))).argmax(axis=1)
    p = two_layer(rng, 10, 32, 3)
    opt = SGD(p, momentum=0.9, weight_decay=0.0)
    for step in range(steps):
        opt.zero_grad()
        loss, probs = ad.softmax_xent(mlp_logits(p, x), y)
        if (probs.argmax(axis=1) == y).all():
            return p, step
        loss.backward()
        opt.step(0.05)
    return p, None


def test_two_layer_overfits_sixteen_samples():
    _, step = train_mlp(0, 500)
    assert step is not None and step < 500


def test_training_is_bitwise_deterministic():
    a, _ = train_mlp(3, 20)
    b, _ = train_mlp(3, 20)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()


class TestCheckpoint:
    def make(self):
        rng = np.random.default_rng(9)
        return Checkpoint(
            {"trunk.conv1.weight": rng.normal(size=(3, 3, 15, 4)).astype(np.float32),
             "trunk.conv1.bias": np.zeros(4, np.float32),
             "scalar": np.array(2.5, np.float32)},
            {"epoch": "3", "seed": "1", "config_hash": "abc"},
        )

    def test_round_trip_bitwise(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert list(back.tensors) == list(ck.tensors)
        for k in ck.tensors:
            assert back.tensors[k].shape == ck.tensors[k].shape
            assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
        assert back.metadata == ck.metadata
        assert encode_checkpoint(back) == encode_checkpoint(ck)

    def test_header(self):
        blob = encode_checkpoint(self.make())
        assert blob[:4] == b"O3NC" and blob[4:12] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")

    def test_bad_magic(self, tmp_path):
        blob = bytearray(encode_checkpoint(self.make()))
        blob[:4] = b"NOPE"
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        with pytest.raises(MalformedContainer):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_truncated(self):
        blob = encode_checkpoint(self.make())
        with pytest.raises(MalformedContainer):
            decode_checkpoint(blob[:40])

    def test_params_are_trainable_float32(self):
        p = self.make().params()
        assert all(t.requires_grad and t.dtype == np.float32 for t in p.values())
