import itertools

import numpy as np
import pytest

from o3n import autodiff as ad
from o3n.clipenc import encode_array
from o3n.errors import ConfigError, ShapeError, VideoTooShort
from o3n.o3nmodel import (
    ConvSpec,
    O3NConfig,
    O3NNetwork,
    TrunkConfig,
    batch_arrays,
    dihedral,
    forward_branch,
    fuse_concat,
    fuse_sod,
    lr_at,
    make_questions,
    metrics_csv,
    network_from_checkpoint,
    o3n_forward,
    position_profile,
    pretrain,
    sod_coefficients,
    split_holdout,
)
from o3n.sampling import Clip, Question
from o3n.videodata import SynthConfig, Video, synth_corpus


def pairwise_fusion(vs):
    out = np.zeros_like(vs[0], dtype=np.float64)
    for i, j in itertools.combinations(range(len(vs)), 2):
        out += vs[j] - vs[i]
    return out


class TestFusion:
    def test_two_branches(self):
        np.testing.assert_allclose(fuse_sod([np.array([1.0, 2.0]), np.array([3.0, 5.0])]).data, [2.0, 3.0])

    def test_equal_branches_cancel(self):
        v = np.random.default_rng(0).normal(size=7)
        np.testing.assert_array_equal(fuse_sod([v] * 6).data, 0.0)

    def test_three_scalars(self):
        assert fuse_sod([np.array([1.0]), np.array([2.0]), np.array([4.0])]).data.item() == 6.0

    @pytest.mark.parametrize("k", range(2, 11))
    def test_matches_pairwise_oracle(self, k):
        rng = np.random.default_rng(k)
        vs = [rng.normal(size=16).astype(np.float32) for _ in range(k)]
        np.testing.assert_allclose(fuse_sod(vs).data, pairwise_fusion(vs), atol=1e-5)
        np.testing.assert_array_equal(sod_coefficients(k), [2 * i - 1 - k for i in range(1, k + 1)])

    def test_concat(self):
        out = fuse_concat([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        assert out.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_concat_width_and_block_permutation(self):
        rng = np.random.default_rng(1)
        vs = [rng.normal(size=5) for _ in range(6)]
        perm = rng.permutation(6)
        base = fuse_concat(vs).data.reshape(6, 5)
        assert fuse_concat(vs).shape == (30,)
        np.testing.assert_array_equal(fuse_concat([vs[p] for p in perm]).data.reshape(6, 5), base[perm])

    def test_sod_is_position_sensitive(self):
        rng = np.random.default_rng(2)
        vs = [rng.normal(size=8) for _ in range(6)]
        swapped = [vs[1], vs[0]] + vs[2:]
        assert not np.allclose(fuse_sod(vs).data, fuse_sod(swapped).data)

    def test_batched_branches(self):
        rng = np.random.default_rng(3)
        vs = [rng.normal(size=(4, 8)) for _ in range(3)]
        assert fuse_sod(vs).shape == (4, 8) and fuse_concat(vs).shape == (4, 24)

    def test_mismatched_branches(self):
        with pytest.raises(ShapeError):
            fuse_sod([np.zeros(3), np.zeros(4)])


class TestSchedule:
    def test_endpoints(self):
        assert lr_at(0, 200, 0.01, 1e-4) == pytest.approx(0.01)
        assert lr_at(199, 200, 0.01, 1e-4) == pytest.approx(1e-4)

    def test_geometric_midpoint(self):
        assert lr_at(1, 3, 0.01, 1e-4) == pytest.approx(1e-3)

    def test_constant_ratio(self):
        rates = np.array([lr_at(e, 10, 0.01, 1e-4) for e in range(10)])
        np.testing.assert_allclose(rates[1:] / rates[:-1], rates[1] / rates[0])

    @pytest.mark.parametrize("args", [(0, 1, 0.01, 1e-4), (3, 3, 0.01, 1e-4), (0, 5, 0.0, 1e-4)])
    def test_errors(self, args):
        with pytest.raises(ConfigError):
            lr_at(*args)


def tiny_config(**kw):
    trunk = TrunkConfig(convs=(ConvSpec(4, 3, 2, 2), ConvSpec(8, 3, 1, 2)), fc_dim=16, input_hw=(16, 16))
    base = dict(N=3, W=4, encoder="stack_of_diff", trunk=trunk, head_dim=12, epochs=3, batch_questions=8)
    base.update(kw)
    return O3NConfig(**base)


class TestNetwork:
    def test_default_branch_width(self):
        cfg = O3NConfig(encoder="stack_of_diff")
        net = O3NNetwork(cfg)
        v = forward_branch(np.zeros((32, 32, 15), np.float32), net.params, cfg.trunk)
        assert v.shape == (128,)

    def test_default_logits_length_and_softmax(self):
        cfg = O3NConfig()
        net = O3NNetwork(cfg)
        x = np.random.default_rng(0).normal(size=(1, 6, 32, 32, 3)).astype(np.float32)
        logits = net.logits(x).data[0]
        assert logits.shape == (6,)
        assert ad.softmax(logits).sum() == pytest.approx(1.0, abs=1e-6)

    def test_weight_sharing(self):
        cfg = tiny_config()
        net = O3NNetwork(cfg)
        clip = np.random.default_rng(1).normal(size=(16, 16, 9)).astype(np.float32)
        a = forward_branch(clip, net.params, cfg.trunk).data
        b = forward_branch(np.stack([clip, clip]), net.params, cfg.trunk).data
        np.testing.assert_array_equal(b[0], a)
        np.testing.assert_array_equal(b[1], a)

    def test_zero_input_zero_bias_gives_zero(self):
        cfg = tiny_config()
        net = O3NNetwork(cfg)
        v = forward_branch(np.zeros((16, 16, 9), np.float32), net.params, cfg.trunk)
        np.testing.assert_array_equal(v.data, 0.0)

    def test_degenerate_questions_share_logits(self):
        cfg = tiny_config()
        net = O3NNetwork(cfg, rng=np.random.default_rng(2))
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 16, 16, 9)).astype(np.float32)
        la = net.logits(np.stack([a] * 4)[None]).data
        lb = net.logits(np.stack([b] * 4)[None]).data
        np.testing.assert_allclose(la, lb, atol=1e-6)
        bias = np.maximum(net.params["head.fc1.bias"].data, 0) @ net.params["head.fc2.weight"].data
        np.testing.assert_allclose(la[0], bias + net.params["head.fc2.bias"].data, atol=1e-6)

    def test_wrong_branch_count(self):
        net = O3NNetwork(tiny_config())
        with pytest.raises(ShapeError):
            net.logits(np.zeros((1, 3, 16, 16, 9), np.float32))

    def test_wrong_channels(self):
        net = O3NNetwork(tiny_config())
        with pytest.raises(ShapeError):
            net.logits(np.zeros((1, 4, 16, 16, 3), np.float32))

    def test_encoder_channel_mismatch_rejected(self):
        cfg = tiny_config()
        cfg.trunk.c_in = 3
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_concat_head_width(self):
        net = O3NNetwork(tiny_config(fusion="concat"))
        assert net.params["head.fc1.weight"].shape == (4 * 16, 12)
        assert net.fused(np.zeros((2, 4, 16, 16, 9), np.float32)).shape == (2, 64)

    def test_checkpoint_round_trip(self):
        cfg = tiny_config(fusion="concat")
        net = O3NNetwork(cfg, rng=np.random.default_rng(4))
        back = network_from_checkpoint(net.checkpoint())
        x = np.random.default_rng(5).normal(size=(2, 4, 16, 16, 9)).astype(np.float32)
        np.testing.assert_array_equal(back.logits(x).data, net.logits(x).data)
        assert back.cfg.fusion == "concat" and back.cfg.N == 3


def toy_videos(count=6, n=12, size=16, seed=0):
    cfg = SynthConfig(num_videos_per_class=1, num_classes=count, h=size, w=size, frames_per_video=n,
                      sprite_size=4, seed=seed)
    return synth_corpus(cfg).videos


class TestQuestions:
    def test_o3n_forward_single_question(self):
        cfg = tiny_config()
        net = O3NNetwork(cfg)
        q = make_questions(toy_videos(2)[:1], cfg, np.random.default_rng(0), 1)[0]
        assert o3n_forward(q, net).shape == (4,)

    def test_batch_arrays_layout(self):
        cfg = tiny_config()
        qs = make_questions(toy_videos(2), cfg, np.random.default_rng(0), 3)
        x, a = batch_arrays(qs, cfg.encoder)
        assert x.shape == (6, 4, 16, 16, 9) and a.min() >= 1 and a.max() <= 4
        np.testing.assert_allclose(x[0, 0], encode_array(qs[0].elements[0].frames, cfg.encoder), atol=1e-6)

    def test_augmentation_shares_transform_within_question(self):
        frames = np.random.default_rng(1).random((6, 16, 16, 3)).astype(np.float32)
        clips = [Clip(list(range(1, 7)), frames, False), Clip(list(range(1, 7)), frames, False)]
        q = Question(clips, 1, "random")
        x, _ = batch_arrays([q] * 16, "sum_of_diff", np.random.default_rng(2))
        for item in x:
            np.testing.assert_array_equal(item[0], item[1])

    def test_dihedral_group(self):
        x = np.arange(2 * 3 * 3 * 1).reshape(2, 3, 3, 1)
        outs = {dihedral(x, c).tobytes() for c in range(8)}
        assert len(outs) == 8
        np.testing.assert_array_equal(dihedral(x, 0), x)

    def test_holdout_split(self):
        train, val = split_holdout(20, 0.1, np.random.default_rng(0))
        assert len(val) == 2 and sorted(train + val) == list(range(20))


class TestPosition:
    def test_profile(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]])
        odd, even = position_profile(probs, np.array([1, 2]))
        assert odd == pytest.approx(0.65)
        assert even == pytest.approx(max(0.1, 0.2, (0.1 + 0.3) / 2))


class TestPretrain:
    def test_runs_and_logs(self):
        cfg = tiny_config(val_fraction=0.34, questions_per_video=2)
        ckpt, rows = pretrain(toy_videos(6), cfg)
        assert [r[:2] for r in rows] == [(e, p) for e in range(3) for p in ("train", "val")]
        assert rows[0][4] == pytest.approx(0.01) and rows[-1][4] == pytest.approx(1e-4)
        assert ckpt.metadata["kind"] == "o3n" and "trunk.conv1.weight" in ckpt.tensors
        text = metrics_csv(rows)
        assert text.splitlines()[0] == "epoch,phase,loss,accuracy,lr" and len(text.splitlines()) == 7

    def test_deterministic(self):
        cfg = tiny_config(val_fraction=0.34)
        a = metrics_csv(pretrain(toy_videos(6), cfg)[1])
        b = metrics_csv(pretrain(toy_videos(6), cfg)[1])
        assert a == b

    def test_short_video(self):
        short = Video(np.zeros((3, 16, 16, 3), np.uint8))
        with pytest.raises(VideoTooShort):
            pretrain([short], tiny_config())

    def test_frame_size_mismatch(self):
        with pytest.raises(ConfigError):
            pretrain(toy_videos(2, size=20), tiny_config())
