import math

import numpy as np
import pytest

from trear import tensor as T
from trear.model import (ConfigError, ModelConfig, Trear, fuse, multi_head_attention,
                         positional_encoding)
from trear.rng import RngStream
from trear.tensor import Tensor


def small_config(**kw):
    base = dict(d_model=16, k=4, heads_encoder=2, heads_mutual=2, num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


def random_frames(seed, k=4, side=16):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(k, 3, side, side)), rng.uniform(-1, 1, size=(k, 3, side, side))


def scalar_attention(q_src, kv_src, wq, wk, wv, wo, bo, heads):
    """Plain-loop evaluation of per-head scaled dot-product attention."""
    k, d = len(q_src), len(q_src[0])
    n = len(kv_src)
    dk = d // heads

    def project(rows, w):
        return [[sum(r[a] * w[a][b] for a in range(d)) for b in range(d)] for r in rows]

    q, key, v = project(q_src, wq), project(kv_src, wk), project(kv_src, wv)
    maps = []
    concat = [[0.0] * d for _ in range(k)]
    for h in range(heads):
        cols = range(h * dk, (h + 1) * dk)
        head_map = []
        for i in range(k):
            scores = [sum(q[i][c] * key[j][c] for c in cols) / math.sqrt(dk) for j in range(n)]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            z = sum(e)
            w = [x / z for x in e]
            head_map.append(w)
            for c in cols:
                concat[i][c] = sum(w[j] * v[j][c] for j in range(n))
        maps.append(head_map)
    out = [[sum(concat[i][a] * wo[a][b] for a in range(d)) + bo[b] for b in range(d)] for i in range(k)]
    return np.array(out), np.array(maps)


def attn_params(seed, d):
    rng = np.random.default_rng(seed)
    return {name: Tensor(rng.normal(scale=0.5, size=(d, d))) for name in ("wq", "wk", "wv", "wo")} | {
        "bo": Tensor(rng.normal(size=d))}


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        pe = positional_encoding(4, 10)
        assert pe[0].tolist() == [0.0, 1.0] * 5

    def test_first_entry_of_row_one(self):
        for d in (2, 8, 64):
            assert positional_encoding(2, d)[1, 0] == pytest.approx(math.sin(1.0), abs=1e-12)
        assert math.sin(1.0) == pytest.approx(0.841471, abs=1e-6)

    def test_matches_scalar_formula(self):
        d = 12
        pe = positional_encoding(7, d)
        for pos in range(7):
            for i in range(d // 2):
                arg = pos / 10000 ** (2 * i / d)
                assert pe[pos, 2 * i] == pytest.approx(math.sin(arg), abs=1e-15)
                assert pe[pos, 2 * i + 1] == pytest.approx(math.cos(arg), abs=1e-15)

    @pytest.mark.parametrize("shift", range(1, 17))
    def test_shift_is_rotation(self, shift):
        d, n = 16, 24
        pe = positional_encoding(n + shift, d)
        for i in range(d // 2):
            w = 1.0 / 10000 ** (2 * i / d)
            c, s = math.cos(shift * w), math.sin(shift * w)
            rot = np.array([[c, -s], [s, c]])  # row vector [sin, cos] times rotation
            pair = pe[:n, 2 * i:2 * i + 2]
            np.testing.assert_allclose(pair @ rot, pe[shift:shift + n, 2 * i:2 * i + 2], atol=1e-10, rtol=0)

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            positional_encoding(4, 7)


class TestEmbedFrames:
    def setup_method(self):
        self.model = Trear(small_config(), seed=0)

    def test_identical_frames_identical_rows(self):
        frame = np.random.default_rng(0).uniform(size=(1, 3, 16, 16))
        out = self.model.embed_frames("rgb", np.repeat(frame, 3, axis=0)).data
        assert out.shape == (3, 16)
        assert out[0].tobytes() == out[1].tobytes() == out[2].tobytes()

    def test_single_frame(self):
        assert self.model.embed_frames("depth", np.zeros((1, 3, 16, 16))).shape == (1, 16)

    def test_zero_frames_follow_bias_path(self):
        # nonzero biases so the response is not trivially zero
        for name, t in self.model.params.items():
            if ".backbone." in name and name.endswith(".b"):
                t.data = np.random.default_rng(len(name)).normal(size=t.shape)
        out = self.model.embed_frames("rgb", np.zeros((2, 3, 16, 16))).data
        assert out[0].tobytes() == out[1].tobytes()
        # first layer sees only zeros, so its output is relu(bias) everywhere
        b0 = self.model.p("rgb.backbone.conv0.b").data
        first = np.maximum(_conv_ref(np.zeros((1, 3, 16, 16)), self.model.p("rgb.backbone.conv0.w").data, b0), 0)
        np.testing.assert_array_equal(first[0], np.broadcast_to(np.maximum(b0, 0)[:, None, None], first[0].shape))
        x = first
        for i in (1, 2):
            x = np.maximum(_conv_ref(x, self.model.p(f"rgb.backbone.conv{i}.w").data,
                                     self.model.p(f"rgb.backbone.conv{i}.b").data), 0.0)
        np.testing.assert_allclose(out[0], x.mean(axis=(2, 3))[0], rtol=1e-12, atol=1e-14)

    def test_wrong_channels(self):
        with pytest.raises(ValueError, match="3, H, W"):
            self.model.embed_frames("rgb", np.zeros((2, 1, 16, 16)))


def _conv_ref(x, w, b, stride=2, pad=1):
    n, c, hgt, wid = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (hgt + 2 * pad - 3) // stride + 1, (wid + 2 * pad - 3) // stride + 1
    out = np.empty((n, w.shape[0], oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    return out


class TestMultiHeadAttention:
    def test_single_token(self):
        p = attn_params(0, 8)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
        out, maps = multi_head_attention(x, x, p, 4)
        assert maps.shape == (4, 1, 1)
        np.testing.assert_array_equal(maps, 1.0)
        np.testing.assert_allclose(out.data, x.data @ p["wv"].data @ p["wo"].data + p["bo"].data, rtol=1e-12)

    def test_identical_keys_give_uniform_weights(self):
        p = attn_params(2, 8)
        q = Tensor(np.random.default_rng(3).normal(size=(5, 8)))
        kv = Tensor(np.tile(np.random.default_rng(4).normal(size=(1, 8)), (5, 1)))
        _, maps = multi_head_attention(q, kv, p, 2)
        np.testing.assert_allclose(maps, 0.2, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("cross", [False, True])
    def test_matches_scalar_oracle(self, seed, cross):
        d, heads = 8, 2
        rng = np.random.default_rng(seed)
        q_src = rng.normal(size=(3, d))
        kv_src = rng.normal(size=(3, d)) if cross else q_src
        p = attn_params(seed + 10, d)
        out, maps = multi_head_attention(Tensor(q_src), Tensor(kv_src), p, heads)
        ref_out, ref_maps = scalar_attention(q_src.tolist(), kv_src.tolist(),
                                             *(p[n].data.tolist() for n in ("wq", "wk", "wv", "wo", "bo")), heads)
        np.testing.assert_allclose(maps, ref_maps, rtol=0, atol=1e-10)
        np.testing.assert_allclose(out.data, ref_out, rtol=0, atol=1e-10)

    def test_head_mismatch(self):
        x = Tensor(np.ones((2, 8)))
        with pytest.raises(ConfigError):
            multi_head_attention(x, x, attn_params(0, 8), 3)


class TestEncoder:
    def setup_method(self):
        self.model = Trear(small_config(use_positional_encoding=False, num_encoders=2), seed=1)
        self.f = Tensor(np.random.default_rng(7).normal(size=(5, 16)))

    def test_eval_is_deterministic(self):
        a, _ = self.model.encoder_forward("rgb", self.f)
        b, _ = self.model.encoder_forward("rgb", self.f)
        assert a.data.tobytes() == b.data.tobytes()

    def test_layer_norm_statistics(self):
        out, maps = self.model.encoder_forward("depth", self.f)
        assert len(maps) == 2
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariance(self, seed):
        perm = np.random.default_rng(seed).permutation(5)
        out, _ = self.model.encoder_forward("rgb", self.f)
        permuted, _ = self.model.encoder_forward("rgb", Tensor(self.f.data[perm]))
        np.testing.assert_allclose(permuted.data, out.data[perm], rtol=0, atol=1e-10)

    def test_training_mode_uses_dropout(self):
        a, _ = self.model.encoder_forward("rgb", self.f, training=True, rng=RngStream(0, "dropout"))
        b, _ = self.model.encoder_forward("rgb", self.f)
        assert not np.allclose(a.data, b.data)


class TestMutualAttention:
    def test_tied_projections_give_equal_outputs(self):
        model = Trear(small_config(), seed=2)
        for name in ("wq", "wk", "wv", "wo", "bo", "ln.gamma", "ln.beta"):
            model.params[f"mutual.depth2rgb.{name}"].data = model.params[f"mutual.rgb2depth.{name}"].data.copy()
        f = Tensor(np.random.default_rng(0).normal(size=(4, 16)))
        fr, fd, maps = model.mutual_attention(f, f)
        assert fr.data.tobytes() == fd.data.tobytes()
        np.testing.assert_array_equal(maps["rgb2depth"], maps["depth2rgb"])

    def test_single_token_maps(self):
        model = Trear(small_config(), seed=2)
        rng = np.random.default_rng(0)
        _, _, maps = model.mutual_attention(Tensor(rng.normal(size=(1, 16))), Tensor(rng.normal(size=(1, 16))))
        for m in maps.values():
            np.testing.assert_array_equal(m, 1.0)

    def test_matches_scalar_cross_attention_oracle(self):
        model = Trear(small_config(), seed=3)
        rng = np.random.default_rng(5)
        fr, fd = rng.normal(size=(3, 16)), rng.normal(size=(3, 16))
        out_r, out_d, maps = model.mutual_attention(Tensor(fr), Tensor(fd))
        for direction, q, kv, out in (("rgb2depth", fr, fd, out_r), ("depth2rgb", fd, fr, out_d)):
            pre = f"mutual.{direction}"
            ref, ref_maps = scalar_attention(q.tolist(), kv.tolist(),
                                             *(model.p(f"{pre}.{n}").data.tolist()
                                               for n in ("wq", "wk", "wv", "wo", "bo")), 2)
            np.testing.assert_allclose(maps[direction], ref_maps, atol=1e-10, rtol=0)
            x = q + ref
            ln = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
            np.testing.assert_allclose(out.data, ln, atol=1e-10, rtol=0)

    def test_shape_mismatch(self):
        model = Trear(small_config(), seed=0)
        with pytest.raises(ConfigError):
            model.mutual_attention(Tensor(np.ones((3, 16))), Tensor(np.ones((4, 16))))


class TestFuse:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.a, self.b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))

    def test_add_identity(self):
        np.testing.assert_array_equal(fuse(self.a, Tensor(np.zeros((3, 4))), "add").data, self.a.data)

    def test_multiply_identity(self):
        np.testing.assert_array_equal(fuse(self.a, Tensor(np.ones((3, 4))), "multiply").data, self.a.data)

    def test_concat_layout(self):
        out = fuse(self.a, self.b, "concat").data
        assert out.shape == (3, 8)
        np.testing.assert_array_equal(out[:, :4], self.a.data)
        np.testing.assert_array_equal(out[:, 4:], self.b.data)

    @pytest.mark.parametrize("mode", ["add", "multiply"])
    def test_commutes(self, mode):
        assert fuse(self.a, self.b, mode).data.tobytes() == fuse(self.b, self.a, mode).data.tobytes()

    def test_concat_does_not_commute(self):
        assert not np.array_equal(fuse(self.a, self.b, "concat").data, fuse(self.b, self.a, "concat").data)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError, match="fusion mode"):
            fuse(self.a, self.b, "max")


class TestClassify:
    def setup_method(self):
        self.model = Trear(small_config(), seed=0)

    def test_identical_rows(self):
        row = np.random.default_rng(0).normal(size=(1, 16))
        frame, clip = self.model.classify(Tensor(np.repeat(row, 4, axis=0)))
        np.testing.assert_allclose(clip.data, frame.data[2], rtol=1e-15)

    def test_zero_weights(self):
        self.model.params["classifier.w"].data[:] = 0.0
        self.model.params["classifier.b"].data = np.array([0.5, -1.0, 2.0])
        _, clip = self.model.classify(Tensor(np.random.default_rng(1).normal(size=(4, 16))))
        np.testing.assert_array_equal(clip.data, [0.5, -1.0, 2.0])

    def test_argmax_shift_invariant(self):
        _, clip = self.model.classify(Tensor(np.random.default_rng(2).normal(size=(4, 16))))
        assert np.argmax(clip.data) == np.argmax(clip.data + 17.0)

    def test_width_mismatch(self):
        with pytest.raises(ConfigError, match="width"):
            self.model.classify(Tensor(np.ones((4, 8))))

    def test_probability_averaging(self):
        model = Trear(small_config(clip_average="probs"), seed=0)
        fused = Tensor(np.random.default_rng(3).normal(size=(4, 16)))
        frame, clip = model.classify(fused)
        p = np.exp(frame.data - frame.data.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        np.testing.assert_allclose(clip.data, np.log(p.mean(0)), rtol=1e-12)


class TestForward:
    def test_eval_determinism(self):
        model = Trear(small_config(), seed=0)
        rgb, depth = random_frames(0)
        a = model.forward(rgb, depth).clip_logits.data
        b = model.forward(rgb, depth).clip_logits.data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("fusion", ["add", "concat", "multiply"])
    @pytest.mark.parametrize("block", ["mutual", "direct"])
    def test_permutation_invariance_without_pe(self, fusion, block):
        model = Trear(small_config(use_positional_encoding=False, fusion_mode=fusion, fusion_block=block), seed=4)
        rgb, depth = random_frames(1)
        base = model.forward(rgb, depth).clip_logits.data
        for s in range(10):
            perm = np.random.default_rng(s).permutation(4)
            out = model.forward(rgb[perm], depth[perm]).clip_logits.data
            np.testing.assert_allclose(out, base, rtol=0, atol=1e-8)

    def test_pe_breaks_symmetry(self):
        model = Trear(small_config(), seed=4)
        rgb, depth = random_frames(1)
        base = model.forward(rgb, depth).clip_logits.data
        changes = [np.abs(model.forward(rgb[p], depth[p]).clip_logits.data - base).max()
                   for p in (np.random.default_rng(s).permutation(4) for s in range(10))]
        assert max(changes) > 1e-6

    def test_stream_parameters_disjoint(self):
        model = Trear(small_config(), seed=0)
        rgb = {k: v for k, v in model.params.items() if k.startswith("rgb.")}
        depth = {k: v for k, v in model.params.items() if k.startswith("depth.")}
        assert len(rgb) == len(depth) > 0
        ids = {id(t) for t in rgb.values()} | {id(t.data) for t in rgb.values()}
        assert not ids & ({id(t) for t in depth.values()} | {id(t.data) for t in depth.values()})
        assert not any(np.shares_memory(a.data, b.data) for a in rgb.values() for b in depth.values())

    @pytest.mark.parametrize("block", ["mutual", "direct"])
    def test_every_parameter_receives_gradient(self, block):
        model = Trear(small_config(fusion_block=block), seed=5)
        rgb, depth = random_frames(2)
        res = model.forward(rgb, depth, training=True, rng=RngStream(0, "dropout"))
        T.cross_entropy(res.clip_logits, 1).backward()
        dead = [k for k, t in model.params.items() if t.grad is None or not np.any(t.grad)]
        assert dead == []

    def test_single_modality_has_no_other_stream(self):
        model = Trear(small_config(modalities="rgb"), seed=0)
        assert not any(k.startswith(("depth.", "mutual.")) for k in model.params)
        rgb, _ = random_frames(0)
        res = model.forward(rgb, None)
        assert res.clip_logits.shape == (3,)
        assert res.attention.mutual == {}

    def test_missing_stream(self):
        model = Trear(small_config(), seed=0)
        with pytest.raises(ValueError, match="depth"):
            model.forward(random_frames(0)[0], None)

    def test_training_needs_rng(self):
        model = Trear(small_config(), seed=0)
        with pytest.raises(ValueError, match="rng"):
            model.forward(*random_frames(0), training=True)

    def test_attention_maps_row_stochastic(self):
        model = Trear(small_config(num_encoders=2), seed=0)
        res = model.forward(*random_frames(3))
        names = [n for n, _ in res.attention.all_maps()]
        assert len(names) == 2 * 2 * 2 + 2 * 2
        for _, m in res.attention.all_maps():
            np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-12)


class TestModelConfig:
    @pytest.mark.parametrize("kw", [dict(d_model=15), dict(heads_encoder=3), dict(heads_mutual=0),
                                    dict(k=0), dict(dropout_rate=1.0), dict(fusion_mode="max"),
                                    dict(fusion_block="late"), dict(modalities="flow"),
                                    dict(clip_average="median"), dict(num_encoders=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw)

    def test_ffn_default_and_concat_width(self):
        c = small_config(fusion_mode="concat")
        assert c.ffn_hidden == 64
        assert c.classifier_width == 32
        assert small_config(fusion_mode="concat", modalities="rgb").classifier_width == 16

    def test_model_needs_classes(self):
        with pytest.raises(ConfigError, match="num_classes"):
            Trear(small_config(num_classes=0))

    def test_load_state_dict_checks(self):
        model = Trear(small_config(), seed=0)
        state = model.state_dict()
        state.pop("classifier.b")
        with pytest.raises(ConfigError, match="classifier.b"):
            model.load_state_dict(state)
        state = model.state_dict()
        state["classifier.b"] = np.zeros(5)
        with pytest.raises(ConfigError, match="shape"):
            model.load_state_dict(state)
