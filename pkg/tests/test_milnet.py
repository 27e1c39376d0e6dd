import math
import struct

import numpy as np
import pytest

from aminetplus import autograd as ag
from aminetplus.autograd import Tensor
from aminetplus.bagdata import Bag, BatchedBags, build_vocab, pad_batch
from aminetplus.errors import CheckpointError, ConfigError, DataError, MaskError
from aminetplus.milnet import (
    ModelConfig,
    ParameterSet,
    bag_score,
    baseline_forward,
    embed_bags,
    forward,
    gated_attention_pool,
    glorot_bound,
    init_params,
    instance_ffn,
    load_checkpoint,
    multi_head_block,
    read_checkpoint_header,
    save_checkpoint,
    scaled_dot_attention,
    self_adaptive_pool,
)


def small_config(**kw):
    base = dict(vocab_size=30, d_model=8, num_heads=2, fc_dims=(6, 4), seed=3)
    base.update(kw)
    return ModelConfig(**base)


def random_params(config, seed=0, scale=0.3):
    """Initialized params nudged off their defaults so biases and gains matter."""
    p = init_params(config, seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in p.items():
        t.data += scale * rng.normal(size=t.shape)
        if name == "embedding":
            t.data[0] = 0.0
    return p


def one(tokens, vocab_size=30):
    ids = np.asarray(tokens, dtype=np.int64)
    return BatchedBags(ids[None, :], np.ones((1, len(ids)), bool), np.zeros(1, np.int64), ("b",))


def prob(tokens, params, config):
    return forward(one(tokens), params, config).probabilities.data[0]


class TestConfig:
    def test_defaults(self):
        c = ModelConfig(vocab_size=10)
        assert (c.d_model, c.num_heads, c.fc_dims) == (512, 4, (256, 128))
        assert c.pooling_views == ("max", "mean", "sum", "lse")

    @pytest.mark.parametrize(
        "kw",
        [
            dict(d_model=512, num_heads=7),
            dict(fc_dims=()),
            dict(instance_pooling_mode="median"),
            dict(pooling_views=()),
            dict(model_kind="svm"),
            dict(num_heads=-1),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=10, **kw)

    def test_dict_round_trip(self):
        c = small_config(instance_pooling_mode="attention")
        assert ModelConfig.from_dict(c.to_dict()) == c

    def test_shapes(self):
        shapes = small_config().param_shapes()
        assert shapes["attn.output"] == (8, 8)
        assert shapes["gate.w1"] == (4, 1) and shapes["gate.w3"] == (4, 4)
        assert shapes["score.weight"] == (8, 1)
        assert shapes["pool.view_weights"] == (4, 1)
        assert "attn.0.query" not in small_config(num_heads=0).param_shapes()


class TestInit:
    def test_deterministic(self):
        a, b = init_params(small_config(), 5), init_params(small_config(), 5)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)

    def test_pad_row_zero(self):
        assert np.all(init_params(small_config())["embedding"].data[0] == 0)

    def test_glorot_bound(self):
        assert abs(glorot_bound(512, 256) - 0.0884) < 1e-4
        c = ModelConfig(vocab_size=4, d_model=512, num_heads=0, fc_dims=(256,))
        w = init_params(c, 0)["ffn.0.weight"].data
        assert np.all(np.abs(w) <= glorot_bound(512, 256))

    def test_zero_biases_unit_gain(self):
        p = init_params(small_config())
        assert np.all(p["norm.gain"].data == 1) and np.all(p["norm.bias"].data == 0)
        assert np.all(p["ffn.0.bias"].data == 0) and np.all(p["score.bias"].data == 0)

    def test_embedding_scale(self):
        c = ModelConfig(vocab_size=2000, d_model=64, num_heads=0, fc_dims=(4,))
        e = init_params(c, 0)["embedding"].data[1:]
        assert abs(e.std() - 1 / 8) < 0.005


class TestEmbed:
    def test_pad_rows_zero(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        batch = pad_batch([np.array([2]), np.array([1, 3])], [0, 1], ["a", "b"])
        x, mask = embed_bags(batch, table)
        assert mask[0].tolist() == [True, False]
        assert np.all(x.data[0, 1] == 0)
        np.testing.assert_array_equal(x.data[1], table.data[[1, 3]])

    def test_out_of_range_names_bag(self):
        batch = pad_batch([np.array([1]), np.array([9])], [0, 1], ["ok", "bad-bag"])
        with pytest.raises(DataError, match="bad-bag"):
            embed_bags(batch, Tensor(np.zeros((4, 3))))


class TestAttention:
    def test_singleton(self):
        x = np.array([[0.3, -1.0, 2.0], [9.0, 9.0, 9.0]])
        out = scaled_dot_attention(x, [True, False]).data
        np.testing.assert_allclose(out[0], x[0], atol=1e-15)
        assert np.all(out[1] == 0)

    def test_identical_rows(self):
        x = np.tile([0.5, -0.2], (3, 1))
        np.testing.assert_allclose(scaled_dot_attention(x, [True] * 3).data, x, atol=1e-15)

    def test_two_loop_oracle(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        ref = np.zeros((3, 4))
        for i in range(3):
            sims = [sum(x[i, c] * x[j, c] for c in range(4)) / 2.0 for j in range(3)]
            m = max(sims)
            e = [math.exp(s - m) for s in sims]
            for j in range(3):
                ref[i] += e[j] / sum(e) * x[j]
        np.testing.assert_allclose(scaled_dot_attention(x, [True] * 3).data, ref, atol=1e-12)

    def test_empty_bag(self):
        with pytest.raises(MaskError):
            scaled_dot_attention(np.zeros((2, 3)), [False, False])

    def test_bypass(self):
        c = small_config(num_heads=0)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 8)))
        assert multi_head_block(x, np.ones((2, 3), bool), init_params(c), c) is x

    def test_identity_projection_composition(self):
        c = ModelConfig(vocab_size=5, d_model=4, num_heads=1, fc_dims=(3,))
        p = init_params(c)
        for n in ("attn.0.query", "attn.0.key", "attn.0.value", "attn.output"):
            p[n].data[...] = np.eye(4)
        x = np.random.default_rng(2).normal(size=(3, 4))
        mask = np.ones(3, bool)
        got = multi_head_block(Tensor(x), mask, p, c).data
        ref = ag.layer_norm(ag.add(x, scaled_dot_attention(x, mask)), np.ones(4), np.zeros(4), c.layer_norm_eps).data
        np.testing.assert_allclose(got, ref, atol=1e-14)

    def test_row_permutation_equivariance(self):
        c = small_config()
        p = random_params(c)
        x = np.random.default_rng(3).normal(size=(5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        mask = np.ones(5, bool)
        a = multi_head_block(Tensor(x), mask, p, c).data
        b = multi_head_block(Tensor(x[perm]), mask, p, c).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_weights_normalized(self):
        c = small_config()
        p = random_params(c)
        batch = pad_batch([np.array([1, 2, 3]), np.array([4])], [0, 1], ["a", "b"])
        s = forward(batch, p, c).attention.data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(s[1, 1:] == 0.0)


class TestFFN:
    def test_zero_weights(self):
        c = small_config()
        p = init_params(c)
        for n in p:
            if n.startswith("ffn"):
                p[n].data[...] = 0.0
        out = instance_ffn(Tensor(np.ones((2, 8))), np.ones(2, bool), p, c).data
        assert np.all(out == 0)

    def test_masked_rows_stay_zero_with_bias(self):
        c = small_config()
        p = random_params(c)
        for n in p:
            if n.endswith("bias"):
                p[n].data[...] = 1.0
        out = instance_ffn(Tensor(np.zeros((3, 8))), np.array([True, False, False]), p, c).data
        assert np.all(out[1:] == 0) and np.any(out[0] != 0)

    def test_scalar_loop_oracle(self):
        c = ModelConfig(vocab_size=5, d_model=3, num_heads=0, fc_dims=(2,))
        p = random_params(c, 4)
        x = np.array([[0.5, -1.0, 2.0]])
        w, b = p["ffn.0.weight"].data, p["ffn.0.bias"].data
        ref = [max(0.0, sum(x[0, i] * w[i, j] for i in range(3)) + b[j]) for j in range(2)]
        np.testing.assert_allclose(instance_ffn(Tensor(x), np.ones(1, bool), p, c).data[0], ref, atol=1e-15)


class TestPooling:
    def test_hand_example(self):
        h = np.array([[1.0, 3.0], [3.0, 1.0]])
        mask = np.ones(2, bool)
        z = self_adaptive_pool(h, mask, np.array([[1.0], [0.0], [0.0], [0.0]])).data
        np.testing.assert_allclose(z, [3.0, 3.0])
        lse = self_adaptive_pool(h, mask, np.array([[0.0], [0.0], [0.0], [1.0]])).data
        np.testing.assert_allclose(lse, [math.log(math.e + math.e**3)] * 2, atol=1e-12)
        np.testing.assert_allclose(self_adaptive_pool(h, mask, np.array([[0.0], [1.0], [0.0], [0.0]])).data, [2, 2])
        np.testing.assert_allclose(self_adaptive_pool(h, mask, np.array([[0.0], [0.0], [1.0], [0.0]])).data, [4, 4])

    def test_single_instance_collapse(self):
        h = np.array([[0.7, -0.2]])
        w = np.array([[0.1], [0.2], [0.3], [0.4]])
        np.testing.assert_allclose(self_adaptive_pool(h, np.ones(1, bool), w).data, h[0], atol=1e-15)

    def test_pad_row_exact(self):
        h = np.array([[1.0, 2.0], [0.5, 0.1]])
        w = np.array([[0.4], [0.3], [0.2], [0.1]])
        a = self_adaptive_pool(h, np.ones(2, bool), w).data
        b = self_adaptive_pool(np.vstack([h, [0, 0]]), np.array([True, True, False]), w).data
        assert np.array_equal(a, b)

    def test_gated_singleton_and_symmetry(self):
        rng = np.random.default_rng(0)
        w1, w2, w3 = rng.normal(size=(3, 1)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        h = rng.normal(size=(1, 3))
        z, s = gated_attention_pool(h, np.ones(1, bool), w1, w2, w3)
        assert s.data.tolist() == [1.0]
        np.testing.assert_allclose(z.data, h[0])
        z, s = gated_attention_pool(np.vstack([h, h]), np.ones(2, bool), w1, w2, w3)
        assert s.data.tolist() == [0.5, 0.5]
        np.testing.assert_allclose(z.data, h[0], atol=1e-15)

    def test_gated_loop_oracle(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(3, 4))
        w1, w2, w3 = rng.normal(size=(4, 1)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        gates = []
        for j in range(3):
            g = 0.0
            for m in range(4):
                a = math.tanh(sum(h[j, i] * w2[i, m] for i in range(4)))
                b = 1.0 / (1.0 + math.exp(-sum(h[j, i] * w3[i, m] for i in range(4))))
                g += w1[m, 0] * a * b
            gates.append(g)
        e = [math.exp(g - max(gates)) for g in gates]
        s_ref = [v / sum(e) for v in e]
        z_ref = sum(s_ref[j] * h[j] for j in range(3))
        z, s = gated_attention_pool(h, np.ones(3, bool), w1, w2, w3)
        np.testing.assert_allclose(s.data, s_ref, atol=1e-12)
        np.testing.assert_allclose(z.data, z_ref, atol=1e-12)

    def test_gated_empty(self):
        with pytest.raises(MaskError):
            gated_attention_pool(np.zeros((2, 3)), [False, False], np.zeros((3, 1)), np.zeros((3, 3)), np.zeros((3, 3)))


class TestScore:
    def test_zero_weights(self):
        assert bag_score(np.ones(3), np.ones(3), np.zeros((6, 1)), np.zeros(1)).item() == 0.5

    def test_symmetric_zero_logit(self):
        w = np.array([[1.0], [2.0], [-1.0], [-2.0]])
        assert bag_score([0.3, 0.4], [0.3, 0.4], w, np.zeros(1)).item() == 0.5

    def test_scalar_oracle(self):
        rng = np.random.default_rng(2)
        za, zp, w, b = rng.normal(size=3), rng.normal(size=3), rng.normal(size=(6, 1)), rng.normal(size=1)
        logit = sum(v * w[i, 0] for i, v in enumerate(list(za) + list(zp))) + b[0]
        assert abs(bag_score(za, zp, w, b).item() - 1 / (1 + math.exp(-logit))) < 1e-14

    def test_clamped(self):
        assert bag_score([100.0], [0.0], np.array([[10.0], [0.0]]), np.zeros(1)).item() == 1 - 1e-7


class TestForward:
    @pytest.mark.parametrize("heads,mode", [(2, "self_adaptive"), (0, "self_adaptive"), (2, "attention"), (2, "max")])
    def test_permutation_invariance(self, heads, mode):
        c = small_config(num_heads=heads, instance_pooling_mode=mode)
        p = random_params(c)
        rng = np.random.default_rng(4)
        for _ in range(25):
            toks = rng.integers(1, 30, size=int(rng.integers(1, 12)))
            perm = rng.permutation(len(toks))
            assert abs(prob(toks, p, c) - prob(toks[perm], p, c)) <= 1e-9

    def test_pad_inertness(self):
        c = small_config()
        p = random_params(c)
        toks = np.array([3, 7, 7, 12])
        ref = prob(toks, p, c)
        for k in range(1, 17):
            padded = np.concatenate([toks, np.zeros(k, np.int64)])
            mask = np.r_[np.ones(4, bool), np.zeros(k, bool)]
            batch = BatchedBags(padded[None], mask[None], np.zeros(1, np.int64), ("b",))
            assert abs(forward(batch, p, c).probabilities.data[0] - ref) <= 1e-9

    def test_batch_independence(self):
        c = small_config()
        p = random_params(c)
        rng = np.random.default_rng(5)
        bags = [rng.integers(1, 30, size=n) for n in (3, 5, 1, 4, 2, 5, 17, 8)]
        alone = [prob(b, p, c) for b in bags]
        batched = forward(pad_batch(bags, [0] * 8, [str(i) for i in range(8)]), p, c).probabilities.data
        np.testing.assert_allclose(batched, alone, atol=1e-9, rtol=0)

    def test_zero_heads_is_identity_pipeline(self):
        c = small_config(num_heads=0)
        p = random_params(c)
        batch = pad_batch([np.array([1, 2, 3]), np.array([4])], [0, 1], ["a", "b"])
        x, mask = embed_bags(batch, p["embedding"])
        h = instance_ffn(x, mask, p, c)
        z_pool = self_adaptive_pool(h, mask, p["pool.view_weights"], c.pooling_views)
        z_att, _ = gated_attention_pool(h, mask, p["gate.w1"], p["gate.w2"], p["gate.w3"])
        ref = bag_score(z_att, z_pool, p["score.weight"], p["score.bias"]).data
        assert np.array_equal(forward(batch, p, c).probabilities.data, ref)

    def test_empty_bag_in_batch(self):
        c = small_config()
        batch = BatchedBags(np.zeros((1, 3), np.int64), np.zeros((1, 3), bool), np.zeros(1, np.int64), ("hollow",))
        with pytest.raises(DataError, match="hollow"):
            forward(batch, init_params(c), c)


class TestBaselines:
    def test_mi_net_single_instance(self):
        c = small_config(model_kind="mi_net", num_heads=0)
        p = random_params(c)
        x, mask = embed_bags(one([5]), p["embedding"])
        h = instance_ffn(x, mask, p, c).data[0, 0]
        logit = h @ p["score.weight"].data[:, 0] + p["score.bias"].data[0]
        assert abs(prob([5], p, c) - 1 / (1 + math.exp(-logit))) < 1e-14

    @pytest.mark.parametrize("kind", ["mi_net", "big_mi_net", "att_net", "gated_att_net"])
    def test_permutation_invariance(self, kind):
        c = small_config(model_kind=kind)
        p = random_params(c)
        toks = np.array([1, 5, 9, 2, 2, 14])
        assert abs(prob(toks, p, c) - prob(toks[::-1], p, c)) <= 1e-9

    def test_att_equals_gated_with_constant_gate(self):
        ca = small_config(model_kind="att_net")
        cg = small_config(model_kind="gated_att_net")
        pa = random_params(ca)
        pg = ParameterSet({n: (pa[n].data.copy() if n in pa else None) for n in cg.param_shapes()} | {
            "gate.w3": np.zeros(cg.param_shapes()["gate.w3"])
        })
        pg["gate.w1"].data[...] = 2.0 * pa["gate.w1"].data  # sigmoid(0) = 0.5 halves the gate
        toks = np.array([3, 8, 8, 21, 4])
        assert abs(prob(toks, pa, ca) - prob(toks, pg, cg)) <= 1e-6

    def test_unknown_kind(self):
        c = small_config()
        with pytest.raises(ConfigError):
            baseline_forward("svm", one([1]), init_params(c), c)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        c = small_config()
        p = random_params(c)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, c, path, tuple(f"t{i}" for i in range(29)))
        ck = load_checkpoint(path)
        assert ck.config == c and ck.vocabulary[0] == "t0"
        for n in p:
            assert np.array_equal(ck.params[n].data, p[n].data)
        toks = np.array([1, 4, 9])
        assert prob(toks, ck.params, c) == prob(toks, p, c)

    def test_magic_and_layout(self, tmp_path):
        c = small_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(c), c, path)
        blob = path.read_bytes()
        assert blob.startswith(b"milnet-ckpt-v1\n")
        (n,) = struct.unpack("<Q", blob[15:23])
        header, payload = read_checkpoint_header(blob)
        assert len(payload) == header["payload_bytes"] == 8 * sum(int(np.prod(s)) for s in c.param_shapes().values())
        assert 23 + n + len(payload) == len(blob)

    @pytest.mark.parametrize("cut", [5, 20, 100, -8])
    def test_truncated(self, tmp_path, cut):
        c = small_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(c), c, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_edited_vocab_size_names_embedding(self, tmp_path):
        c = small_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(c), c, path)
        blob = path.read_bytes()
        edited = blob.replace(b'"vocab_size": 30', b'"vocab_size": 31')
        assert edited != blob
        # keep the header length field consistent with the edit
        path.write_bytes(edited)
        with pytest.raises(CheckpointError, match="embedding"):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"milnet-ckpt-v9\n" + b"\0" * 16)
        with pytest.raises(CheckpointError, match="milnet-ckpt-v9"):
            load_checkpoint(path)

    def test_corrupted_payload(self, tmp_path):
        c = small_config()
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(c), c, path)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_no_temp_files_left(self, tmp_path):
        c = small_config()
        save_checkpoint(init_params(c), c, tmp_path / "m.ckpt")
        assert [f.name for f in tmp_path.iterdir()] == ["m.ckpt"]


def test_full_model_gradcheck():
    from aminetplus.cli import model_gradcheck

    report = model_gradcheck()
    assert report.passed, report.lines()
    assert sorted(report.errors) == sorted(ModelConfig(vocab_size=8, d_model=8, num_heads=2, fc_dims=(6, 4)).param_shapes())


@pytest.mark.parametrize("kind", ["mi_net", "big_mi_net", "att_net", "gated_att_net"])
def test_baseline_gradcheck(kind):
    from aminetplus.cli import gradcheck_config, model_gradcheck

    report = model_gradcheck(config=gradcheck_config().replace(model_kind=kind, num_heads=0))
    assert report.passed, report.lines()


@pytest.mark.parametrize("mode", ["attention", "max", "lse"])
def test_pooling_mode_gradcheck(mode):
    from aminetplus.cli import gradcheck_config, model_gradcheck

    assert model_gradcheck(config=gradcheck_config().replace(instance_pooling_mode=mode)).passed
