import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import numkit, refmodel
from fedsim.errors import ConfigError, DimensionError, InputError, StateError
from helpers import finite_difference_check, perturb_hot, random_batch


def small_config(**overrides):
    base = dict(vocab_size=20, embed_dim=4, n_blocks=2, hidden_dim=5,
                n_classes=3, max_len=6, seed=0)
    base.update(overrides)
    return refmodel.ModelConfig(**base)


class TestConfigAndCounts:
    def test_validation(self):
        with pytest.raises(ConfigError):
            small_config(vocab_size=1)
        with pytest.raises(ConfigError):
            small_config(n_blocks=0)
        with pytest.raises(ConfigError):
            small_config(n_classes=1)

    def test_param_count_reference_shape(self):
        # vocab 100, embed 16, 2 blocks of hidden 32, 2 classes:
        # 1600 + 2*(512+32+512+16) + 32+2 = 3778
        cfg = refmodel.ModelConfig(vocab_size=100, embed_dim=16, n_blocks=2,
                                   hidden_dim=32, n_classes=2)
        assert refmodel.param_count(cfg) == 3778

    def test_param_count_matches_init(self):
        cfg = small_config()
        assert refmodel.init(cfg).n_params == refmodel.param_count(cfg)


class TestInit:
    def test_deterministic(self):
        a, b = refmodel.init(small_config()), refmodel.init(small_config())
        for n in a.names:
            np.testing.assert_array_equal(a.tensors[n], b.tensors[n])

    def test_seed_changes_weights(self):
        a = refmodel.init(small_config(seed=0))
        b = refmodel.init(small_config(seed=1))
        assert not np.array_equal(a.tensors["embedding"], b.tensors["embedding"])

    def test_biases_zero_and_bounds(self):
        cfg = small_config()
        p = refmodel.init(cfg)
        for l in range(cfg.n_blocks):
            assert not p.tensors[f"blocks.{l}.b1"].any()
            assert not p.tensors[f"blocks.{l}.b2"].any()
        assert not p.tensors["head.b"].any()
        assert np.abs(p.tensors["embedding"]).max() <= 1 / np.sqrt(cfg.embed_dim)
        assert np.abs(p.tensors["blocks.0.W1"]).max() <= 1 / np.sqrt(cfg.embed_dim)
        assert np.abs(p.tensors["blocks.0.W2"]).max() <= 1 / np.sqrt(cfg.hidden_dim)

    def test_canonical_segment_order(self):
        p = refmodel.init(small_config(n_blocks=2))
        assert p.names == [
            "embedding",
            "blocks.0.W1", "blocks.0.b1", "blocks.0.W2", "blocks.0.b2",
            "blocks.1.W1", "blocks.1.b1", "blocks.1.W2", "blocks.1.b2",
            "head.W", "head.b",
        ]


class TestParamSet:
    def test_flatten_round_trip(self):
        p = refmodel.init(small_config())
        q = numkit.unflatten(p.flatten(), p)
        for n in p.names:
            np.testing.assert_array_equal(p.tensors[n], q.tensors[n])

    def test_hot_vector_round_trip(self):
        p = refmodel.init(small_config())
        v = p.hot_vector()
        p.set_hot_vector(v * 2.0)
        np.testing.assert_allclose(p.hot_vector(), v * 2.0)

    def test_set_hot_vector_length_check(self):
        p = refmodel.init(small_config())
        with pytest.raises(DimensionError):
            p.set_hot_vector(np.zeros(3))

    def test_clone_is_deep(self):
        p = refmodel.init(small_config())
        q = p.clone()
        q.tensors["head.b"][0] = 99.0
        assert p.tensors["head.b"][0] == 0.0

    def test_replace_segments_shape_check(self):
        p = refmodel.init(small_config())
        arrays = p.segment_arrays()
        arrays[0] = np.zeros((2, 2))
        with pytest.raises(DimensionError):
            p.replace_segments(arrays)


class TestBatch:
    def test_make_batch_pads(self):
        b = refmodel.make_batch([[2, 3], [4]], [0, 1], max_len=4)
        assert b.token_ids.tolist() == [[2, 3, 0, 0], [4, 0, 0, 0]]
        assert b.labels.tolist() == [0, 1]

    def test_make_batch_too_long(self):
        with pytest.raises(InputError):
            refmodel.make_batch([[2, 3, 4]], [0], max_len=2)

    def test_empty_batch_rejected(self):
        p = refmodel.init(small_config())
        with pytest.raises(InputError):
            refmodel.forward(p, refmodel.Batch(np.zeros((0, 4), dtype=np.int64)))

    def test_out_of_range_ids_rejected(self):
        p = refmodel.init(small_config())
        with pytest.raises(InputError):
            refmodel.forward(p, refmodel.Batch(np.array([[999]])))

    def test_all_pad_row_rejected(self):
        p = refmodel.init(small_config())
        with pytest.raises(InputError):
            refmodel.forward(p, refmodel.Batch(np.zeros((1, 4), dtype=np.int64)))


class TestForward:
    def test_shapes(self):
        cfg = small_config()
        p = refmodel.init(cfg)
        batch = random_batch(cfg, 7, np.random.default_rng(0))
        logits, rep = refmodel.forward(p, batch)
        assert logits.shape == (7, cfg.n_classes)
        assert rep.shape == (7, cfg.embed_dim)

    def test_pooling_hand_oracle(self):
        """With all block weights zeroed, rep is exactly the masked mean."""
        cfg = small_config()
        p = refmodel.init(cfg)
        for l in range(cfg.n_blocks):
            for w in ("W1", "b1", "W2", "b2"):
                p.tensors[f"blocks.{l}.{w}"][:] = 0.0
        ids = np.array([[2, 5, 0, 0, 0, 0]])
        _, rep = refmodel.forward(p, refmodel.Batch(ids))
        expected = (p.tensors["embedding"][2] + p.tensors["embedding"][5]) / 2
        np.testing.assert_allclose(rep[0], expected, atol=1e-15)

    def test_pad_does_not_change_output(self):
        cfg = small_config()
        p = refmodel.init(cfg)
        a = refmodel.Batch(np.array([[2, 3, 4, 0, 0, 0]]))
        b = refmodel.Batch(np.array([[2, 3, 4, 0]]))
        la, _ = refmodel.forward(p, a)
        lb, _ = refmodel.forward(p, b)
        np.testing.assert_allclose(la, lb, atol=1e-15)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, seed):
        """Mean pooling makes the forward pass order-free within a row."""
        cfg = small_config()
        p = refmodel.init(cfg)
        rng = np.random.default_rng(seed)
        n_tok = int(rng.integers(2, cfg.max_len + 1))
        row = rng.integers(2, cfg.vocab_size, size=n_tok)
        ids = np.zeros((2, cfg.max_len), dtype=np.int64)
        ids[0, :n_tok] = row
        ids[1, :n_tok] = rng.permutation(row)
        logits, _ = refmodel.forward(p, refmodel.Batch(ids))
        np.testing.assert_allclose(logits[0], logits[1], atol=1e-12)

    def test_hand_computed_two_dim_instance(self):
        """Every weight hand-set; logits checked against pencil arithmetic."""
        cfg = refmodel.ModelConfig(vocab_size=4, embed_dim=2, n_blocks=1,
                                   hidden_dim=2, n_classes=2, max_len=2)
        p = refmodel.init(cfg)
        p.tensors["embedding"][:] = 0.0
        p.tensors["embedding"][2] = [1.0, 2.0]
        p.tensors["blocks.0.W1"][:] = [[1.0, 0.0], [0.0, -1.0]]
        p.tensors["blocks.0.b1"][:] = [0.5, 0.5]
        p.tensors["blocks.0.W2"][:] = [[1.0, 1.0], [2.0, 0.0]]
        p.tensors["blocks.0.b2"][:] = [0.1, -0.1]
        p.tensors["head.W"][:] = [[1.0, 0.0], [0.0, 1.0]]
        p.tensors["head.b"][:] = [0.05, -0.05]
        # x = [1,2]; h = [1.5,-1.5]; relu = [1.5,0]; W2@relu = [1.5,3.0]
        # x_out = [1,2] + [1.6,2.9] = [2.6,4.9]; logits = x_out + head.b
        logits, rep = refmodel.forward(p, refmodel.Batch(np.array([[2, 0]])))
        np.testing.assert_allclose(rep[0], [2.6, 4.9], atol=1e-15)
        np.testing.assert_allclose(logits[0], [2.65, 4.85], atol=1e-15)

    def test_predict_tie_breaks_low(self):
        cfg = small_config()
        p = refmodel.init(cfg)
        p.tensors["head.W"][:] = 0.0
        p.tensors["head.b"][:] = 0.0
        batch = random_batch(cfg, 4, np.random.default_rng(1))
        assert refmodel.predict(p, batch).tolist() == [0, 0, 0, 0]


class TestLoss:
    def test_uniform_logits_loss_is_log_nclasses(self):
        cfg = small_config(n_classes=2)
        p = refmodel.init(cfg)
        p.tensors["head.W"][:] = 0.0
        p.tensors["head.b"][:] = 0.0
        batch = random_batch(cfg, 5, np.random.default_rng(2))
        loss, _ = refmodel.loss_and_grad(p, batch)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_label_validation(self):
        cfg = small_config()
        p = refmodel.init(cfg)
        batch = random_batch(cfg, 3, np.random.default_rng(0))
        with pytest.raises(InputError):
            refmodel.loss_and_grad(p, refmodel.Batch(batch.token_ids))
        bad = refmodel.Batch(batch.token_ids, np.array([0, 1, 99]))
        with pytest.raises(InputError):
            refmodel.loss_and_grad(p, bad)

    def test_deterministic(self):
        cfg = small_config()
        p = refmodel.init(cfg)
        batch = random_batch(cfg, 4, np.random.default_rng(3))
        l1, g1 = refmodel.loss_and_grad(p, batch)
        l2, g2 = refmodel.loss_and_grad(p, batch)
        assert l1 == l2
        for n in g1:
            np.testing.assert_array_equal(g1[n], g2[n])


class TestGradients:
    """Central finite differences are the ground truth for every coordinate."""

    def test_full_backbone_all_coordinates(self):
        cfg = small_config()
        p = refmodel.init(cfg)
        rng = np.random.default_rng(10)
        perturb_hot(p, rng)
        batch = random_batch(cfg, 4, rng)
        worst = finite_difference_check(p, batch)
        assert worst < 1e-4

    def test_single_block_single_sample(self):
        cfg = small_config(n_blocks=1, n_classes=2)
        p = refmodel.init(cfg)
        rng = np.random.default_rng(11)
        perturb_hot(p, rng)
        batch = random_batch(cfg, 1, rng)
        finite_difference_check(p, batch)

    def test_repeated_token_accumulates_embedding_grad(self):
        """A token appearing twice in a row gets both pooled contributions."""
        cfg = small_config(n_blocks=1)
        p = refmodel.init(cfg)
        rng = np.random.default_rng(12)
        perturb_hot(p, rng)
        ids = np.array([[7, 7, 7, 3, 0, 0]])
        batch = refmodel.Batch(ids, np.array([1]))
        finite_difference_check(p, batch)

    def test_param_hook_gradient(self):
        class Quad:
            kind = "param"

            def __init__(self, center):
                self.center = center

            def param_term(self, hot):
                diff = hot - self.center
                return 0.5 * float(diff @ diff), diff

        cfg = small_config(n_blocks=1)
        p = refmodel.init(cfg)
        rng = np.random.default_rng(13)
        perturb_hot(p, rng)
        hook = Quad(rng.normal(size=p.hot_size))
        batch = random_batch(cfg, 3, rng)
        finite_difference_check(p, batch, hooks=(hook,))

    def test_repr_hook_gradient(self):
        class RepPull:
            kind = "repr"

            def __init__(self, target):
                self.target = target

            def repr_term(self, batch, rep):
                diff = rep - self.target
                return 0.5 * float((diff * diff).sum()), diff

        cfg = small_config(n_blocks=1)
        p = refmodel.init(cfg)
        rng = np.random.default_rng(14)
        perturb_hot(p, rng)
        hook = RepPull(rng.normal(size=(3, cfg.embed_dim)))
        batch = random_batch(cfg, 3, rng)
        finite_difference_check(p, batch, hooks=(hook,))

    def test_hook_losses_add_up(self):
        class Const:
            kind = "param"

            def param_term(self, hot):
                return 2.5, np.zeros_like(hot)

        cfg = small_config()
        p = refmodel.init(cfg)
        batch = random_batch(cfg, 3, np.random.default_rng(15))
        plain, _ = refmodel.loss_and_grad(p, batch)
        hooked, _ = refmodel.loss_and_grad(p, batch, hooks=(Const(),))
        assert hooked == pytest.approx(plain + 2.5, abs=1e-12)


def test_separable_set_reaches_full_accuracy():
    """200 full-batch steps drive a hand-built separable set to 100%."""
    cfg = refmodel.ModelConfig(vocab_size=8, embed_dim=4, n_blocks=1,
                               hidden_dim=6, n_classes=2, max_len=2, seed=5)
    p = refmodel.init(cfg)
    rows, labels = [], []
    for i in range(10):
        rows.append([2, 4 + i % 4])   # token 2 marks class 0
        labels.append(0)
        rows.append([3, 4 + i % 4])   # token 3 marks class 1
        labels.append(1)
    batch = refmodel.make_batch(rows, labels, max_len=2)
    for _ in range(200):
        _, grads = refmodel.loss_and_grad(p, batch)
        vec = p.hot_vector() - 0.5 * refmodel.hot_grad_vector(p, grads)
        p.set_hot_vector(vec)
    assert (refmodel.predict(p, batch) == batch.labels).all()


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        p = refmodel.init(small_config())
        path = tmp_path / "params.bin"
        refmodel.save_params(p, path)
        q = refmodel.load_params(path, p)
        for n in p.names:
            np.testing.assert_array_equal(p.tensors[n], q.tensors[n])

    def test_header_layout(self, tmp_path):
        p = refmodel.init(small_config())
        path = tmp_path / "params.bin"
        refmodel.save_params(p, path)
        raw = path.read_bytes()
        assert raw[:4] == b"FSIM"
        assert len(raw) == 16 + 8 * p.n_params

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(StateError):
            refmodel.load_params(path, refmodel.init(small_config()))

    def test_truncated(self, tmp_path):
        p = refmodel.init(small_config())
        path = tmp_path / "params.bin"
        refmodel.save_params(p, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(StateError):
            refmodel.load_params(path, p)

    def test_deterministic_bytes(self, tmp_path):
        p = refmodel.init(small_config())
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        refmodel.save_params(p, a)
        refmodel.save_params(p, b)
        assert a.read_bytes() == b.read_bytes()
