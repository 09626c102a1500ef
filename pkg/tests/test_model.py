import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s3d import autodiff as ad
from s3d import model as M
from s3d.autodiff import Tensor
from s3d.rng import stream


@pytest.fixture(scope="module")
def net():
    return M.init_model(M.ArchConfig(), stream(0, "init"))


def _two_class_model(w):
    arch = M.ArchConfig(embed_dim=2, num_classes=2)
    m = M.init_model(arch, stream(0, "init"))
    m.params["classifier.weight"].data = np.asarray(w, dtype=np.float64)
    return m


class TestInit:
    def test_same_seed_same_parameters(self):
        a = M.init_model(M.ArchConfig(), stream(3, "init"))
        b = M.init_model(M.ArchConfig(), stream(3, "init"))
        np.testing.assert_array_equal(a.flat_parameters(), b.flat_parameters())

    def test_shapes(self, net):
        assert net.params["classifier.weight"].shape == (64, 5)
        assert net.params["block1.weight"].shape == (16, 3, 3, 3)
        assert net.params["block2.weight"].shape == (32, 16, 3, 3)
        assert net.params["head.weight"].shape == (512, 64)

    def test_he_std(self):
        arch = M.ArchConfig(block_channels=(64, 64), in_channels=64)
        m = M.init_model(arch, stream(0, "init"))
        w = m.params["block2.weight"].data  # fan_in 64 * 9 = 576
        assert abs(w.std() - np.sqrt(2 / 576)) < 0.02 * np.sqrt(2 / 576)
        assert np.all(m.params["block1.bias"].data == 0)

    def test_bad_hook_mask(self):
        with pytest.raises(ValueError):
            M.ArchConfig(hooks=(True,))


class TestExtract:
    def test_shapes(self, net):
        h, hooked = M.extract(net, np.zeros((2, 3, 16, 16)))
        assert h.shape == (2, 64)
        assert hooked[0].shape == (2, 16, 8, 8)
        assert hooked[1].shape == (2, 32, 4, 4)

    def test_zero_input_zero_biases_gives_zero_embedding(self, net):
        h, _ = M.extract(net, np.zeros((1, 3, 16, 16)))
        np.testing.assert_array_equal(h.data, 0.0)

    def test_batch_order_preserved(self, net):
        x = np.random.default_rng(0).standard_normal((4, 3, 16, 16))
        full = M.embed(net, x)
        for i in range(4):
            np.testing.assert_allclose(M.embed(net, x[i:i + 1])[0], full[i], rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self, net):
        with pytest.raises(ValueError, match="expected inputs"):
            M.extract(net, np.zeros((1, 3, 8, 8)))

    def test_hooks_can_be_disabled(self):
        m = M.init_model(M.ArchConfig(hooks=(False, True)), stream(0, "init"))
        _, hooked = M.extract(m, np.zeros((1, 3, 16, 16)))
        assert [z.shape for z in hooked] == [(1, 32, 4, 4)]

    def test_injection_replaces_block_output(self, net):
        x = np.random.default_rng(1).standard_normal((2, 3, 16, 16))
        seen = []

        def zero_second(i, z):
            seen.append(i)
            return Tensor(np.zeros(z.shape)) if i == 1 else z

        h, _ = M.extract(net, x, inject=zero_second)
        assert seen == [0, 1]
        np.testing.assert_allclose(h.data, np.broadcast_to(net.params["head.bias"].data, (2, 64)))

    def test_extract_then_classify_equals_forward(self, net):
        x = np.random.default_rng(2).standard_normal((3, 3, 16, 16))
        h, _ = M.extract(net, x)
        assert M.classify(net, h).data.tobytes() == M.forward(net, x).data.tobytes()


class TestClassify:
    def test_hand_example(self):
        m = _two_class_model([[1.0, 0.0], [0.0, 1.0]])
        logits = M.scaled_logits(m, Tensor([[3.0, 4.0]])).data
        np.testing.assert_allclose(logits, [[12.0, 16.0]], rtol=1e-12)
        p = M.classify(m, Tensor([[3.0, 4.0]])).data
        np.testing.assert_allclose(p, [[0.01798621, 0.98201379]], atol=1e-8)

    def test_parallel_to_class_weight_gives_cosine_one(self):
        m = _two_class_model([[2.0, 0.0], [0.0, 1.0]])
        assert M.cosine_scores(m, Tensor([[5.0, 0.0]])).data[0, 0] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
    def test_positive_rescaling_invariance(self, net, c, seed):
        h = np.random.default_rng(seed).standard_normal((2, 64))
        p1 = M.classify(net, Tensor(h)).data
        p2 = M.classify(net, Tensor(h * c)).data
        np.testing.assert_allclose(p1, p2, atol=1e-9)
        m2 = net.clone()
        scales = np.random.default_rng(seed + 1).uniform(0.1, 10.0, size=5)
        m2.params["classifier.weight"].data = net.params["classifier.weight"].data * scales
        np.testing.assert_allclose(M.classify(m2, Tensor(h)).data, p1, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), scale=st.floats(1e-3, 1e3))
    def test_cosines_bounded(self, net, seed, scale):
        h = np.random.default_rng(seed).standard_normal((4, 64)) * scale
        cos = M.cosine_scores(net, Tensor(h)).data
        assert np.all(np.abs(cos) <= 1.0 + 1e-12)

    def test_probabilities_sum_to_one(self, net):
        x = np.random.default_rng(3).standard_normal((5, 3, 16, 16))
        np.testing.assert_allclose(M.predict(net, x).sum(axis=1), 1.0, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, net, tmp_path):
        path = M.save_checkpoint(net, tmp_path / "m.ckpt", iteration=250, seed=7, extra={"mode": "s3d"})
        back, header = M.load_checkpoint(path)
        assert back.arch == net.arch
        assert header["iteration"] == 250 and header["seed"] == 7 and header["extra"] == {"mode": "s3d"}
        assert back.flat_parameters().tobytes() == net.flat_parameters().tobytes()
        M.save_checkpoint(back, tmp_path / "n.ckpt", iteration=250, seed=7, extra={"mode": "s3d"})
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nonsense" * 4)
        with pytest.raises(ValueError, match="magic"):
            M.load_checkpoint(tmp_path / "x")

    def test_truncated_blob(self, net, tmp_path):
        path = M.save_checkpoint(net, tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="blob"):
            M.load_checkpoint(path)


def test_state_round_trip_and_clone_independence(net):
    m = net.clone()
    m.params["head.bias"].data = m.params["head.bias"].data + 1.0
    assert not np.array_equal(m.params["head.bias"].data, net.params["head.bias"].data)
    m.load_state(net.state())
    np.testing.assert_array_equal(m.flat_parameters(), net.flat_parameters())


def test_gradients_reach_every_parameter(net):
    m = net.clone()
    x = np.random.default_rng(4).standard_normal((3, 3, 16, 16))
    m.zero_grad()
    p = M.forward(m, x)
    ad.backward(-ad.mean(ad.log(ad.sum_(p * np.eye(5)[[0, 1, 2]], axis=1))))
    for name, t in m.params.items():
        assert t.grad is not None and np.any(t.grad != 0), name
