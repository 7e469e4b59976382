import numpy as np
import pytest

from doclearn import container
from doclearn import model as M
from doclearn.losses import cross_entropy, softmax
from doclearn.tensor import ShapeError, Tensor, backward, finite_difference_grad, no_grad, relative_error


@pytest.fixture
def desk():
    return M.build(M.desk_backbone(8), (1, 28, 28), seed=3)


def small_model(seed=0):
    return M.build(M.desk_backbone(3, feature_dim=6, hidden=10), (1, 8, 8), seed=seed)


class TestBuild:
    def test_same_seed_same_parameters(self):
        a, b = M.build(M.desk_backbone(5), seed=11), M.build(M.desk_backbone(5), seed=11)
        for key, arr in a.state().items():
            assert arr.tobytes() == b.state()[key].tobytes()
        assert a.hash() == b.hash()

    def test_different_seed_differs(self):
        assert M.build(M.desk_backbone(5), seed=1).hash() != M.build(M.desk_backbone(5), seed=2).hash()

    def test_desk_backbone_shapes(self, desk):
        x = np.random.default_rng(0).random((3, 1, 28, 28))
        feats, logits = desk.forward(x)
        assert feats.shape == (3, 64)
        assert logits.shape == (3, 8)
        assert desk.num_classes == 8 and desk.feature_dim == 64
        assert M.infer_shapes(desk.layers, (1, 28, 28))[-1] == (8,)

    def test_last_four_parameter_layers_trainable(self, desk):
        assert desk.trainable == ("conv2", "fc1", "fc2", "fc3")
        assert desk.frozen == ("conv1",)
        assert all(t.requires_grad for t in desk.trainable_tensors())
        assert not desk.params["conv1"][0].requires_grad

    def test_fc_without_flatten_is_a_chain_error(self):
        with pytest.raises(M.ChainError):
            M.build([M.conv(4), M.fc(3)], (1, 8, 8))

    def test_conv_after_flatten_is_a_chain_error(self):
        with pytest.raises(M.ChainError):
            M.build([M.conv(4), M.LayerSpec("flatten"), M.conv(2), M.fc(3)], (1, 8, 8))

    def test_kernel_larger_than_input(self):
        with pytest.raises(M.ChainError):
            M.build([M.conv(4, kernel=5, padding=0), M.LayerSpec("flatten"), M.fc(2)], (1, 3, 3))

    def test_unknown_layer_kind(self):
        with pytest.raises(ValueError):
            M.LayerSpec("dropout")

    def test_wrong_input_shape(self, desk):
        with pytest.raises(ShapeError):
            desk.forward(np.zeros((1, 1, 20, 20)))

    def test_init_bounds(self, desk):
        w = desk.params["fc1"][0].data
        assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[1])
        assert not desk.params["fc1"][1].data.any()


class TestForward:
    def test_features_deterministic(self, desk):
        x = np.random.default_rng(1).random((4, 1, 28, 28))
        assert M.forward_features(desk, x).tobytes() == M.forward_features(desk, x).tobytes()

    def test_zero_weights_give_bias_image(self):
        m = small_model()
        for name, (w, b) in m.params.items():
            w.data = np.zeros_like(w.data)
            b.data = np.linspace(-1, 1, b.data.size)
        x = np.random.default_rng(2).random((5, 1, 8, 8))
        feats = M.forward_features(m, x)
        expected = np.maximum(m.params["fc2"][1].data, 0)
        np.testing.assert_array_equal(feats, np.tile(expected, (5, 1)))
        np.testing.assert_array_equal(M.forward_logits(m, x), np.tile(m.params["fc3"][1].data, (5, 1)))

    def test_softmax_of_logits(self, desk):
        p = softmax(M.forward_logits(desk, np.random.default_rng(3).random((6, 1, 28, 28))))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_prefix_then_suffix_matches_full_pass(self, desk):
        x = np.random.default_rng(4).random((3, 1, 28, 28))
        feats, logits = desk.forward(x)
        f2, l2 = desk.forward(desk.prefix(x), desk.trainable_start)
        assert feats.data.tobytes() == f2.data.tobytes()
        assert logits.data.tobytes() == l2.data.tobytes()

    def test_cross_entropy_gradient_through_model(self):
        m = small_model(5)
        rng = np.random.default_rng(5)
        x, y = rng.random((4, 1, 8, 8)), np.array([0, 1, 2, 1])
        m.zero_grad()
        backward(cross_entropy(m.logits(x), y))
        for t in m.trainable_tensors():
            analytic, saved = t.grad, t.data

            def f(p, t=t):
                t.data = p.data
                with no_grad():
                    return cross_entropy(m.logits(x), y)

            fd = finite_difference_grad(f, Tensor(saved))
            t.data = saved
            assert relative_error(analytic, fd) < 1e-6

    def test_frozen_layer_gets_no_gradient(self):
        m = small_model()
        backward(cross_entropy(m.logits(np.ones((2, 1, 8, 8))), [0, 1]))
        assert m.params["conv1"][0].grad is None


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, desk, tmp_path):
        desk.metadata = {"iterations": 7, "lam": 0.1}
        M.save(desk, tmp_path / "a.bin")
        loaded = M.load(tmp_path / "a.bin")
        M.save(loaded, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert loaded.hash() == desk.hash()
        assert loaded.trainable == desk.trainable and loaded.metadata == desk.metadata

    def test_starts_with_magic_and_version(self, desk, tmp_path):
        M.save(desk, tmp_path / "a.bin")
        blob = (tmp_path / "a.bin").read_bytes()
        assert blob[:8] == M.CHECKPOINT_MAGIC
        assert int.from_bytes(blob[8:12], "little") == container.FORMAT_VERSION

    def test_truncated_file(self, desk, tmp_path):
        M.save(desk, tmp_path / "a.bin")
        blob = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(container.CorruptFileError):
            M.load(tmp_path / "t.bin")

    def test_flipped_byte(self, desk, tmp_path):
        M.save(desk, tmp_path / "a.bin")
        blob = bytearray((tmp_path / "a.bin").read_bytes())
        blob[-100] ^= 0xFF
        (tmp_path / "c.bin").write_bytes(bytes(blob))
        with pytest.raises(container.CorruptFileError):
            M.load(tmp_path / "c.bin")

    def test_mismatched_layer_spec(self, desk):
        header, arrays = M.model_to_arrays(desk)
        header["layers"][0]["out"] = 4
        with pytest.raises(ShapeError):
            M.model_from_arrays(header, arrays)

    def test_missing_array(self, desk):
        header, arrays = M.model_to_arrays(desk)
        del arrays["fc2.bias"]
        with pytest.raises(ShapeError):
            M.model_from_arrays(header, arrays)

    def test_wrong_magic(self, desk, tmp_path):
        M.save(desk, tmp_path / "a.bin")
        with pytest.raises(container.ContainerError):
            container.read(tmp_path / "a.bin", b"DOCTMPL\0")

    def test_future_version(self, desk, tmp_path):
        M.save(desk, tmp_path / "a.bin")
        blob = bytearray((tmp_path / "a.bin").read_bytes())
        blob[8:12] = (container.FORMAT_VERSION + 1).to_bytes(4, "little")
        (tmp_path / "v.bin").write_bytes(bytes(blob))
        with pytest.raises(container.VersionMismatchError):
            M.load(tmp_path / "v.bin")
