import numpy as np
import pytest

from molbuild.errors import ConfigError, ShapeMismatch
from molbuild.nn import autodiff as ad
from molbuild.nn.autodiff import Tensor
from molbuild.nn.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from molbuild.nn.layers import MLP, Adam, Linear, clip_grad_norm, global_norm, orthogonal

from gradcheck import gradcheck_params


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (4, 4)])
def test_orthogonal(shape):
    w = orthogonal(shape, np.random.default_rng(0))
    small = min(shape)
    gram = w.T @ w if shape[0] >= shape[1] else w @ w.T
    np.testing.assert_allclose(gram, np.eye(small), atol=1e-12)


def test_mlp_shapes_and_tanh():
    rng = np.random.default_rng(0)
    mlp = MLP((6, 8, 2), rng, output="tanh")
    out = mlp(Tensor(10 * rng.standard_normal((4, 6))))
    assert out.shape == (4, 2) and np.all(np.abs(out.data) <= 1)
    assert [n for n, _ in mlp.named_parameters()] == [
        "layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]
    with pytest.raises(ShapeMismatch):
        mlp(Tensor(np.ones((1, 5))))


def test_mlp_gradients():
    rng = np.random.default_rng(1)
    mlp = MLP((5, 7, 7, 3), rng, output="tanh")
    x = Tensor(rng.standard_normal((6, 5)))
    w = rng.standard_normal((6, 3))
    assert gradcheck_params(lambda: ad.tsum(mlp(x) * w), mlp.parameters(), coords=60) <= 1e-5


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-4)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(2000):
        p.grad = 2 * p.data
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 0.5) == 5.0
    assert abs(global_norm([a, b]) - 0.5) < 1e-9
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(0.5)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        a, b = MLP((3, 4, 2), rng), MLP((3, 4, 2), rng)
        path = tmp_path / "p.npz"
        save_checkpoint(a, path, {"step": 7})
        assert load_checkpoint(b, path) == {"step": 7}
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_shape_mismatch(self, tmp_path):
        rng = np.random.default_rng(0)
        path = tmp_path / "p.npz"
        save_checkpoint(MLP((3, 4, 2), rng), path)
        with pytest.raises(ShapeMismatch):
            load_checkpoint(MLP((3, 5, 2), rng), path)
        with pytest.raises(KeyError):
            load_checkpoint(MLP((3, 4, 4, 2), rng), path)

    def test_foreign_file(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, w=np.ones(2))
        with pytest.raises(ConfigError):
            read_checkpoint(path)

    def test_version(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, __format__=np.array("molbuild-params"), __version__=np.array(99),
                 __meta__=np.array("{}"))
        with pytest.raises(ConfigError):
            read_checkpoint(path)


def test_linear_without_bias():
    lin = Linear(3, 2, np.random.default_rng(0), bias=False)
    assert [n for n, _ in lin.named_parameters()] == ["weight"]
