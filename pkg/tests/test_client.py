import numpy as np
import pytest

from gradfb import autodiff as ad
from gradfb.autodiff import Tensor
from gradfb.client import compute_client_gradient, one_hot
from gradfb.model import ConvSpec, ModelConfig, build_model, forward

from _oracles import softmax

SMALL = ModelConfig(input_shape=(1, 8, 8), conv_layers=(ConvSpec(4, 3, "same"), ConvSpec(4, 3, "same")),
                    num_classes=5, init_seed=7)


def loss_at(model, image, label, params_flat):
    with ad.no_grad():
        params = [Tensor(a) for a in model.unflatten(params_flat)]
        logits = forward(model, Tensor(image), params)
        return ad.softmax_cross_entropy(logits, Tensor(one_hot(label, model.config.num_classes))).item()


class TestClientGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_bias_gradient_is_softmax_minus_onehot(self, seed):
        model = build_model(ModelConfig(init_seed=seed))
        image = np.random.default_rng(seed).uniform(size=(1, 28, 28))
        label = seed % 10
        g = compute_client_gradient(model, image, label)
        logits = forward(model, Tensor(image)).data
        np.testing.assert_allclose(g.bias_grad, softmax(logits) - one_hot(label, 10), atol=1e-10)

    def test_matches_finite_differences_on_sampled_coordinates(self):
        model = build_model(SMALL)
        r = np.random.default_rng(0)
        image, label = r.uniform(size=(1, 8, 8)), 2
        flat = compute_client_gradient(model, image, label).flat()
        base = np.array(model.params)
        eps = 1e-6
        for i in r.choice(model.num_params, size=50, replace=False):
            up, down = base.copy(), base.copy()
            up[i] += eps
            down[i] -= eps
            fd = (loss_at(model, image, label, up) - loss_at(model, image, label, down)) / (2 * eps)
            assert flat[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_one_tensor_per_segment(self):
        model = build_model(SMALL)
        g = compute_client_gradient(model, np.zeros((1, 8, 8)), 0, source_index=4)
        assert [x.shape for x in g.grads] == [s.shape for s in model.segments]
        assert g.source_index == 4 and g.flat().size == model.num_params

    def test_deterministic(self):
        model = build_model(SMALL)
        image = np.random.default_rng(1).uniform(size=(1, 8, 8))
        a = compute_client_gradient(model, image, 1).flat()
        b = compute_client_gradient(model, image, 1).flat()
        assert a.tobytes() == b.tobytes()

    def test_bad_label(self):
        with pytest.raises(ValueError, match="outside"):
            compute_client_gradient(build_model(SMALL), np.zeros((1, 8, 8)), 5)

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="does not match"):
            compute_client_gradient(build_model(SMALL), np.zeros((8, 8)), 0)
