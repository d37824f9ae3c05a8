import numpy as np
import pytest
import torch

from deshadow.base_unet import BaseUNet, BaseUNetConfig, base_loss
from deshadow.layers import init_parameters
from deshadow.params import grad_check
from deshadow.train import adamw_step


def tiny_config():
    return BaseUNetConfig(base_width=8, depth=2, norm_groups=4)


def seeded(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g)


class TestForward:
    @pytest.mark.parametrize("size", [64, 128])
    def test_output_shape_matches_input(self, size):
        net = BaseUNet()
        init_parameters(net, seed=0)
        out = net(seeded((1, 3, size, size)))
        assert out.shape == (1, 3, size, size)

    def test_output_in_unit_interval(self):
        net = BaseUNet()
        init_parameters(net, seed=0)
        out = net(seeded((2, 3, 64, 64)) * 100 - 50)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_bitwise(self):
        net = BaseUNet()
        init_parameters(net, seed=1)
        x = seeded((1, 3, 64, 64), seed=2)
        assert torch.equal(net(x), net(x))

    def test_indivisible_dims_rejected(self):
        net = BaseUNet()
        with pytest.raises(ValueError, match="divisible"):
            net(seeded((1, 3, 66, 66)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BaseUNetConfig(depth=0)
        with pytest.raises(ValueError):
            BaseUNetConfig(base_width=12, norm_groups=8)


class TestLoss:
    def test_zero_iff_equal(self):
        x = seeded((2, 3, 8, 8))
        assert base_loss(x, x).item() == 0.0
        y = x.clone()
        y[0, 0, 0, 0] += 0.1
        assert base_loss(x, y).item() > 0.0

    def test_uniform_difference_one(self):
        pred = torch.zeros(1, 3, 4, 4)
        target = torch.ones(1, 3, 4, 4)
        assert base_loss(pred, target).item() == 1.0

    def test_matches_elementwise_oracle(self):
        pred = seeded((2, 3, 5, 5), seed=3)
        target = seeded((2, 3, 5, 5), seed=4)
        got = base_loss(pred, target).item()
        p, t = pred.numpy().astype(np.float64), target.numpy().astype(np.float64)
        expect = 0.0
        for v1, v2 in zip(p.flat, t.flat):
            expect += (v2 - v1) ** 2
        expect /= p.size
        assert abs(got - expect) < 1e-6

    def test_nonnegative(self):
        pred = seeded((1, 3, 4, 4), seed=5)
        target = seeded((1, 3, 4, 4), seed=6)
        assert base_loss(pred, target).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            base_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestGradients:
    def test_grad_check_through_loss(self):
        net = BaseUNet(tiny_config())
        init_parameters(net, seed=7)
        x = seeded((1, 3, 8, 8), seed=8).double()
        y = seeded((1, 3, 8, 8), seed=9).double()

        def f(w):
            return base_loss(torch.func.functional_call(net, w, (x,)), y)

        err = grad_check(f, dict(net.named_parameters()), h=1e-3, num_coords=60)
        assert err < 1e-2


class TestOverfit:
    def test_500_steps_on_one_pair_beats_input(self):
        from deshadow.data import SynthConfig, synth_pair
        from deshadow.layers import image_to_tensor

        sample = synth_pair(SynthConfig(seed=11))
        x = image_to_tensor(sample.shadow)
        y = image_to_tensor(sample.clean)
        net = BaseUNet(tiny_config())
        init_parameters(net, seed=12)
        named = dict(net.named_parameters())
        m = {n: torch.zeros_like(p) for n, p in named.items()}
        v = {n: torch.zeros_like(p) for n, p in named.items()}
        for step in range(1, 501):
            loss = base_loss(net(x), y)
            grads = torch.autograd.grad(loss, list(named.values()))
            adamw_step(named, dict(zip(named, grads)), m, v, step,
                       lr=1e-3, weight_decay=1e-4)
        with torch.no_grad():
            final = net(x)
        mse_in = ((x - y) ** 2).mean().item()
        mse_out = ((final - y) ** 2).mean().item()
        # lower MSE = higher PSNR on the same scale
        assert mse_out < mse_in
