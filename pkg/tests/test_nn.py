import numpy as np
import pytest
import torch

from nullspace_recon import nn as unet
from nullspace_recon.exceptions import DimensionError, StateError
from nullspace_recon.objectives import mae_risk, uncertainty_loss


def _randomize(net, seed=0, scale=0.1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return net


class TestSmallUNet:
    @pytest.mark.parametrize("depth", [2, 3])
    @pytest.mark.parametrize("channels", [1, 2])
    def test_zero_init_outputs_zero(self, depth, channels):
        net = unet.SmallUNet(channels, base_channels=8, depth=depth)
        x = torch.randn(2, channels, 16, 16)
        out = net(x)
        assert out.shape == x.shape
        assert torch.all(out == 0)

    def test_two_heads(self):
        net = unet.SmallUNet(1, base_channels=4, depth=2, heads=2)
        rec, log_scale = net(torch.randn(3, 1, 8, 8))
        assert rec.shape == log_scale.shape == (3, 1, 8, 8)
        assert torch.all(rec == 0) and torch.all(log_scale == 0)

    def test_branches_share_all_but_last_level(self):
        torch.manual_seed(0)
        single = unet.SmallUNet(1, base_channels=4, depth=3)
        torch.manual_seed(0)
        double = unet.SmallUNet(1, base_channels=4, depth=3, heads=2)
        shared = single.state_dict()
        extra = [k for k in double.state_dict() if k not in shared]
        assert all(k.startswith("scale_") for k in extra)
        for k, v in shared.items():
            assert torch.equal(v, double.state_dict()[k])
        _randomize(single, seed=1)
        _randomize(double, seed=1)
        double.load_state_dict({**double.state_dict(), **single.state_dict()})
        x = torch.randn(2, 1, 16, 16)
        assert torch.equal(double(x)[0], single(x))

    def test_no_bias_on_reconstruction_head(self):
        net = unet.SmallUNet(1, base_channels=4, depth=2, heads=2)
        assert net.head.bias is None

    def test_identity_kernel_conv(self):
        conv = torch.nn.Conv2d(1, 1, 3, padding=1, bias=False)
        with torch.no_grad():
            conv.weight.zero_()
            conv.weight[0, 0, 1, 1] = 1.0
        x = torch.randn(2, 1, 8, 8)
        assert torch.equal(conv(x), x)

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            torch.manual_seed(3)
            net = _randomize(unet.SmallUNet(1, base_channels=4, depth=3), seed=3)
            outs.append(net(torch.ones(1, 1, 16, 16)))
        assert torch.equal(outs[0], outs[1])

    def test_shape_checks(self):
        net = unet.SmallUNet(2, base_channels=4, depth=3)
        with pytest.raises(DimensionError):
            net(torch.randn(1, 1, 16, 16))
        with pytest.raises(DimensionError):
            net(torch.randn(1, 2, 10, 10))

    def test_invalid_architecture(self):
        with pytest.raises(ValueError):
            unet.SmallUNet(1, depth=4)
        with pytest.raises(ValueError):
            unet.SmallUNet(1, heads=3)

    def test_forward_accepts_numpy(self):
        net = unet.SmallUNet(1, base_channels=4, depth=2)
        out = unet.forward(net, np.zeros((1, 1, 8, 8)))
        assert out.shape == (1, 1, 8, 8)


class TestBackward:
    def test_linear_1x1_conv(self):
        conv = torch.nn.Conv2d(1, 1, 1, bias=False).double()
        x = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        unet.backward(conv(x).sum())
        assert conv.weight.grad.item() == pytest.approx(x.sum().item(), rel=1e-12)

    def test_requires_graph(self):
        with pytest.raises(StateError):
            unet.backward(torch.tensor(1.0))

    def test_disconnected_branch_gets_no_gradient(self):
        net = unet.SmallUNet(1, base_channels=4, depth=2, heads=2)
        _randomize(net)
        rec, _ = net(torch.randn(2, 1, 8, 8))
        unet.backward(rec.abs().sum())
        assert net.scale_head.weight.grad is None or torch.all(net.scale_head.weight.grad == 0)
        assert net.head.weight.grad.abs().sum() > 0

    def test_finite_difference_full_unet(self):
        torch.manual_seed(0)
        net = _randomize(unet.SmallUNet(1, base_channels=4, depth=3).double(), seed=1, scale=0.3)
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        target = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        err = unet.gradient_check(list(net.parameters()), lambda: ((net(x) - target) ** 2).sum(),
                                  samples=50, h=1e-5)
        assert err <= 1e-4


class TestGradientCheck:
    def test_linear_net_mae(self):
        conv = torch.nn.Conv2d(1, 1, 3, padding=1).double()
        x = torch.randn(2, 1, 6, 6, dtype=torch.float64)
        target = conv(x).detach() + 5.0  # residual bounded away from the kink
        err = unet.gradient_check(list(conv.parameters()), lambda: mae_risk(conv(x), target),
                                  samples=10)
        assert err <= 1e-6

    def test_uncertainty_loss_through_unet(self):
        net = _randomize(unet.SmallUNet(1, base_channels=4, depth=2, heads=2).double(), seed=2)
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        target = torch.randn(2, 1, 8, 8, dtype=torch.float64)

        def loss():
            rec, rho = net(x)
            return uncertainty_loss(rec, rho, target)

        with unet.kink_monitor([net], lambda: net(x)[0] - target) as kink_fn:
            err = unet.gradient_check(list(net.parameters()), loss, samples=50, kink_fn=kink_fn)
        assert err <= 1e-4

    def test_kink_samples_are_skipped(self):
        # the loss |w| has a kink at the current w = 0, so every draw straddles it
        w = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        with pytest.raises(RuntimeError, match="rejected"):
            unet.gradient_check([w], lambda: w.abs().sum() + 0 * w.sum(), samples=1,
                                kink_fn=lambda: w.detach().clone() + 0.0)

    def test_requires_float64(self):
        w = torch.zeros(2, requires_grad=True)
        with pytest.raises(TypeError):
            unet.gradient_check([w], lambda: (w**2).sum())


class TestAdam:
    def test_zero_gradients_leave_parameters(self):
        w = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        opt = unet.Adam([w], lr=0.1)
        w.grad = torch.zeros_like(w)
        opt.step()
        assert torch.equal(w.data, torch.tensor([1.0, -2.0]))

    def test_step_count_and_grad_reset(self):
        w = torch.nn.Parameter(torch.tensor([1.0]))
        opt = unet.Adam([w])
        for k in range(3):
            unet.backward((w**2).sum())
            unet.adam_step([w], opt)
            assert opt.step_count == k + 1
            assert w.grad is None

    def test_quadratic_converges(self):
        # minimizer of (w - 1)^2 is 1
        w = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
        opt = unet.Adam([w], lr=1e-2)
        for _ in range(500):
            unet.backward(((w - 1.0) ** 2).sum())
            opt.step()
        assert abs(w.item() - 1.0) < 1e-3

    def test_agrees_with_torch_optim(self):
        start = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
        a = torch.nn.Parameter(start.clone())
        b = torch.nn.Parameter(start.clone())
        ours = unet.Adam([a], lr=1e-2)
        ref = torch.optim.Adam([b], lr=1e-2)
        for _ in range(50):
            unet.backward((a**4 - a).sum())
            ours.step()
            ref.zero_grad()
            (b**4 - b).sum().backward()
            ref.step()
        assert torch.allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_matches_reference_update(self):
        # one hand-computed Adam step: m = 0.1 g, v = 0.001 g^2, bias-corrected -> lr * sign(g)
        w = torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
        opt = unet.Adam([w], lr=0.01)
        w.grad = torch.tensor([3.0], dtype=torch.float64)
        opt.step()
        assert w.item() == pytest.approx(0.5 - 0.01 * 3.0 / (3.0 + 1e-8), rel=1e-12)

    def test_deterministic_trajectories(self):
        def run():
            torch.manual_seed(0)
            net = unet.SmallUNet(1, base_channels=4, depth=2)
            _randomize(net, seed=0)
            opt = unet.Adam(list(net.parameters()), lr=1e-3)
            x = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(1))
            for _ in range(10):
                unet.backward(mae_risk(net(x), x * 0.5))
                opt.step()
            return [p.detach().clone() for p in net.parameters()]
        a, b = run(), run()
        assert all(torch.equal(p, q) for p, q in zip(a, b))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        nets = [_randomize(unet.SmallUNet(2, base_channels=4, depth=2), seed=4),
                _randomize(unet.SmallUNet(2, base_channels=4, depth=2, heads=2), seed=5)]
        path = unet.save_checkpoint(nets, tmp_path / "ckpt.bin")
        back, manifest = unet.load_checkpoint(path)
        assert manifest["architectures"][1]["heads"] == 2
        for a, b in zip(nets, back):
            for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
                assert ka == kb and torch.equal(va, vb)
        entry = manifest["parameters"][0]
        assert {"name", "shape", "offset", "precision"} <= set(entry)

    def test_truncated_blob(self, tmp_path):
        path = unet.save_checkpoint([unet.SmallUNet(1, base_channels=4, depth=2)],
                                    tmp_path / "c.bin")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError):
            unet.load_checkpoint(path)
