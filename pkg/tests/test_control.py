import pytest
import torch

from pressure_motion.control import ControlBranch, control_strength, guided_predict_x0
from pressure_motion.diffusion import Denoiser, DenoiserConfig, make_schedule, sample_cfg
from pressure_motion.features import SHIFT_DIM, freeze

CFG = DenoiserConfig(latent=32, layers=3, heads=2, ff=64, dropout=0.0, max_len=32)


@pytest.fixture
def parts():
    torch.manual_seed(0)
    backbone = freeze(Denoiser(CFG))
    return backbone, ControlBranch(backbone)


def _inputs(b=2, n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, n, 263, generator=g), torch.randint(1, 10, (b,), generator=g),
            torch.randn(b, 512, generator=g), torch.randn(b, n, 39, generator=g),
            torch.randn(b, n, SHIFT_DIM, generator=g))


class TestZeroInit:
    def test_residual_is_zero(self, parts):
        backbone, branch = parts
        x, t, c, traj, shift = _inputs()
        x0, r = guided_predict_x0(x, t, c, traj, shift, backbone, branch)
        assert torch.count_nonzero(r) == 0
        assert torch.equal(x0, backbone(x, t, c))

    def test_copy_is_independent(self, parts):
        backbone, branch = parts
        assert branch.depth == CFG.layers
        with torch.no_grad():
            next(branch.controlnet.parameters()).add_(1.0)
        assert not torch.equal(next(branch.controlnet.parameters()), next(backbone.parameters()))
        assert all(p.requires_grad for p in branch.parameters())

    def test_gradient_reaches_zero_layers(self, parts):
        backbone, branch = parts
        x, t, c, traj, shift = _inputs()
        x0, _ = guided_predict_x0(x, t, c, traj, shift, backbone, branch)
        x0.pow(2).sum().backward()
        assert branch.out.weight.grad.abs().sum() > 0
        assert not any(p.grad is not None for p in backbone.parameters())


class TestShapes:
    def test_frame_mismatch(self, parts):
        backbone, branch = parts
        x, t, c, traj, shift = _inputs()
        with pytest.raises(ValueError, match="frames"):
            branch(x, t, c, traj[:, :-1], shift)

    def test_attention_maps(self, parts):
        _, branch = parts
        x, t, c, traj, shift = _inputs(n=5)
        zr = [z(h) for z, h in zip(branch.zero, branch.controlnet_forward(x, t, c, traj))]
        r, attn = branch.adapter_forward(zr, shift, c, return_attention=True)
        assert r.shape == (2, 5, 263) and len(attn) == CFG.layers
        # each frame attends over N shift tokens plus the text token
        assert attn[0].shape == (2, 5, 6)
        assert torch.allclose(attn[0].sum(-1), torch.ones(2, 5), atol=1e-5)

    def test_mask_branch(self, parts):
        backbone, branch = parts
        with torch.no_grad():
            branch.out.bias.fill_(1.0)
        x, t, c, traj, shift = _inputs()
        x0, r = guided_predict_x0(x, t, c, traj, shift, backbone, branch, mask_branch=True)
        assert torch.equal(x0, backbone(x, t, c)) and torch.count_nonzero(r) == 0


def test_untrained_branch_leaves_sampling_unchanged(parts):
    backbone, branch = parts
    _, _, c, traj, shift = _inputs(n=6)
    sched = make_schedule(8)
    for seed in range(3):
        plain = sample_cfg(backbone, c, sched, 6, cfg_scale=2.5, seed=seed)
        ctrl = sample_cfg(lambda x, t, cc: guided_predict_x0(x, t, cc, traj, shift, backbone, branch)[0],
                          c, sched, 6, cfg_scale=2.5, seed=seed)
        assert torch.equal(plain, ctrl)


class TestControlStrength:
    def test_formula(self):
        s = make_schedule(1000)
        t = torch.tensor([1, 10, 1000])
        got = control_strength(t, 40, s)
        want = [20 * min(s.posterior_var[k - 1], 0.01) / 40 for k in (1, 10, 1000)]
        assert torch.allclose(got, torch.tensor(want, dtype=torch.float64), rtol=0, atol=1e-15)

    def test_capped(self):
        s = make_schedule(10, rescale=True)
        assert control_strength(torch.arange(1, 11), 1, s).max() <= 0.2 + 1e-15

    def test_invalid(self):
        s = make_schedule(10)
        with pytest.raises(ValueError):
            control_strength(torch.tensor([0]), 5, s)
        with pytest.raises(ValueError):
            control_strength(torch.tensor([1]), 0, s)
