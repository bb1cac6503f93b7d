import numpy as np
import pytest
import torch
from torch.nn import functional as F

from pressure_motion.features import (
    SHIFT_DIM, ClipBank, ShiftNet, ShiftNetConfig, TrajNet, TrajNetConfig, TrajTrainConfig, f_shift_forward,
    f_traj_forward, freeze, is_frozen, pretrain_f_traj, temporal_diff_torch,
)
from pressure_motion.pressure import temporal_diff
from pressure_motion.synth import MotionRecipe, generate_record


@pytest.fixture(scope="module")
def recs():
    return [generate_record(MotionRecipe(k, 60, seed=i)) for i, k in enumerate(("walk", "squat", "turn", "sway"))]


def _maps(b=2, n=5, h=64, w=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, n, h, w, generator=g) * 5


class TestTrajNet:
    def test_shapes_and_anchor(self):
        torch.manual_seed(0)
        out = TrajNet()(_maps())
        assert out.traj.shape == (2, 5, 39) and out.offset.shape == (2, 2)
        # the root of frame 0 sits on the motion origin
        assert torch.allclose(out.traj[:, 0, [0, 2]], torch.zeros(2, 2), atol=1e-6)

    def test_offset_only_moves_xz_positions(self):
        torch.manual_seed(0)
        out = TrajNet()(_maps())
        diff = out.traj - out.mat
        xz = [3 * k for k in range(5)] + [3 * k + 2 for k in range(5)]
        others = [c for c in range(39) if c not in xz]
        assert torch.equal(diff[..., others], torch.zeros_like(diff[..., others]))
        assert torch.allclose(diff[..., 0], out.offset[:, None, 0].expand(-1, 5))

    def test_wrong_mat_size(self):
        with pytest.raises(ValueError, match="weights expect"):
            TrajNet()(_maps(h=32))

    def test_unbatched_helper(self):
        net = freeze(TrajNet())
        m = _maps(1)
        single = f_traj_forward(m[0].numpy(), net)
        assert single.traj.shape == (5, 39)
        assert torch.allclose(single.traj, net(m).traj[0], atol=1e-6)


class TestShiftNet:
    def test_shape(self):
        m = _maps()
        assert ShiftNet()(m, temporal_diff_torch(m)).shape == (2, 5, SHIFT_DIM)

    def test_split_convolution_matches_concatenation(self):
        # grid code folded in once must equal convolving the full channel stack
        torch.manual_seed(1)
        net = ShiftNet(ShiftNetConfig(height=16, width=16, input_pool=1))
        m = _maps(1, 3, 16, 16)
        d = temporal_diff_torch(m)
        x = torch.stack([m, d], 2).reshape(3, 2, 16, 16) / net.cfg.pressure_scale
        full = torch.cat([x, net.grid[None].expand(3, -1, -1, -1)], 1)
        outs = [F.relu(conv(full)) for conv in net.branches]
        y = F.relu(net.mid(torch.cat(outs, 1)))
        want = net.proj(net.pool(y).flatten(1)).reshape(1, 3, SHIFT_DIM)
        assert torch.allclose(net(m, d), want, atol=1e-5)

    def test_frames_independent(self):
        net = ShiftNet()
        m = _maps(1, 4)
        d = temporal_diff_torch(m)
        perm = torch.tensor([2, 0, 3, 1])
        assert torch.allclose(net(m, d)[:, perm], net(m[:, perm], d[:, perm]), atol=1e-6)

    def test_mismatched_inputs(self):
        m = _maps()
        with pytest.raises(ValueError):
            ShiftNet()(m, m[:, :-1])
        with pytest.raises(ValueError, match="grid"):
            ShiftNet()(m, m, grid=torch.zeros(3, 32, 32))

    def test_helper_derives_diff(self):
        net = ShiftNet()
        m = _maps(1)[0].numpy()
        a = f_shift_forward(m, net)
        b = f_shift_forward(m, net, temporal_diff(m))
        assert torch.equal(a, b)

    def test_torch_diff_matches_numpy(self):
        m = _maps(2, 6)
        assert np.allclose(temporal_diff_torch(m).numpy(), np.stack([temporal_diff(x) for x in m.numpy()]))


class TestClipBank:
    def test_windows_cover_record(self, recs):
        bank = ClipBank(recs[:1], 40, 10)
        assert [s for _, s in bank.index] == [0, 10, 20]
        assert bank.poses.shape == (3, 40, 263)

    def test_offsets_map_mat_to_clip_frame(self, recs):
        bank = ClipBank(recs, 40, 20)
        for k, (i, s) in enumerate(bank.index):
            rec = bank.records[i]
            want = np.array(rec.calib.offset) - rec.joints[s, 0, [0, 2]]
            assert np.allclose(bank.calib_offset(k), want, atol=1e-6)

    def test_short_records_rejected(self, recs):
        with pytest.raises(ValueError):
            ClipBank(recs, 100)


def test_freeze():
    net = freeze(TrajNet())
    assert is_frozen(net) and not net.training
    assert not any(p.requires_grad for p in net.parameters())


@pytest.mark.slow
def test_pretraining_reduces_loss(recs):
    cfg = TrajTrainConfig(steps=120, batch_size=8, clip_len=40, log_every=0)
    net, curve = pretrain_f_traj(recs, cfg, seed=0)
    assert is_frozen(net)
    assert np.mean(curve[-20:]) < 0.5 * np.mean(curve[:5])
