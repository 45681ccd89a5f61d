import numpy as np
import pytest

from mirau.errors import ConfigError
from mirau.models import (
    StudentConfig,
    StudentNet,
    TeacherConfig,
    TeacherNet,
    cnn_only_variant,
    patchify,
    sample_patch_mask,
)
from mirau.models.blocks import WindowAttention
from mirau.ndgrad import GradTape, Tensor, grad_check, precision

SMALL = StudentConfig(base=8)
TINY_T = TeacherConfig(image_size=16, dim=32, depth=2, ffn=64, dec_dim=16, dec_ffn=32, head_ch=8)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)


class TestStudent:
    def test_shape_and_range(self, images):
        net = StudentNet(SMALL).eval()
        with GradTape(record=False):
            out = net(images).data
        assert out.shape == (2, 1, 32, 32)
        assert 0 < out.min() and out.max() < 1

    def test_full_width_shape(self):
        x = np.random.default_rng(1).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
        with GradTape(record=False):
            assert StudentNet().eval()(x).shape == (1, 1, 64, 64)

    def test_eval_deterministic(self, images):
        net = StudentNet(SMALL).eval()
        with GradTape(seed=1, record=False):
            a = net(images).data
        with GradTape(seed=2, record=False):
            b = net(images).data
        np.testing.assert_array_equal(a, b)

    def test_zero_head_gives_half(self, images):
        net = StudentNet(SMALL).eval()
        net.head.weight.data[...] = 0
        net.head.bias.data[...] = 0
        with GradTape(record=False):
            np.testing.assert_array_equal(net(images).data, 0.5)

    @pytest.mark.parametrize("side", [12, 20, 36])
    def test_bad_sizes(self, side):
        x = np.zeros((1, 3, side, side), np.float32)
        with pytest.raises(ConfigError):
            StudentNet(SMALL)(x)

    def test_param_counts(self):
        hybrid = StudentNet().num_parameters()
        cnn = cnn_only_variant().num_parameters()
        assert hybrid == 326345
        assert abs(cnn - hybrid) / hybrid <= 0.10

    def test_cnn_variant_shape(self, images):
        net = cnn_only_variant(SMALL).eval()
        with GradTape(record=False):
            assert net(images).shape == (2, 1, 32, 32)

    def test_mc_maps_match_full_forward(self, images):
        net = StudentNet(SMALL)
        maps = net.mc_maps(images, 3, seed=11)
        net.eval()
        for m in range(3):
            with GradTape(seed=11, pass_index=m, record=False, sample_dropout=True):
                np.testing.assert_array_equal(net(images).data, maps[m])
        assert not np.array_equal(maps[0], maps[1])
        np.testing.assert_array_equal(net.mc_maps(images, 3, seed=11), maps)
        assert net.training is False  # mode restored

    def test_gradcheck(self):
        with precision(np.float64):
            net = StudentNet(StudentConfig(base=8, dropout=0.0))
            x = np.random.default_rng(2).uniform(0, 1, (1, 3, 16, 16))
            target = (np.random.default_rng(3).random((1, 1, 16, 16)) > 0.5).astype(float)
            res = grad_check(lambda: ((net(x) - target) ** 2).mean(), net.parameters(),
                             max_per_param=2, seed=0)
        assert res < 1e-4


class TestWindowAttention:
    def block(self, shift):
        with precision(np.float64):
            return WindowAttention(8, 2, 4, shift, np.random.default_rng(0))

    def run(self, blk, x):
        with GradTape(record=False):
            return blk(Tensor(x)).data

    def test_locality(self):
        blk = self.block(0)
        x = np.random.default_rng(1).normal(size=(1, 8, 8, 8))
        base = self.run(blk, x)
        y = x.copy()
        y[0, 5, 6] += 3.0  # window (1,1)
        out = self.run(blk, y)
        changed = np.any(out != base, axis=-1)[0]
        assert changed[4:, 4:].all()
        changed[4:, 4:] = False
        assert not changed.any()

    def test_shifted_regions_are_masked(self):
        blk = self.block(2)
        x = np.random.default_rng(2).normal(size=(1, 8, 8, 8))
        base = self.run(blk, x)
        y = x.copy()
        y[0, 0, 0] += 3.0
        out = self.run(blk, y)
        # (0,0) wraps next to (7,7) but belongs to another region of the shifted window
        np.testing.assert_array_equal(out[0, 7, 7], base[0, 7, 7])
        assert np.any(out[0, 1, 1] != base[0, 1, 1])

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            WindowAttention(10, 4, 4, 0, np.random.default_rng(0))


class TestTeacher:
    @pytest.fixture(scope="class")
    def net(self):
        return TeacherNet(TINY_T, seed=0)

    @pytest.fixture(scope="class")
    def x(self):
        return np.random.default_rng(5).uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)

    def test_patchify_layout(self, x):
        p = patchify(x, 8)
        assert p.shape == (2, 4, 192)
        np.testing.assert_array_equal(p[1, 1].reshape(8, 8, 3), x[1, :, :8, 8:].transpose(1, 2, 0))

    def test_mim_shape(self, net, x):
        mask = sample_patch_mask(np.random.default_rng(0), 2, net.grid, 0.5)
        with GradTape(record=False):
            out = net.mim_forward(x, mask)
        assert out.shape == (int(mask.sum()), 192) == (4, 192)

    def test_zero_ratio_forces_one_patch(self, net, x):
        mask = sample_patch_mask(np.random.default_rng(0), 2, net.grid, 0.0)
        assert mask.sum(axis=1).tolist() == [1, 1]
        with GradTape(record=False):
            assert net.mim_forward(x, mask).shape == (2, 192)

    def test_all_masked(self, net, x):
        mask = np.ones((2, net.grid), bool)
        with GradTape(seed=1, record=False):
            a = net.mim_forward(x, mask).data
        with GradTape(seed=1, record=False):
            b = net.mim_forward(np.zeros_like(x), mask).data
        np.testing.assert_array_equal(a, b)  # encoder sees only mask tokens

    def test_empty_mask_rejected(self, net, x):
        with pytest.raises(ConfigError):
            net.mim_forward(x, np.zeros((2, net.grid), bool))

    def test_segment(self, net, x):
        a = net.segment(x)
        np.testing.assert_array_equal(a, net.segment(x))
        assert a.shape == (2, 1, 16, 16) and 0 < a.min() and a.max() < 1
        m0 = net.segment(x, mc_dropout=True, seed=3, pass_index=0)
        m1 = net.segment(x, mc_dropout=True, seed=3, pass_index=1)
        assert not np.array_equal(m0, m1)
        np.testing.assert_array_equal(m0, net.segment(x, mc_dropout=True, seed=3, pass_index=0))

    def test_size_guard(self, net):
        with pytest.raises(ConfigError):
            net.segment(np.zeros((1, 3, 20, 20), np.float32))

    def test_default_config(self):
        cfg = TeacherConfig()
        assert (cfg.patch, cfg.dim, cfg.depth, cfg.heads, cfg.ffn) == (8, 256, 4, 4, 512)
