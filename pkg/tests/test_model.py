import numpy as np
import pytest

from bevdet.errors import ContractError
from bevdet.model import BevDetector, CamBlock, DownBlock, ModelConfig, ResidualUnit, UpBlock, param_count
from bevdet.nn import Conv2d
from bevdet.nn.gradcheck import grad_check, numeric_gradient, relative_error, sample_input

SEEDS = (0, 1, 2)
# Composite blocks put ReLUs behind batch norm, where a 1e-3 step can cross
# a kink; a smaller step in float64 keeps the difference quotient honest.
H = 1e-5


def sampled_gradient(f, p, idx, h):
    """Central differences of ``f`` for the flat entries ``idx`` of ``p``."""
    flat = p.reshape(-1)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def multi_check(module, inputs, backward, seed, h=H, max_entries=None):
    """Finite-difference check for blocks with several inputs or outputs.

    ``backward(projections)`` must return the input gradients as a tuple.
    With ``max_entries`` each parameter tensor is checked on a seeded subset
    of that many entries; inputs are always checked in full.
    """
    module.astype(np.float64)
    rng = np.random.default_rng(seed + 1)

    def outputs():
        out = module.forward(*inputs)
        return out if isinstance(out, tuple) else (out,)

    projs = [rng.standard_normal(o.shape) for o in outputs()]

    def loss():
        return float(sum((o * p).sum() for o, p in zip(outputs(), projs)))

    module.zero_grad()
    outputs()
    dins = backward([p.copy() for p in projs])
    analytic = {name: g.copy() for name, _, g in module.named_parameters()}
    worst = max(relative_error(d, numeric_gradient(loss, x, h)) for d, x in zip(dins, inputs))
    pick = np.random.default_rng(seed + 2)
    for name, p, _ in module.named_parameters():
        if max_entries is None or p.size <= max_entries:
            worst = max(worst, relative_error(analytic[name], numeric_gradient(loss, p, h)))
            continue
        idx = pick.choice(p.size, max_entries, replace=False)
        a = analytic[name].reshape(-1)
        # judge the sampled entries against the scale of the full analytic tensor
        err = relative_error(np.append(a[idx], np.abs(a).max()), np.append(sampled_gradient(loss, p, idx, h), np.abs(a).max()))
        worst = max(worst, err)
    return worst


def inputs(seed, *shapes):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(s) for s in shapes]


class TestConfig:
    def test_widths(self):
        assert ModelConfig().widths == [32, 64, 128, 256, 512]
        assert ModelConfig.desk().widths == [4, 8, 16, 32, 64]

    def test_indivisible_dims(self):
        with pytest.raises(ContractError):
            ModelConfig(rows=100, cols=64)

    def test_bad_fusion(self):
        with pytest.raises(ContractError):
            ModelConfig.desk(fusion="max")


class TestCam:
    def test_zero_in_zero_out(self):
        assert not CamBlock(8).forward(np.zeros((1, 8, 16, 16), np.float32)).any()

    def test_shape(self, rng):
        x = rng.standard_normal((1, 8, 16, 16)).astype(np.float32)
        assert CamBlock(8).forward(x).shape == x.shape

    def test_squeeze_floor(self):
        assert CamBlock(3).squeeze.out_ch == 1

    def test_saturated_gate_is_identity(self, rng):
        cam = CamBlock(8)
        cam.expand.params["bias"][...] = 1e4
        x = rng.standard_normal((1, 8, 9, 9)).astype(np.float32)
        np.testing.assert_array_equal(cam.forward(x), x)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        cam = CamBlock(4, rng=np.random.default_rng(seed)).astype(np.float64)
        # keep the squeeze ReLU away from its kink at the sampled point
        cam.squeeze.params["bias"][...] = 0.5
        x = sample_input((2, 4, 6, 6), seed)
        assert np.abs(cam.squeeze.forward(cam.pool.forward(x))).min() > 10 * 1e-3
        assert grad_check(cam, x.shape, seed, x=x) < 1e-3


class TestResidual:
    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("in_ch,out_ch,d", [(3, 3, 1), (2, 4, 2)])
    def test_gradients(self, seed, in_ch, out_ch, d):
        unit = ResidualUnit(in_ch, out_ch, d, rng=np.random.default_rng(seed))
        assert grad_check(unit, (2, in_ch, 6, 6), seed, h=H) < 1e-3


class TestDownBlock:
    def test_desk_shapes(self):
        same, half = DownBlock(3, 4, cam=True).forward(np.zeros((1, 3, 64, 32), np.float32))
        assert same.shape == (1, 4, 64, 32) and half.shape == (1, 8, 32, 16)

    def test_full_level0_shapes(self):
        same, half = DownBlock(3, 32, cam=True).forward(np.zeros((1, 3, 512, 256), np.float32))
        assert same.shape == (1, 32, 512, 256) and half.shape == (1, 64, 256, 128)

    def test_zero_input_finite(self):
        same, half = DownBlock(3, 4, cam=True).forward(np.zeros((2, 3, 8, 8), np.float32))
        assert np.isfinite(same).all() and np.isfinite(half).all()

    def test_odd_dims(self):
        with pytest.raises(ContractError):
            DownBlock(3, 4).forward(np.zeros((1, 3, 7, 8), np.float32))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        block = DownBlock(2, 3, dilation=2, cam=True, rng=np.random.default_rng(seed))
        (x,) = inputs(seed, (2, 2, 6, 6))
        err = multi_check(block, [x], lambda p: (block.backward(*p),), seed)
        assert err < 1e-3


class TestUpBlock:
    def test_shape(self):
        up = UpBlock(8, 4)
        out = up.forward(np.zeros((1, 8, 8, 4), np.float32), np.zeros((1, 4, 16, 8), np.float32))
        assert out.shape == (1, 4, 16, 8)

    def test_zero_skip_sum(self, rng):
        up = UpBlock(4, 2, rng=rng)
        low = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
        skip = np.zeros((1, 2, 8, 8), np.float32)
        expected = up.bn(up.relu(up.conv(up.proj(up.up(low)))))
        np.testing.assert_array_equal(up.forward(low, skip), expected)

    def test_resolution_mismatch(self):
        with pytest.raises(ContractError):
            UpBlock(8, 4).forward(np.zeros((1, 8, 8, 4), np.float32), np.zeros((1, 4, 8, 8), np.float32))

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("fusion", ["sum", "concat"])
    def test_gradients(self, seed, fusion):
        up = UpBlock(3, 2, fusion, rng=np.random.default_rng(seed))
        low, skip = inputs(seed, (2, 3, 3, 3), (2, 2, 6, 6))
        assert multi_check(up, [low, skip], lambda p: up.backward(p[0]), seed) < 1e-3


def tiny_config(**kw):
    return ModelConfig(rows=8, cols=8, base_channels=2, levels=3, cam_levels=(0,), dilations=(1, 2, 2), **kw)


class TestBevDetector:
    def test_desk_head_shapes(self):
        heads = BevDetector(ModelConfig.desk()).forward(np.zeros((1, 3, 64, 32), np.float32))
        assert [h.shape for h in heads] == [(1, 2, 64, 32), (1, 3, 64, 32), (1, 21, 64, 32)]

    def test_full_head_shapes(self):
        model = BevDetector(ModelConfig()).eval()
        heads = model.forward(np.zeros((1, 3, 512, 256), np.float32))
        assert [h.shape[2:] for h in heads] == [(512, 256)] * 3

    def test_deterministic(self, rng):
        model = BevDetector(ModelConfig.desk())
        x = rng.standard_normal((2, 3, 64, 32)).astype(np.float32)
        a, b = model.forward(x), model.forward(x)
        assert all(u.tobytes() == v.tobytes() for u, v in zip(a, b))

    def test_wrong_input(self):
        with pytest.raises(ContractError, match="64, 32"):
            BevDetector(ModelConfig.desk()).forward(np.zeros((1, 3, 32, 32), np.float32))

    def test_lattice_size(self):
        model = BevDetector(ModelConfig.desk())
        assert len(model.downs) == 5 and len(model.ups) == 10
        assert not model.downs[-1].emit_half
        assert [d.cam is not None for d in model.downs] == [True, True, True, False, False]

    def test_gradient_reaches_first_conv(self, rng):
        model = BevDetector(ModelConfig.desk())
        x = rng.standard_normal((2, 3, 64, 32)).astype(np.float32)
        heads = model.forward(x)
        model.backward(*(rng.standard_normal(h.shape).astype(np.float32) for h in heads))
        g = model.downs[0].cam.squeeze.grads["weight"]
        assert np.linalg.norm(g) > 0
        assert np.linalg.norm(model.downs[0].res.conv1.grads["weight"]) > 0

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("fusion", ["sum", "concat"])
    def test_end_to_end_gradients(self, seed, fusion):
        model = BevDetector(tiny_config(fusion=fusion, seed=seed))
        (x,) = inputs(seed, (2, 3, 8, 8))
        assert multi_check(model, [x], lambda p: (model.backward(*p),), seed, max_entries=8) < 1e-3

    def test_describe(self):
        text = BevDetector(ModelConfig.desk()).describe()
        assert "params=237126" in text and "level 4: width 64 at 4x2" in text


class TestParamCount:
    def test_single_conv(self):
        assert param_count(Conv2d(3, 4, 3)) == 112

    def test_reinit_invariant(self):
        assert param_count(BevDetector(ModelConfig.desk(seed=1))) == param_count(BevDetector(ModelConfig.desk(seed=2)))

    def test_full_config_size(self):
        n = param_count(BevDetector(ModelConfig()))
        assert n == 15_076_020
        assert abs(n * 4 / 1e6 - 59) / 59 <= 0.30
