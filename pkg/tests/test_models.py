import numpy as np
import pytest

from dcalgan.autodiff import Tensor
from dcalgan.errors import ConfigError
from dcalgan.models import (
    NetworkConfig,
    desk_config,
    discriminator_features,
    discriminator_forward,
    discriminator_shapes,
    fuse_features,
    fused_dim,
    generator_forward,
    generator_shapes,
    get_config,
    init_params,
    named_buffers,
    named_parameters,
    paper_config,
    parameter_fingerprint,
    sample_z,
)

from conftest import tiny_config

# (H, W, C) after each discriminator stage, as quoted for the 512x512 network
PAPER_D_SHAPES = [
    ((128, 128, 96), (64, 64, 96)),
    ((64, 64, 256), (32, 32, 256)),
    ((32, 32, 384), (32, 32, 384)),
    ((32, 32, 384), (32, 32, 384)),
    ((32, 32, 256), (16, 16, 256)),
]


def _hwc(shape):
    c, h, w = shape
    return (h, w, c)


def test_paper_discriminator_shapes():
    shapes = discriminator_shapes(paper_config())
    assert [(_hwc(a), _hwc(b)) for a, b in shapes] == PAPER_D_SHAPES


def test_paper_generator_shapes():
    shapes = generator_shapes(paper_config())
    assert shapes[0] == (1024, 4, 4)
    assert len(shapes) == 8
    assert shapes[-1] == (1, 512, 512)
    assert [s[1] for s in shapes] == [4, 8, 16, 32, 64, 128, 256, 512]


def test_paper_pools_overlap():
    for layer in paper_config().disc_layers:
        if layer.pool is not None:
            assert layer.pool.stride < layer.pool.window


@pytest.mark.parametrize("preset, dims", [("desk", (1024, 2560, 4096)), ("paper", (65536, 163840, 262144))])
def test_fused_dims(preset, dims):
    cfg = get_config(preset)
    assert tuple(fused_dim(cfg, m) for m in ("F1", "F2", "F3")) == dims


def test_unknown_preset_and_fusion():
    with pytest.raises(ConfigError):
        get_config("huge")
    with pytest.raises(ConfigError):
        desk_config("F4")


def test_config_round_trip_and_fingerprint():
    cfg = desk_config()
    again = NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()
    assert cfg.with_fusion("F3").fingerprint() != cfg.fingerprint()


def test_init_params_deterministic_and_scaled():
    cfg = desk_config()
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    assert parameter_fingerprint(a.discriminator) == parameter_fingerprint(b.discriminator)
    assert parameter_fingerprint(a.generator) == parameter_fingerprint(b.generator)
    assert parameter_fingerprint(init_params(cfg, 6).generator) != parameter_fingerprint(a.generator)
    k = a.discriminator["conv2"].kernels.data
    assert abs(k.std() - 0.02) < 0.002 and abs(k.mean()) < 0.002
    g = a.generator["stage1"].bn_gamma.data
    assert abs(g.mean() - 1.0) < 0.01
    assert not np.any(a.discriminator["conv1"].bias.data)
    assert "conv1.bn_gamma" not in named_parameters(a.discriminator)
    assert set(named_buffers(a.generator)) >= {"proj.bn_running_mean", "stage1.bn_running_var"}
    assert "stage4.bn_gamma" not in named_parameters(a.generator)


def test_generator_output_shape_and_range():
    cfg = tiny_config()
    params = init_params(cfg, 0)
    z = sample_z(np.random.default_rng(0), 3, cfg.z_dim)
    assert z.min() >= -1 and z.max() <= 1
    out = generator_forward(z, params.generator, cfg, training=True).data
    assert out.shape == (3, 1, 16, 16)
    assert out.min() > -1 and out.max() < 1


def test_desk_forward_shapes():
    cfg = desk_config()
    params = init_params(cfg, 0)
    z = sample_z(np.random.default_rng(0), 2, cfg.z_dim)
    img = generator_forward(z, params.generator, cfg)
    assert img.shape == (2, 1, 64, 64)
    out = discriminator_forward(img, params.discriminator, cfg)
    assert out.prob.shape == (2,)
    assert np.all((out.prob.data > 0) & (out.prob.data < 1))
    assert out.fused.shape == (2, 2560)
    assert [out.features[i].shape[1:] for i in range(1, 6)] == [s for _, s in discriminator_shapes(cfg)]


def test_fusion_prefix_property(rng):
    cfg = tiny_config()
    params = init_params(cfg, 1)
    x = rng.uniform(-1, 1, size=(4, 1, 16, 16))
    feats = discriminator_features(x, params.discriminator, cfg)
    f1, f2, f3 = (fuse_features(feats, m).data for m in ("F1", "F2", "F3"))
    assert f1.shape[1] == fused_dim(cfg, "F1") and f3.shape[1] == fused_dim(cfg, "F3")
    assert np.array_equal(f2[:, :f1.shape[1]], f1)
    assert np.array_equal(f3[:, :f2.shape[1]], f2)


def test_batchnorm_stats_only_update_when_asked(rng):
    cfg = tiny_config()
    params = init_params(cfg, 0)
    x = rng.uniform(-1, 1, size=(4, 1, 16, 16))
    before = params.discriminator["conv2"].bn_running_mean.copy()
    discriminator_forward(x, params.discriminator, cfg, training=True, update_stats=False)
    assert np.array_equal(params.discriminator["conv2"].bn_running_mean, before)
    discriminator_forward(x, params.discriminator, cfg, training=False)
    assert np.array_equal(params.discriminator["conv2"].bn_running_mean, before)
    discriminator_forward(x, params.discriminator, cfg, training=True)
    assert not np.array_equal(params.discriminator["conv2"].bn_running_mean, before)


def test_eval_mode_rows_independent_of_batch(rng):
    cfg = tiny_config()
    params = init_params(cfg, 2)
    x = rng.uniform(-1, 1, size=(3, 1, 16, 16))
    both = discriminator_forward(np.concatenate([x, x]), params.discriminator, cfg).fused.data
    assert np.array_equal(both[:3], both[3:])


def test_shape_errors(rng):
    cfg = tiny_config()
    params = init_params(cfg, 0)
    with pytest.raises(ConfigError):
        discriminator_forward(rng.uniform(size=(2, 1, 8, 8)), params.discriminator, cfg)
    with pytest.raises(ConfigError):
        generator_forward(np.zeros((2, 5)), params.generator, cfg)
    other = init_params(desk_config(), 0)
    with pytest.raises(ConfigError):
        discriminator_forward(rng.uniform(size=(2, 1, 16, 16)), other.discriminator, cfg)


def test_discriminator_gradients_reach_all_parameters(rng):
    cfg = tiny_config()
    params = init_params(cfg, 0)
    out = discriminator_forward(Tensor(rng.uniform(-1, 1, size=(4, 1, 16, 16))), params.discriminator, cfg,
                                training=True)
    out.logit.sum().backward()
    for name, t in named_parameters(params.discriminator).items():
        assert t.grad is not None and t.grad.shape == t.shape, name
