import numpy as np
import pytest

from protoseg import autodiff as ad
from protoseg import losses as L
from protoseg import network as net
from protoseg.prototypes import build_prototypes

SMALL = net.NetConfig(1, ((3, 4), (1, 8)))


def test_init_is_deterministic_with_zero_bias():
    a, b = net.init(net.NetConfig(), 3), net.init(net.NetConfig(), 3)
    assert list(a) == net.param_names(net.NetConfig())
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
        if k.endswith("bias"):
            assert not a[k].any()


def test_init_kernel_variance_matches_fan_in():
    cfg = net.NetConfig(1, ((3, 128), (3, 128)))
    w = net.init(cfg, 0)["conv1.weight"]  # 128*128*9 draws, fan_in 1152
    assert abs(w.var() / (2.0 / (128 * 9)) - 1) < 0.1


@pytest.mark.parametrize("layers", [((3, 0),), ((5, 4),), ()])
def test_invalid_configs(layers):
    with pytest.raises(ValueError):
        net.NetConfig(1, layers)


def test_identity_network():
    cfg = net.NetConfig(1, ((1, 1),))
    params = {"conv0.weight": np.ones((1, 1, 1, 1)), "conv0.bias": np.zeros(1)}
    x = np.random.default_rng(0).standard_normal((1, 5, 7))
    np.testing.assert_array_equal(net.forward(params, x, cfg).data, x)


def test_forward_shapes_and_channel_check():
    cfg = net.NetConfig()
    params = net.init(cfg, 0)
    assert net.forward(params, np.zeros((1, 9, 11)), cfg).shape == (64, 9, 11)
    assert net.forward(params, np.zeros((2, 1, 9, 11)), cfg).shape == (2, 64, 9, 11)
    with pytest.raises(ad.ShapeError):
        net.forward(params, np.zeros((2, 9, 11)), cfg)


def test_forward_is_pure():
    params = net.init(net.NetConfig(), 1)
    x = np.random.default_rng(1).standard_normal((1, 8, 8))
    before = net.clone(params)
    a = net.forward(params, x, net.NetConfig()).data
    b = net.forward(params, x, net.NetConfig()).data
    assert a.tobytes() == b.tobytes()
    for k in params:
        assert params[k].tobytes() == before[k].tobytes()


def test_clone_independence():
    p = net.init(SMALL, 0)
    c = net.clone(p)
    assert all(c[k].tobytes() == p[k].tobytes() for k in p)
    assert all(net.clone(c)[k].tobytes() == p[k].tobytes() for k in p)
    c["conv0.weight"][0, 0, 0, 0] += 1.0
    assert c["conv0.weight"][0, 0, 0, 0] != p["conv0.weight"][0, 0, 0, 0]


def test_shapes_do_not_depend_on_class_count():
    cfg = net.NetConfig()
    shapes = {k: v.shape for k, v in net.init(cfg, 0).items()}
    # a 5-class and a 30-class experiment share the same backbone
    for n in (5, 30):
        protos = build_prototypes(n + 1, seed=0)
        assert protos.dim == cfg.feature_dim
        assert {k: v.shape for k, v in net.init(cfg, n).items()} == shapes


def test_end_to_end_gradient_through_network():
    rng = np.random.default_rng(2)
    protos = build_prototypes(4, seed=1, dim=8, embed_dim=16)
    image = rng.standard_normal((1, 4, 4))
    y = rng.integers(0, 4, (4, 4))
    spec = L.AnnotationSpec(L.VOLUMETRIC, phi=(1, 3))
    params = net.init(SMALL, 4)
    name = "conv0.weight"

    def f(w):
        ps = dict(params)
        ps[name] = w
        p = L.prototype_softmax(net.forward(ps, image, SMALL), protos)
        parts = L.SampleLosses(entropy=L.entropy_loss(p), volume=L.volume_loss(p),
                               focal_ce=L.focal_ce(p, y, spec), dice=L.dice_loss(p, y, spec))
        return L.total_loss(parts, L.LossWeights(), 0)

    assert ad.grad_check(f, params[name], 1e-6) <= 1e-5
