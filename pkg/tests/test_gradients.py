"""Central finite-difference checks of every layer in float64."""
import pytest
import torch
import torch.nn as nn

from vpnc.backbone import (
    AnalysisTransform,
    ContextModel,
    FactorizedDensity,
    HyperAnalysis,
    HyperSynthesis,
    ReferenceLite,
    SynthesisTransform,
    gaussian_likelihood,
)
from vpnc.harness import DISTORTION_SCALE, loss, rd_terms
from vpnc.model import ViewportCodec
from vpnc.tensor import MultiHeadAttention, grad_check, leaky_relu, masked_attention, reset_parameters
from vpnc.vpct import MLP, VPCT, Fusion, InterViewBlock, IntraViewBlock, build_cross_mask, build_intra_mask

from conftest import tiny_config

LAYER_TOL = 1e-3
ELEMENTWISE_TOL = 1e-4


def leaf(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_()


def check_module(module, inputs, forward=None, samples=24, eps=1e-5):
    module = module.double()
    reset_parameters(module)
    params = [p for p in module.parameters() if p.requires_grad]
    forward = forward or (lambda: module(*inputs))
    probe = leaf(*forward().shape, seed=99)

    def f():
        return (forward() * probe).sum()

    return grad_check(f, list(inputs) + params, eps=eps, samples=samples)


def test_leaky_relu_elementwise():
    x = leaf(50)
    with torch.no_grad():
        x[x.abs() < 1e-2] += 0.1    # stay away from the kink
    assert grad_check(lambda: (leaky_relu(x) ** 2).sum(), [x], eps=1e-6) < ELEMENTWISE_TOL


def test_gaussian_likelihood_elementwise():
    y = leaf(40, scale=0.8)
    mu = leaf(40, seed=1, scale=0.3)
    s = (torch.rand(40, dtype=torch.float64, generator=torch.Generator().manual_seed(2)) + 0.5).requires_grad_()

    def f():
        return -torch.log2(gaussian_likelihood(y, mu, s)).sum()

    assert grad_check(f, [y, mu, s], eps=1e-6) < ELEMENTWISE_TOL


def test_softplus_sigma_elementwise():
    x = leaf(30)
    assert grad_check(lambda: nn.functional.softplus(x).pow(2).sum(), [x], eps=1e-6) < ELEMENTWISE_TOL


@pytest.mark.parametrize("layer,shape", [
    (lambda: nn.Conv2d(3, 4, 5, stride=2, padding=2), (1, 3, 8, 8)),
    (lambda: nn.ConvTranspose2d(4, 3, 5, stride=2, padding=2, output_padding=1), (1, 4, 4, 4)),
    (lambda: nn.Linear(6, 5), (3, 6)),
    (lambda: nn.LayerNorm(6), (3, 6)),
    (lambda: MLP(6, 12), (3, 6)),
])
def test_basic_layers(layer, shape):
    assert check_module(layer(), [leaf(*shape)]) < LAYER_TOL


def test_masked_attention():
    q, k, v = leaf(2, 5, 4), leaf(2, 7, 4, seed=1), leaf(2, 7, 3, seed=2)
    mask = build_cross_mask(5, 0).double()
    mask = torch.cat([mask, torch.zeros(5, 2, dtype=torch.float64)], dim=1)
    probe = leaf(2, 5, 3, seed=3)
    assert grad_check(lambda: (masked_attention(q, k, v, mask) * probe).sum(), [q, k, v], eps=1e-6) < LAYER_TOL


def test_multi_head_attention():
    m = MultiHeadAttention(8, 2)
    x, mem = leaf(2, 4, 8), leaf(2, 6, 8, seed=1)
    assert check_module(m, [x, mem], forward=lambda: m(x, mem)) < LAYER_TOL


def test_intra_view_block():
    blk = IntraViewBlock(8, 2)
    s = leaf(2, 5, 8)
    mask = build_intra_mask(5, torch.float64)
    assert check_module(blk, [s], forward=lambda: blk(s, mask)) < LAYER_TOL


def test_inter_view_block():
    blk = InterViewBlock(8, 2)
    s, mem = leaf(1, 4, 8), leaf(1, 8, 8, seed=1)
    mask = build_cross_mask(4, 1, torch.float64)
    assert check_module(blk, [s, mem], forward=lambda: blk(s, mem, mask)) < LAYER_TOL


def test_vpct_stack():
    net = VPCT(latent_channels=3, tokens=4, dim=8, heads=2, layers=1, out=4, max_views=4)
    y = leaf(1, 3, 3, 2, 2)
    assert check_module(net, [y], samples=12) < LAYER_TOL


def test_fusion():
    fu = Fusion(5, 3, 8, 2)
    local, glob = leaf(1, 5, 2, 2), leaf(1, 3, 2, 2, seed=1)
    fu.double()
    fu.reset_parameters()
    with torch.no_grad():
        fu.global_.weight.normal_()   # exercise the zero-initialized branch too
    params = list(fu.parameters())
    probe = leaf(1, 2, 2, 2, seed=5)

    def f():
        mu, sigma = fu(local, glob)
        return (mu * probe).sum() + (sigma * probe).sum()

    assert grad_check(f, [local, glob] + params, eps=1e-5, samples=24) < LAYER_TOL


def test_context_model():
    cm = ContextModel(3, 4)
    assert check_module(cm, [leaf(1, 3, 4, 4)]) < LAYER_TOL


def test_reference_lite():
    ref = ReferenceLite(3, 4, 6, 5)
    y, ctx = leaf(1, 3, 3, 3), leaf(1, 4, 3, 3, seed=1)
    ref.double()
    reset_parameters(ref)
    with torch.no_grad():
        ref.default.normal_()
    probe = leaf(1, 5, 3, 3, seed=7)
    f = lambda: (ref(y, ctx) * probe).sum()  # noqa: E731
    assert grad_check(f, [y, ctx] + list(ref.parameters()), eps=1e-5, samples=24) < LAYER_TOL


@pytest.mark.parametrize("cls,args,shape", [
    (AnalysisTransform, (4, 3), (1, 3, 16, 16)),
    (SynthesisTransform, (4, 3), (1, 3, 1, 1)),
    (HyperAnalysis, (3, 2), (1, 3, 4, 4)),
    (HyperSynthesis, (2, 3, 4), (1, 2, 1, 1)),
])
def test_transforms(cls, args, shape):
    m = cls(*args)
    x = leaf(*shape, scale=0.5)
    if cls is SynthesisTransform:
        # keep the output clamp inactive so the map is smooth at the probe point
        m.double()
        reset_parameters(m)
        with torch.no_grad():
            m.net[-1].bias.fill_(0.5)
            m.net[-1].weight.mul_(0.01)
        probe = leaf(1, 3, 16, 16, seed=4)
        f = lambda: (m(x) * probe).sum()  # noqa: E731
        assert grad_check(f, [x] + list(m.parameters()), eps=1e-6, samples=24) < LAYER_TOL
    else:
        assert check_module(m, [x]) < LAYER_TOL


def test_factorized_density():
    d = FactorizedDensity(3).double()
    y = leaf(2, 3, 2, 2, scale=2.0)

    def f():
        return -torch.log2(d.likelihood(y)).sum()

    assert grad_check(f, [y] + list(d.parameters()), eps=1e-6, samples=24) < LAYER_TOL


@pytest.mark.parametrize("kind,vpct", [("factorized", False), ("hyperprior", False), ("joint", False),
                                       ("joint", True), ("reference", True)])
def test_full_loss(kind, vpct):
    cfg = tiny_config(kind, vpct, N=4, M=4, hyper_channels=2, hyper_features=4, context_channels=4,
                      reference_channels=2, reference_dim=4, fusion_hidden=6, vpct_dim=4, vpct_global=2)
    model = ViewportCodec(cfg).double()
    if vpct:
        with torch.no_grad():
            model.fusion.global_.weight.normal_(std=0.3)
    x = torch.rand(1, 2, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

    def f():
        # the same noise sample on every call makes the objective a smooth function
        t = rd_terms(model, x, torch.Generator().manual_seed(1))
        return loss(x, t["out"]["x_hat"], t["bpp_y"], t["bpp_z"], 0.013 * DISTORTION_SCALE)

    params = [p for p in model.parameters()]
    picked = params[:2] + params[-4:]
    assert grad_check(f, picked, eps=1e-6, samples=6) < LAYER_TOL
