import numpy as np
import pytest
import torch

from vpnc.backbone import CodecConfig

TINY = dict(N=16, M=8, hyper_channels=8, hyper_features=8, context_channels=8, reference_channels=8,
            reference_dim=8, fusion_hidden=16, vpct_dim=16, vpct_global=8, vpct_heads=2, vpct_layers=1)


def tiny_config(kind="joint", vpct=False, viewport=(64, 64), seed=0, **kw):
    return CodecConfig(kind=kind, vpct=vpct, viewport=viewport, seed=seed, **{**TINY, **kw})


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# a small hyperprior model trained long enough to beat a flat-colour image;
# shared by the CLI tests and the end-to-end acceptance check
TRAINED = dict(kind="hyperprior", lam=0.048, batch_size=2, max_steps=300, lr=2e-3, erp_height=128,
               viewport=[64, 64], synthetic_count=8, model=dict(TINY, N=32, M=16), val_count=1)


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory):
    from vpnc.harness import TrainConfig, train

    path = tmp_path_factory.mktemp("trained") / "model.ckpt"
    torch.set_num_threads(1)
    train(TrainConfig.from_dict(dict(TRAINED)), checkpoint=str(path))
    return path


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {text}")
