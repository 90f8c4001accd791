from types import SimpleNamespace

import numpy as np
import pytest

from qflow import flow, pretrain

BEC_N_TOTAL = 8
BEC_DEPTH = 12
NLL = dict(epochs=300, lr=3e-3)
KL = dict(epochs=300, batch_n=1024, lr=3e-4)


@pytest.fixture(scope="session")
def bec_target():
    return pretrain.TargetDensity.antisymmetric_bec(BEC_N_TOTAL)


@pytest.fixture(scope="session")
def bec_reference_points(bec_target):
    # held-out chains, independent of the ones used for training
    return pretrain.mh_sample(bec_target, 20_000, np.random.default_rng(99), proposal_sigma=0.5,
                              burn_in=5000, thin=5, n_chains=50).points


def _identity(d=4):
    return flow.init_identity(d, flow.Prior.standard_normal(d), BEC_DEPTH, 0)


@pytest.fixture(scope="session")
def bec_pretrained(bec_target, bec_reference_points):
    rng = np.random.default_rng(0)
    mh = pretrain.mh_sample(bec_target, 20_000, rng, proposal_sigma=0.5, burn_in=5000, thin=5, n_chains=50)
    model, _ = pretrain.nll_pretrain(_identity(), mh.points, rng=rng, **NLL)
    model, _ = pretrain.kl_pretrain(model, bec_target, rng=rng, **KL)
    kl, se = pretrain.forward_kl_estimate(model, bec_target, bec_reference_points)
    return SimpleNamespace(model=model, kl=kl, kl_stderr=se)


@pytest.fixture(scope="session")
def bec_kl_only(bec_target, bec_reference_points):
    model, _ = pretrain.kl_pretrain(_identity(), bec_target, rng=np.random.default_rng(0), **KL)
    kl, se = pretrain.forward_kl_estimate(model, bec_target, bec_reference_points)
    return SimpleNamespace(model=model, kl=kl, kl_stderr=se)


# -- acceptance reporting ----------------------------------------------------------------

_ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request, capsys):
    lines = request.config.stash.setdefault(_ACCEPTANCE_LINES, [])

    def report(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
