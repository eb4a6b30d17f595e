"""Shared fixtures and numerical helpers for the test suite."""

import dataclasses

import numpy as np
import pytest
import torch

from hyperpriv.cohort import Cohort, GenConfig, generate_cohort
from hyperpriv.hypergraph import assemble_teacher, sever
from hyperpriv.losses import LabelTensors
from hyperpriv.model import FeatureSet, ModelDims, SharedEncoder
from hyperpriv.train import TrainConfig, fit

# ---------------------------------------------------------------------------
# finite-difference machinery
# ---------------------------------------------------------------------------

FD_STEP = 1e-4
GRAD_RTOL = 1e-4


def fd_gradient(fn, tensor, h=FD_STEP):
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``tensor``.

    ``fn`` must read ``tensor`` through the closure; entries are perturbed in
    place and restored.  Everything runs in float64.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = float(fn())
            flat[i] = orig - h
            f_minus = float(fn())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def autograd_gradients(fn, tensors):
    """Reverse-mode gradients of ``fn()`` w.r.t. each tensor (zeros when a
    tensor does not influence the value)."""
    for t in tensors:
        t.grad = None
    value = fn()
    value.backward()
    return [
        t.grad.clone() if t.grad is not None else torch.zeros_like(t) for t in tensors
    ]


def max_grad_rel_err(fn, tensors, h=FD_STEP):
    """Worst relative disagreement between autograd and central differences.

    The comparison is per tensor on the infinity norm, with a floor so that
    near-zero gradients compare absolutely.
    """
    analytic = autograd_gradients(fn, tensors)
    worst = 0.0
    for t, g_an in zip(tensors, analytic):
        g_fd = fd_gradient(fn, t, h=h)
        scale = max(float(g_fd.abs().max()), float(g_an.abs().max()), 1e-6)
        err = float((g_an - g_fd).abs().max()) / scale
        worst = max(worst, err)
    return worst


def leaf(array):
    """Float64 leaf tensor with gradient tracking."""
    return torch.tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# cohorts and model scaffolding
# ---------------------------------------------------------------------------


def small_gen_config(**overrides) -> GenConfig:
    """Smallest legal cohort with reduced dims; fast to generate and train."""
    base = dict(
        n_patients=20,
        d_c=6,
        d_m=8,
        d_t=6,
        v_c=3,
        mri_artifact_dims=2,
        concept_probs={"PFA": [0.7, 0.5, 0.2], "PFB": [0.2, 0.4, 0.7]},
        concept_hazard_multipliers=[2.0, 1.0, 0.6],
        seed=11,
    )
    base.update(overrides)
    return GenConfig(**base)


def small_train_config(**overrides) -> TrainConfig:
    """Reduced epoch/width settings so training-loop tests stay fast."""
    base = dict(
        epochs=8,
        ssl_epochs=4,
        k_knn=3,
        d_in=8,
        d_hidden=12,
        d_att=6,
        d_out=8,
        seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def default_cohort() -> Cohort:
    """The default-configuration cohort the acceptance gate trains on."""
    return generate_cohort(GenConfig())


@pytest.fixture(scope="session")
def small_cohort() -> Cohort:
    return generate_cohort(small_gen_config())


@dataclasses.dataclass
class MicroSetup:
    """Five-patient fixture bundle for composite-loss and invariance tests."""

    cohort: Cohort
    dims: ModelDims
    features: FeatureSet
    teacher_topology: object
    severed_view: object
    labels: LabelTensors
    train_idx: np.ndarray


def build_micro_setup(seed: int = 13) -> MicroSetup:
    config = small_gen_config(
        d_c=6, d_m=6, d_t=5, v_c=3, mri_artifact_dims=0, censor_rate=0.0, seed=seed,
        concept_probs={"PFA": [0.8, 0.5, 0.3], "PFB": [0.3, 0.5, 0.8]},
    )
    cohort = generate_cohort(config).take(5)
    topology = assemble_teacher(cohort, k=2)
    dims = ModelDims.from_cohort(cohort, d_in=6, d_hidden=7, d_att=4, d_out=5, n_layers=2)
    return MicroSetup(
        cohort=cohort,
        dims=dims,
        features=FeatureSet.from_cohort(cohort),
        teacher_topology=topology,
        severed_view=sever(topology),
        labels=LabelTensors.from_cohort(cohort),
        train_idx=np.arange(cohort.n_patients),
    )


@pytest.fixture(scope="session")
def micro() -> MicroSetup:
    return build_micro_setup()


@pytest.fixture()
def micro_params(micro) -> SharedEncoder:
    return SharedEncoder(micro.dims, seed=5)


@pytest.fixture(scope="session")
def full_run_seed1(default_cohort):
    """One complete default-configuration training run, shared by tests that
    only need a trained state."""
    state, report = fit(default_cohort, TrainConfig(seed=1))
    return state, report


# ---------------------------------------------------------------------------
# acceptance-criteria reporting
# ---------------------------------------------------------------------------


@pytest.fixture()
def acceptance(request):
    """Record one pass/fail line per criterion and fail the test on FAIL."""

    def record(number: int, description: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number}: {status} - {description}"
        if detail:
            line += f" [{detail}]"
        request.config.stash.setdefault(_ACCEPTANCE_KEY, []).append(line)
        print(line)
        assert ok, line

    return record


_ACCEPTANCE_KEY = pytest.StashKey()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
