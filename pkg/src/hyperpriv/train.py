"""Dual-pass distillation training: orchestration, ablations, checkpoints.

Training is transductive: topologies are built once over the whole cohort and
stay static; every step runs the teacher on the full graph and the student on
the severed view, combines the losses on training patients only, and applies
one optimizer update to the single shared parameter set.  Evaluation reports
the student pass on held-out patients (teacher pass for the teacher_eval
ablation).
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .cohort import Cohort
from .encoder import pretrain_cohort
from .hypergraph import assemble_student, assemble_teacher, sever
from .losses import CoxNoEventsWarning, LabelTensors, LossBreakdown, LossConfig, total_loss
from .metrics import EvalReport, accuracy, c_index, evaluate_endpoint
from .model import (
    FeatureSet,
    ModelDims,
    PropagationOperator,
    SharedEncoder,
    forward,
)
from .optim import make_optimizer
from .seeding import rng
from .validation import ConfigError, NumericalDivergenceError

ABLATIONS = ("full", "no_hypergraph", "no_kd", "no_ssl", "teacher_eval")

HISTORY_COLUMNS = ("epoch",) + LossBreakdown.FIELDS


@dataclass
class TrainConfig:
    """Everything one run needs; JSON configs mirror these field names."""

    epochs: int = 200
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 1.0
    lambda_feat: float = 1.0
    lambda_logit: float = 1.0
    tau_kd: float = 2.0
    kd_direction: str = "student_first"
    stop_teacher_grad: bool = True
    tau_squared_rescale: bool = False
    task_on: str = "both"
    k_knn: int = 10
    seed: int = 0
    ablation: str = "full"
    test_fraction: float = 0.3
    ssl_epochs: int = 100
    ssl_lr: float = 5e-3
    ssl_tau: float = 0.5
    ssl_sigma_aug: float = 0.3
    ssl_p_drop: float = 0.5
    d_in: int = 32
    d_hidden: int = 64
    d_att: int = 32
    d_out: int = 32
    n_layers: int = 2

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam|sgd, got {self.optimizer!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.k_knn < 1:
            raise ConfigError(f"k_knn must be >= 1, got {self.k_knn}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.ssl_epochs < 0:
            raise ConfigError(f"ssl_epochs must be >= 0, got {self.ssl_epochs}")
        self.loss_config().validate()
        return self

    def loss_config(self) -> LossConfig:
        no_kd = self.ablation == "no_kd"
        return LossConfig(
            lambda_feat=0.0 if no_kd else self.lambda_feat,
            lambda_logit=0.0 if no_kd else self.lambda_logit,
            tau_kd=self.tau_kd,
            kd_direction=self.kd_direction,
            stop_teacher_grad=self.stop_teacher_grad,
            tau_squared_rescale=self.tau_squared_rescale,
            task_on=self.task_on,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


def load_train_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return TrainConfig.from_dict(data)


def split_indices(group_labels: np.ndarray, test_fraction: float, seed: int):
    """Seeded stratified split; every class keeps at least one patient on
    each side when it has two or more."""
    group_labels = np.asarray(group_labels)
    train, test = [], []
    for cls in np.unique(group_labels):
        members = np.flatnonzero(group_labels == cls)
        order = rng(seed, "split", cls).permutation(len(members))
        n_test = int(round(test_fraction * len(members)))
        if len(members) >= 2:
            n_test = min(max(n_test, 1), len(members) - 1)
        test.extend(members[order[:n_test]])
        train.extend(members[order[n_test:]])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


@dataclass
class TrainingSetup:
    """Static per-run context: refined cohort, tensors, topologies, split."""

    cohort: Cohort
    features: FeatureSet
    labels: LabelTensors
    teacher_topology: object  # HypergraphTopology | None
    severed_view: object  # SeveredView | None
    teacher_structure: object  # PropagationOperator | None
    student_structure: object  # PropagationOperator | None
    refiner: object
    dims: ModelDims


def prepare_training(cohort: Cohort, config: TrainConfig) -> TrainingSetup:
    refiner = None
    if config.ablation != "no_ssl" and config.ssl_epochs > 0:
        cohort, refiner = pretrain_cohort(
            cohort,
            epochs=config.ssl_epochs,
            tau=config.ssl_tau,
            lr=config.ssl_lr,
            seed=config.seed,
            sigma_aug=config.ssl_sigma_aug,
            p_drop=config.ssl_p_drop,
        )
    if config.ablation == "no_hypergraph":
        topology, severed = None, None
        teacher_structure = student_structure = None
    else:
        topology = assemble_teacher(cohort, config.k_knn)
        severed = sever(topology)
        teacher_structure = PropagationOperator(topology)
        student_structure = PropagationOperator(severed.topology)
    dims = ModelDims.from_cohort(
        cohort,
        d_in=config.d_in,
        d_hidden=config.d_hidden,
        d_att=config.d_att,
        d_out=config.d_out,
        n_layers=config.n_layers,
    )
    return TrainingSetup(
        cohort=cohort,
        features=FeatureSet.from_cohort(cohort),
        labels=LabelTensors.from_cohort(cohort),
        teacher_topology=topology,
        severed_view=severed,
        teacher_structure=teacher_structure,
        student_structure=student_structure,
        refiner=refiner,
        dims=dims,
    )


@dataclass
class TrainState:
    """Mutable run state; fully serializable through flat arrays."""

    params: SharedEncoder
    optimizer: object
    epoch: int
    history: list
    seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def init_state(setup: TrainingSetup, config: TrainConfig) -> TrainState:
    labels = setup.cohort.label_arrays()
    train_idx, test_idx = split_indices(labels["group"], config.test_fraction, config.seed)
    params = SharedEncoder(setup.dims, seed=config.seed)
    opt_kwargs = (
        {"beta1": config.beta1, "beta2": config.beta2, "eps": config.eps,
         "weight_decay": config.weight_decay}
        if config.optimizer == "adam"
        else {"momentum": config.momentum, "weight_decay": config.weight_decay}
    )
    optimizer = make_optimizer(
        config.optimizer, dict(params.named_parameters()), config.lr, **opt_kwargs
    )
    return TrainState(
        params=params,
        optimizer=optimizer,
        epoch=0,
        history=[],
        seed=config.seed,
        train_idx=train_idx,
        test_idx=test_idx,
    )


def _structure_for(state: TrainState, structure, role: str):
    """Memoize PropagationOperator construction per (role, topology identity)."""
    if structure is None or isinstance(structure, PropagationOperator):
        return structure
    key = (role, id(structure))
    if key not in state.cache:
        state.cache[key] = (structure, PropagationOperator(getattr(structure, "topology", structure)))
    return state.cache[key][1]


def train_step(state, features, teacher_topology, severed_view, labels, config):
    """One full-cohort step: both passes, combined loss, one shared update."""
    teacher_structure = _structure_for(state, teacher_topology, "teacher")
    student_structure = _structure_for(state, severed_view, "student")

    for p in state.params.parameters():
        p.grad = None
    teacher_out = forward(state.params, features, teacher_topology if teacher_structure is None else teacher_structure, "teacher")
    student_out = forward(state.params, features, severed_view if student_structure is None else student_structure, "student")
    breakdown = total_loss(teacher_out, student_out, labels, state.train_idx, config.loss_config())
    total = float(breakdown.total.detach())
    if not np.isfinite(total):
        raise NumericalDivergenceError(
            f"non-finite total loss {total} at epoch {state.epoch}"
        )
    breakdown.total.backward()
    state.optimizer.step()
    state.epoch += 1
    state.history.append(breakdown.as_floats())
    return state, breakdown


def evaluate_state(state: TrainState, setup: TrainingSetup, config: TrainConfig) -> EvalReport:
    """Score the evaluation pass on the held-out patients."""
    pass_kind = "teacher" if config.ablation == "teacher_eval" else "student"
    structure = setup.teacher_structure if pass_kind == "teacher" else setup.student_structure
    with torch.no_grad():
        out = forward(state.params, setup.features, structure, pass_kind)
    idx = state.test_idx
    labels = setup.cohort.label_arrays()
    risks_pfs = out.risk_pfs.numpy()[idx]
    risks_os = out.risk_os.numpy()[idx]
    return EvalReport(
        acc_group=accuracy(out.logits_group.numpy().argmax(axis=1)[idx], labels["group"][idx]),
        acc_grade=accuracy(out.logits_grade.numpy().argmax(axis=1)[idx], labels["grade"][idx]),
        cindex_pfs=c_index(risks_pfs, labels["pfs_time"][idx], labels["pfs_event"][idx]),
        cindex_os=c_index(risks_os, labels["os_time"][idx], labels["os_event"][idx]),
        pfs=evaluate_endpoint(risks_pfs, labels["pfs_time"][idx], labels["pfs_event"][idx]),
        os=evaluate_endpoint(risks_os, labels["os_time"][idx], labels["os_event"][idx]),
    )


def _snapshot(state: TrainState) -> dict:
    arrays = {f"param__{k}": v.detach().numpy().copy() for k, v in state.params.named_parameters()}
    arrays.update(state.optimizer.state_arrays())
    arrays["epoch"] = np.array(state.epoch)
    arrays["history"] = np.frombuffer(json.dumps(state.history).encode(), dtype=np.uint8).copy()
    return arrays


def _run(cohort: Cohort, config: TrainConfig, abort_dir=None):
    """Full pipeline: SSL, topology, training loop, held-out evaluation.

    On numerical divergence the last loss-verified state is written to
    ``abort_dir`` (when given) and the raised error carries the path.
    """
    config.validate()
    setup = prepare_training(cohort, config)
    state = init_state(setup, config)
    last_verified = None
    try:
        for _ in range(config.epochs):
            pre_step = _snapshot(state)
            train_step(
                state,
                setup.features,
                setup.teacher_structure if setup.teacher_structure is not None else setup.teacher_topology,
                setup.student_structure if setup.student_structure is not None else setup.severed_view,
                setup.labels,
                config,
            )
            last_verified = pre_step  # loss at this epoch was finite
    except NumericalDivergenceError as exc:
        path = None
        if abort_dir is not None and last_verified is not None:
            path = Path(abort_dir) / "last_good_checkpoint.npz"
            _write_checkpoint_arrays(last_verified, state, config, setup.dims, path)
        raise NumericalDivergenceError(str(exc), checkpoint_path=path) from exc
    report = evaluate_state(state, setup, config)
    return state, report, setup


def fit(cohort: Cohort, config: TrainConfig, abort_dir=None):
    """Train on ``cohort`` and return (TrainState, EvalReport)."""
    state, report, _ = _run(cohort, config, abort_dir=abort_dir)
    return state, report


def write_history_csv(history, path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for i, row in enumerate(history):
        lines.append(",".join([str(i + 1)] + [repr(row[c]) for c in LossBreakdown.FIELDS]))
    Path(path).write_text("\n".join(lines) + "\n")


# --- checkpointing --------------------------------------------------------


def _write_checkpoint_arrays(arrays: dict, state: TrainState, config: TrainConfig, dims: ModelDims, path):
    payload = dict(arrays)
    payload["seed"] = np.array(state.seed)
    payload["train_idx"] = state.train_idx
    payload["test_idx"] = state.test_idx
    payload["config"] = np.frombuffer(json.dumps(config.to_dict()).encode(), dtype=np.uint8).copy()
    payload["dims"] = np.frombuffer(json.dumps(dims.to_dict()).encode(), dtype=np.uint8).copy()
    np.savez(Path(path), **payload)


def save_checkpoint(state: TrainState, config: TrainConfig, dims: ModelDims, path) -> None:
    _write_checkpoint_arrays(_snapshot(state), state, config, dims, path)


def load_checkpoint(path):
    """Rebuild (state, config, dims) with shape verification."""
    with np.load(Path(path)) as data:
        config = TrainConfig.from_dict(json.loads(bytes(data["config"]).decode()))
        dims = ModelDims(**json.loads(bytes(data["dims"]).decode()))
        params = SharedEncoder(dims, seed=config.seed)
        for name, tensor in params.named_parameters():
            key = f"param__{name}"
            if key not in data:
                raise ValueError(f"checkpoint missing parameter '{name}'")
            arr = data[key]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"checkpoint parameter '{name}' has shape {arr.shape}, expected {tuple(tensor.shape)}"
                )
            with torch.no_grad():
                tensor.copy_(torch.from_numpy(arr))
        opt_kwargs = (
            {"beta1": config.beta1, "beta2": config.beta2, "eps": config.eps,
             "weight_decay": config.weight_decay}
            if config.optimizer == "adam"
            else {"momentum": config.momentum, "weight_decay": config.weight_decay}
        )
        optimizer = make_optimizer(
            config.optimizer, dict(params.named_parameters()), config.lr, **opt_kwargs
        )
        optimizer.load_state_arrays(data)
        state = TrainState(
            params=params,
            optimizer=optimizer,
            epoch=int(data["epoch"]),
            history=json.loads(bytes(data["history"]).decode()),
            seed=int(data["seed"]),
            train_idx=data["train_idx"].copy(),
            test_idx=data["test_idx"].copy(),
        )
    return state, config, dims


# --- estimator facade -----------------------------------------------------


class SeveredGraphDistiller(BaseEstimator):
    """Estimator wrapper around the pipeline: fit on a Cohort, predict from
    common modalities only.

    Constructor arguments mirror TrainConfig field names one-to-one, so
    ``get_params`` doubles as the run configuration.
    """

    def __init__(
        self,
        epochs: int = 200,
        lr: float = 1e-3,
        optimizer: str = "adam",
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        momentum: float = 0.9,
        weight_decay: float = 1.0,
        lambda_feat: float = 1.0,
        lambda_logit: float = 1.0,
        tau_kd: float = 2.0,
        kd_direction: str = "student_first",
        stop_teacher_grad: bool = True,
        tau_squared_rescale: bool = False,
        task_on: str = "both",
        k_knn: int = 10,
        seed: int = 0,
        ablation: str = "full",
        test_fraction: float = 0.3,
        ssl_epochs: int = 100,
        ssl_lr: float = 5e-3,
        ssl_tau: float = 0.5,
        ssl_sigma_aug: float = 0.3,
        ssl_p_drop: float = 0.5,
        d_in: int = 32,
        d_hidden: int = 64,
        d_att: int = 32,
        d_out: int = 32,
        n_layers: int = 2,
    ):
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lambda_feat = lambda_feat
        self.lambda_logit = lambda_logit
        self.tau_kd = tau_kd
        self.kd_direction = kd_direction
        self.stop_teacher_grad = stop_teacher_grad
        self.tau_squared_rescale = tau_squared_rescale
        self.task_on = task_on
        self.k_knn = k_knn
        self.seed = seed
        self.ablation = ablation
        self.test_fraction = test_fraction
        self.ssl_epochs = ssl_epochs
        self.ssl_lr = ssl_lr
        self.ssl_tau = ssl_tau
        self.ssl_sigma_aug = ssl_sigma_aug
        self.ssl_p_drop = ssl_p_drop
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.d_att = d_att
        self.d_out = d_out
        self.n_layers = n_layers

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, cohort: Cohort, y=None, abort_dir=None):
        config = self._config()
        state, report, setup = _run(cohort, config, abort_dir=abort_dir)
        self.config_ = config
        self.state_ = state
        self.report_ = report
        self.setup_ = setup
        self.refiner_ = setup.refiner
        self.history_ = state.history
        self.train_idx_ = state.train_idx
        self.test_idx_ = state.test_idx
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def _eval_inputs(self, cohort):
        """(features, structure, pass_kind) for the evaluation pass on ``cohort``."""
        config = self.config_
        if cohort is None:
            cohort = self.setup_.cohort
        elif self.refiner_ is not None:
            cohort = cohort.with_mri(self.refiner_.transform(cohort.mri_array()))
        pass_kind = "teacher" if config.ablation == "teacher_eval" else "student"
        if config.ablation == "no_hypergraph":
            structure = None
        elif pass_kind == "teacher":
            structure = assemble_teacher(cohort, config.k_knn)
        else:
            structure = assemble_student(cohort, config.k_knn)
        return FeatureSet.from_cohort(cohort), structure, pass_kind

    def predict(self, cohort: Cohort = None) -> dict:
        """Class predictions and risk scores for every patient.

        The student path rebuilds its severed view from common modalities
        only, so predictions cannot depend on text or concept data.
        """
        self._check_fitted()
        features, structure, pass_kind = self._eval_inputs(cohort)
        with torch.no_grad():
            out = forward(self.state_.params, features, structure, pass_kind)
        return {
            "group": out.logits_group.numpy().argmax(axis=1),
            "grade": out.logits_grade.numpy().argmax(axis=1),
            "location": out.logits_location.numpy().argmax(axis=1),
            "risk_pfs": out.risk_pfs.numpy(),
            "risk_os": out.risk_os.numpy(),
        }

    def evaluate(self, cohort: Cohort = None, indices=None) -> EvalReport:
        """EvalReport on ``indices`` (default: the held-out test split)."""
        self._check_fitted()
        target = self.setup_.cohort if cohort is None else cohort
        preds = self.predict(cohort)
        idx = self.test_idx_ if indices is None else np.asarray(indices, dtype=int)
        labels = target.label_arrays()
        return EvalReport(
            acc_group=accuracy(preds["group"][idx], labels["group"][idx]),
            acc_grade=accuracy(preds["grade"][idx], labels["grade"][idx]),
            cindex_pfs=c_index(preds["risk_pfs"][idx], labels["pfs_time"][idx], labels["pfs_event"][idx]),
            cindex_os=c_index(preds["risk_os"][idx], labels["os_time"][idx], labels["os_event"][idx]),
            pfs=evaluate_endpoint(preds["risk_pfs"][idx], labels["pfs_time"][idx], labels["pfs_event"][idx]),
            os=evaluate_endpoint(preds["risk_os"][idx], labels["os_time"][idx], labels["os_event"][idx]),
        )
