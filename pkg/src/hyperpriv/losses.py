"""Task and distillation losses, combined into one logged breakdown.

Everything is computed in float64 with log-sum-exp stabilization.  The Cox
partial likelihood uses Breslow tie handling normalized by the event count;
distillation covers the pooled sharp/smooth feature pair (smooth-L1) and the
temperature-softened logits of the group task plus the PFS risk vector treated
as one cohort-level softmax.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .cohort import Cohort


class CoxNoEventsWarning(UserWarning):
    """Every observation in the risk set is censored; the Cox term is zero."""


@dataclass
class LossConfig:
    """Weights and switches for the combined objective."""

    lambda_feat: float = 1.0
    lambda_logit: float = 1.0
    tau_kd: float = 2.0
    kd_direction: str = "student_first"
    stop_teacher_grad: bool = True
    tau_squared_rescale: bool = False
    task_on: str = "both"  # which passes contribute task losses: both|teacher|student

    def validate(self):
        if self.kd_direction not in ("student_first", "teacher_first"):
            raise ValueError(f"kd_direction must be student_first|teacher_first, got {self.kd_direction!r}")
        if self.task_on not in ("both", "teacher", "student"):
            raise ValueError(f"task_on must be both|teacher|student, got {self.task_on!r}")
        if self.tau_kd <= 0:
            raise ValueError("tau_kd must be positive")
        if self.lambda_feat < 0 or self.lambda_logit < 0:
            raise ValueError("loss weights must be non-negative")
        return self


@dataclass
class LabelTensors:
    """Supervision targets as torch tensors."""

    group: torch.Tensor
    grade: torch.Tensor
    location: torch.Tensor
    pfs_time: torch.Tensor
    pfs_event: torch.Tensor
    os_time: torch.Tensor
    os_event: torch.Tensor

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "LabelTensors":
        arr = cohort.label_arrays()
        return cls(
            group=torch.from_numpy(arr["group"]).long(),
            grade=torch.from_numpy(arr["grade"]).long(),
            location=torch.from_numpy(arr["location"]).long(),
            pfs_time=torch.from_numpy(arr["pfs_time"]).double(),
            pfs_event=torch.from_numpy(arr["pfs_event"]).bool(),
            os_time=torch.from_numpy(arr["os_time"]).double(),
            os_event=torch.from_numpy(arr["os_event"]).bool(),
        )


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood with max-shift stabilization."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {tuple(logits.shape)}")
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("labels and logits disagree on the number of rows")
    if labels.numel() == 0:
        raise ValueError("cross_entropy needs at least one row")
    if bool((labels < 0).any()) or bool((labels >= logits.shape[1]).any()):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    logp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -logp[torch.arange(logits.shape[0]), labels].mean()


def cox_nll(risk: torch.Tensor, times: torch.Tensor, events: torch.Tensor) -> torch.Tensor:
    """Breslow-tied Cox partial negative log-likelihood, averaged over events.

    The risk set for an event at t includes every subject with time >= t
    (simultaneous events included).  With no events the term is zero and a
    CoxNoEventsWarning is raised.  Adding a constant to every risk leaves the
    value unchanged.
    """
    risk = risk.reshape(-1)
    times = times.reshape(-1)
    events = events.reshape(-1).bool()
    if not (risk.shape == times.shape == events.shape):
        raise ValueError("risk, times and events must share one length")
    n_events = int(events.sum())
    if n_events == 0:
        warnings.warn("no observed events in risk set; Cox term is zero", CoxNoEventsWarning)
        return (risk * 0.0).sum()
    at_risk = times.unsqueeze(0) >= times.unsqueeze(1)  # [i, j]: j still at risk at t_i
    scores = risk.unsqueeze(0).expand(len(risk), -1)
    log_denom = torch.logsumexp(scores.masked_fill(~at_risk, -torch.inf), dim=1)
    return -((risk - log_denom)[events].sum()) / n_events


def _smooth_l1_rowsum(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.smooth_l1_loss(a, b, beta=1.0, reduction="none").sum(dim=1)


def feature_distill(
    student_sharp: torch.Tensor,
    teacher_sharp: torch.Tensor,
    student_smooth: torch.Tensor,
    teacher_smooth: torch.Tensor,
    stop_teacher_grad: bool = True,
) -> torch.Tensor:
    """Smooth-L1 alignment of the pooled sharp and smooth vectors.

    Summed over feature dims, averaged over patients; the teacher side is
    detached unless configured otherwise.
    """
    if stop_teacher_grad:
        teacher_sharp = teacher_sharp.detach()
        teacher_smooth = teacher_smooth.detach()
    per_patient = _smooth_l1_rowsum(student_sharp, teacher_sharp) + _smooth_l1_rowsum(
        student_smooth, teacher_smooth
    )
    return per_patient.mean()


def logit_distill(
    student_tasks: dict,
    teacher_tasks: dict,
    tau: float = 2.0,
    kd_direction: str = "student_first",
    stop_teacher_grad: bool = True,
    tau_squared_rescale: bool = False,
) -> torch.Tensor:
    """Temperature-softened KL divergence summed over tasks.

    Each task maps to a (rows, classes) tensor; rows are averaged, classes
    softmaxed.  Direction student_first means KL(student || teacher).
    """
    if set(student_tasks) != set(teacher_tasks):
        raise ValueError("student and teacher task dictionaries must share keys")
    if tau <= 0:
        raise ValueError("tau must be positive")
    total = None
    for name in student_tasks:
        s, t = student_tasks[name], teacher_tasks[name]
        if s.shape != t.shape:
            raise ValueError(f"task '{name}': student shape {tuple(s.shape)} != teacher {tuple(t.shape)}")
        if stop_teacher_grad:
            t = t.detach()
        ls = torch.log_softmax(s / tau, dim=-1)
        lt = torch.log_softmax(t / tau, dim=-1)
        if kd_direction == "student_first":
            kl = (ls.exp() * (ls - lt)).sum(dim=-1)
        elif kd_direction == "teacher_first":
            kl = (lt.exp() * (lt - ls)).sum(dim=-1)
        else:
            raise ValueError(f"unknown kd_direction {kd_direction!r}")
        term = kl.mean()
        if tau_squared_rescale:
            term = term * tau**2
        total = term if total is None else total + term
    if total is None:
        raise ValueError("logit_distill needs at least one task")
    return total


@dataclass
class LossBreakdown:
    """One training step's loss terms (torch scalars until detached)."""

    ce_group: torch.Tensor
    ce_grade: torch.Tensor
    ce_location: torch.Tensor
    cox_pfs: torch.Tensor
    cox_os: torch.Tensor
    feat: torch.Tensor
    logit: torch.Tensor
    total: torch.Tensor

    FIELDS = ("ce_group", "ce_grade", "ce_location", "cox_pfs", "cox_os", "feat", "logit", "total")

    def as_floats(self) -> dict:
        return {name: float(getattr(self, name).detach()) for name in self.FIELDS}


def total_loss(
    teacher_out,
    student_out,
    labels: LabelTensors,
    train_idx,
    config: LossConfig,
) -> LossBreakdown:
    """Combined objective over training patients.

    Task losses are summed over the passes selected by ``task_on`` (the
    teacher pass trains the privileged adapters, the student pass the severed
    path; both share one parameter set).  Distillation always runs student
    against teacher.  With both lambdas zero the distillation columns are
    exactly zero.
    """
    config.validate()
    idx = torch.as_tensor(np.asarray(train_idx), dtype=torch.long)
    if idx.numel() == 0:
        raise ValueError("train_idx must select at least one patient")

    passes = {"both": (teacher_out, student_out), "teacher": (teacher_out,), "student": (student_out,)}[
        config.task_on
    ]
    zero = student_out.risk_os.sum() * 0.0
    ce_group = ce_grade = ce_location = cox_pfs = cox_os = zero
    for out in passes:
        ce_group = ce_group + cross_entropy(out.logits_group[idx], labels.group[idx])
        ce_grade = ce_grade + cross_entropy(out.logits_grade[idx], labels.grade[idx])
        ce_location = ce_location + cross_entropy(out.logits_location[idx], labels.location[idx])
        cox_pfs = cox_pfs + cox_nll(out.risk_pfs[idx], labels.pfs_time[idx], labels.pfs_event[idx])
        cox_os = cox_os + cox_nll(out.risk_os[idx], labels.os_time[idx], labels.os_event[idx])

    if config.lambda_feat > 0:
        feat = feature_distill(
            student_out.z_sharp[idx],
            teacher_out.z_sharp[idx],
            student_out.z_smooth[idx],
            teacher_out.z_smooth[idx],
            stop_teacher_grad=config.stop_teacher_grad,
        )
    else:
        feat = zero
    if config.lambda_logit > 0:
        logit = logit_distill(
            {
                "group": student_out.logits_group[idx],
                "pfs_risk": student_out.risk_pfs[idx].unsqueeze(0),
            },
            {
                "group": teacher_out.logits_group[idx],
                "pfs_risk": teacher_out.risk_pfs[idx].unsqueeze(0),
            },
            tau=config.tau_kd,
            kd_direction=config.kd_direction,
            stop_teacher_grad=config.stop_teacher_grad,
            tau_squared_rescale=config.tau_squared_rescale,
        )
    else:
        logit = zero

    task_sum = ce_group + ce_grade + ce_location + cox_pfs + cox_os
    total = task_sum + config.lambda_feat * feat + config.lambda_logit * logit
    return LossBreakdown(
        ce_group=ce_group,
        ce_grade=ce_grade,
        ce_location=ce_location,
        cox_pfs=cox_pfs,
        cox_os=cox_os,
        feat=feat,
        logit=logit,
        total=total,
    )
