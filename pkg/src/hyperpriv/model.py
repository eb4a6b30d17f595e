"""Shared-parameter hypergraph network with teacher and student passes.

One parameter set serves both passes.  The teacher propagates over the full
topology with all node features; the student runs the same computation on a
severed topology with text and concept inputs replaced by zeros, so its output
cannot depend on privileged data.  Spectral-style propagation per layer is

    X' = phi(Dv^-1/2 H W De^-1 H^T Dv^-1/2 X Theta)

with ReLU between layers, identity after the last, and zeroed normalization
rows for isolated nodes.  Patient vectors come from two pooled projections of
the node embeddings: a mean over the MRI slots (diagnosis) and a gated
attention pool over active nodes (survival).
"""

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .cohort import Cohort, N_MRI_VIEWS
from .hypergraph import (
    HypergraphTopology,
    IncidenceStructure,
    SeveredView,
    MRI_SLOTS,
    SLOT_CLINICAL,
    SLOT_CONCEPT,
    SLOT_TEXT,
    SLOTS_PER_PATIENT,
)
from .seeding import rng

TASK_CLASSES = {"group": 2, "grade": 2, "location": 3}


@dataclass(frozen=True)
class ModelDims:
    """Input dims per modality plus the shared architecture widths."""

    d_c: int
    d_m: int
    d_t: int
    v_c: int
    d_in: int = 32
    d_hidden: int = 64
    d_att: int = 32
    d_out: int = 32
    n_layers: int = 2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")

    @classmethod
    def from_cohort(cls, cohort: Cohort, **overrides) -> "ModelDims":
        cfg = cohort.config
        return cls(d_c=cfg.d_c, d_m=cfg.d_m, d_t=cfg.d_t, v_c=cfg.v_c, **overrides)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _glorot(generator: np.random.Generator, shape) -> torch.Tensor:
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return torch.from_numpy(generator.normal(0.0, std, size=shape))


class SharedEncoder(torch.nn.Module):
    """The single parameter set Theta used by both passes.  All tensors are
    bias-free; risk scores in particular stay shift-free for the partial
    likelihood."""

    def __init__(self, dims: ModelDims, seed: int = 0):
        super().__init__()
        self.dims = dims
        d = dims

        def param(name, *shape):
            g = rng(seed, "init", name)
            self.register_parameter(name, torch.nn.Parameter(_glorot(g, shape)))

        param("adapt_mri", d.d_m, d.d_in)
        param("adapt_clinical", d.d_c, d.d_in)
        param("adapt_text", d.d_t, d.d_in)
        param("adapt_concept", d.v_c, d.d_in)
        for layer in range(d.n_layers):
            fan_in = d.d_in if layer == 0 else d.d_hidden
            param(f"theta_{layer}", fan_in, d.d_hidden)
        param("att_v", d.d_att, d.d_out)
        param("att_u", d.d_att, d.d_out)
        param("att_w", d.d_att)
        param("w_sharp", d.d_hidden, d.d_out)
        param("w_smooth", d.d_hidden, d.d_out)
        param("head_group", d.d_out, TASK_CLASSES["group"])
        param("head_grade", d.d_out, TASK_CLASSES["grade"])
        param("head_location", d.d_out, TASK_CLASSES["location"])
        param("head_pfs", d.d_out)
        param("head_os", d.d_out)
        self.double()

    def thetas(self):
        return [getattr(self, f"theta_{i}") for i in range(self.dims.n_layers)]


class PropagationOperator:
    """Precomputed sparse form of Dv^-1/2 H W De^-1 H^T Dv^-1/2."""

    def __init__(self, topology: HypergraphTopology):
        n, m = topology.n_nodes, topology.n_edges
        self.n_nodes, self.n_edges = n, m
        rows, cols = [], []
        w = np.empty(m)
        d_e = np.empty(m)
        d_v = np.zeros(n)
        for e in topology.edges:
            rows.extend(e.members)
            cols.extend([e.id] * len(e.members))
            w[e.id] = e.weight
            d_e[e.id] = len(e.members)
            d_v[list(e.members)] += e.weight
        if m:
            indices = torch.tensor([rows, cols], dtype=torch.long)
            values = torch.ones(len(rows), dtype=torch.float64)
            self._h = torch.sparse_coo_tensor(
                indices, values, (n, m), check_invariants=False
            ).coalesce()
            self._ht = self._h.transpose(0, 1).coalesce()
        else:
            self._h = self._ht = None
        # Isolated nodes get a zeroed normalization row instead of 1/sqrt(0).
        inv = np.zeros(n)
        nz = d_v > 0
        inv[nz] = 1.0 / np.sqrt(d_v[nz])
        self._dv_isqrt = torch.from_numpy(inv).unsqueeze(1)
        self._edge_scale = torch.from_numpy(w / d_e).unsqueeze(1)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        if self._h is None:
            return torch.zeros_like(x)
        y = self._dv_isqrt * x
        e = torch.sparse.mm(self._ht, y) * self._edge_scale
        return self._dv_isqrt * torch.sparse.mm(self._h, e)


def _as_operator(structure) -> PropagationOperator:
    if isinstance(structure, PropagationOperator):
        return structure
    if isinstance(structure, HypergraphTopology):
        return PropagationOperator(structure)
    if isinstance(structure, SeveredView):
        return PropagationOperator(structure.topology)
    if isinstance(structure, IncidenceStructure):
        # Rebuild a topology-free operator straight from the dense incidence.
        op = PropagationOperator.__new__(PropagationOperator)
        n, m = structure.h.shape
        op.n_nodes, op.n_edges = n, m
        if m:
            with torch.sparse.check_sparse_tensor_invariants(enable=False):
                h = torch.from_numpy(structure.h).to_sparse_coo().coalesce()
            op._h, op._ht = h, h.transpose(0, 1).coalesce()
        else:
            op._h = op._ht = None
        inv = np.zeros(n)
        nz = structure.d_v > 0
        inv[nz] = 1.0 / np.sqrt(structure.d_v[nz])
        op._dv_isqrt = torch.from_numpy(inv).unsqueeze(1)
        op._edge_scale = torch.from_numpy(structure.w / structure.d_e).unsqueeze(1)
        return op
    raise TypeError(f"cannot build a propagation operator from {type(structure).__name__}")


def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.double(), False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def hgnn_layer(x, structure, theta, activation: str = "relu"):
    """One propagation layer; accepts numpy or torch inputs (returns like kind).

    ``structure`` may be an IncidenceStructure, a topology/severed view, or a
    prebuilt PropagationOperator.
    """
    xt, was_numpy = _to_tensor(x)
    if not torch.isfinite(xt).all():
        raise ValueError("hgnn_layer: non-finite input features")
    theta_t, _ = _to_tensor(theta)
    op = _as_operator(structure)
    if xt.shape[0] != op.n_nodes:
        raise ValueError(f"feature rows ({xt.shape[0]}) != topology nodes ({op.n_nodes})")
    out = op.apply(xt @ theta_t)
    if activation == "relu":
        out = torch.relu(out)
    elif activation != "identity":
        raise ValueError(f"unknown activation '{activation}'")
    return out.numpy() if was_numpy else out


def gated_attention(z: torch.Tensor, mask: torch.Tensor, v, u, w):
    """Gated attention pool over the slot axis.

    z: (N, S, d); mask: (N, S) boolean, True where the node participates.
    Scores are ``w . (tanh(V z) * sigmoid(U z))``; masked slots get exactly
    zero attention.  Returns (pooled (N, d), alpha (N, S)).
    """
    if not bool(mask.any(dim=1).all()):
        raise ValueError("gated_attention: every patient needs at least one active node")
    gate = torch.tanh(z @ v.T) * torch.sigmoid(z @ u.T)
    scores = gate @ w
    scores = scores.masked_fill(~mask, -torch.inf)
    alpha = torch.softmax(scores, dim=1)
    pooled = torch.einsum("ns,nsd->nd", alpha, z)
    return pooled, alpha


@dataclass
class FeatureSet:
    """Per-modality input tensors for one cohort (float64)."""

    mri: torch.Tensor  # (N, 5, d_m)
    clinical: torch.Tensor  # (N, d_c)
    text: torch.Tensor  # (N, d_t)
    concept: torch.Tensor  # (N, v_c)

    def __post_init__(self):
        n = self.mri.shape[0]
        if self.mri.shape[1] != N_MRI_VIEWS:
            raise ValueError(f"mri must have {N_MRI_VIEWS} views per patient")
        for name in ("clinical", "text", "concept"):
            t = getattr(self, name)
            if t.shape[0] != n:
                raise ValueError(f"{name} has {t.shape[0]} rows, expected {n}")
        for name in ("mri", "clinical", "text", "concept"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} features contain non-finite values")

    @property
    def n_patients(self) -> int:
        return int(self.mri.shape[0])

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "FeatureSet":
        return cls(
            mri=torch.from_numpy(cohort.mri_array()),
            clinical=torch.from_numpy(cohort.clinical_array()),
            text=torch.from_numpy(cohort.text_array()),
            concept=torch.from_numpy(cohort.concept_array()),
        )


@dataclass
class ForwardOutput:
    """Everything one pass produces.

    ``z_sharp`` / ``z_smooth`` are the patient-level disentangled vectors the
    distillation losses consume; they alias the diagnostic and survival pools.
    """

    node_embeddings: torch.Tensor  # (8N, d_hidden)
    node_sharp: torch.Tensor  # (8N, d_out)
    node_smooth: torch.Tensor  # (8N, d_out)
    alpha: torch.Tensor  # (N, 8); exact zeros at inactive slots
    h_diag: torch.Tensor  # (N, d_out)
    h_surv: torch.Tensor  # (N, d_out)
    logits_group: torch.Tensor  # (N, 2)
    logits_grade: torch.Tensor  # (N, 2)
    logits_location: torch.Tensor  # (N, 3)
    risk_pfs: torch.Tensor  # (N,)
    risk_os: torch.Tensor  # (N,)

    @property
    def z_sharp(self) -> torch.Tensor:
        return self.h_diag

    @property
    def z_smooth(self) -> torch.Tensor:
        return self.h_surv


def forward(params: SharedEncoder, features: FeatureSet, structure, pass_kind: str) -> ForwardOutput:
    """Run one pass.

    pass_kind "teacher" takes the full HypergraphTopology and uses every node;
    "student" takes a SeveredView, feeds zeros for text and concept inputs and
    pools over the surviving slots only.  ``structure`` may be None for the
    propagation-free (per-node affine) variant, or a prebuilt
    PropagationOperator for either pass.
    """
    n = features.n_patients
    d = params.dims

    if pass_kind == "student":
        if isinstance(structure, HypergraphTopology):
            raise TypeError("student pass requires a SeveredView, not a full topology")
    elif pass_kind != "teacher":
        raise ValueError(f"pass_kind must be 'teacher' or 'student', got {pass_kind!r}")
    student = pass_kind == "student"

    op = None
    if structure is not None:
        op = _as_operator(structure)
        if op.n_nodes != n * SLOTS_PER_PATIENT:
            raise ValueError(
                f"topology covers {op.n_nodes} nodes but features describe "
                f"{n * SLOTS_PER_PATIENT}"
            )

    # Slot-wise input assembly; privileged slots are zeros by construction in
    # the student pass, so its graph never touches text or concept tensors.
    zeros = features.mri.new_zeros((n, d.d_in))
    mri_in = features.mri @ params.adapt_mri  # (N, 5, d_in)
    x0 = torch.stack(
        [
            *mri_in.unbind(dim=1),
            features.clinical @ params.adapt_clinical,
            zeros if student else features.text @ params.adapt_text,
            zeros if student else features.concept @ params.adapt_concept,
        ],
        dim=1,
    )
    x = x0.reshape(n * SLOTS_PER_PATIENT, d.d_in)

    thetas = params.thetas()
    for i, theta in enumerate(thetas):
        x = x @ theta
        if op is not None:
            x = op.apply(x)
        if i < len(thetas) - 1:
            x = torch.relu(x)
    node_embeddings = x

    node_sharp = node_embeddings @ params.w_sharp
    node_smooth = node_embeddings @ params.w_smooth

    sharp = node_sharp.reshape(n, SLOTS_PER_PATIENT, d.d_out)
    smooth = node_smooth.reshape(n, SLOTS_PER_PATIENT, d.d_out)
    h_diag = sharp[:, list(MRI_SLOTS)].mean(dim=1)

    active = torch.ones(n, SLOTS_PER_PATIENT, dtype=torch.bool)
    if student:
        active[:, [SLOT_TEXT, SLOT_CONCEPT]] = False
    h_surv, alpha = gated_attention(smooth, active, params.att_v, params.att_u, params.att_w)

    return ForwardOutput(
        node_embeddings=node_embeddings,
        node_sharp=node_sharp,
        node_smooth=node_smooth,
        alpha=alpha,
        h_diag=h_diag,
        h_surv=h_surv,
        logits_group=h_diag @ params.head_group,
        logits_grade=h_diag @ params.head_grade,
        logits_location=h_diag @ params.head_location,
        risk_pfs=h_surv @ params.head_pfs,
        risk_os=h_surv @ params.head_os,
    )


def save_params(params: SharedEncoder, path) -> None:
    """Named parameter arrays plus a dims header."""
    arrays = {name: tensor.detach().numpy() for name, tensor in params.named_parameters()}
    arrays["__dims__"] = np.frombuffer(
        json.dumps(params.dims.to_dict()).encode(), dtype=np.uint8
    )
    np.savez(Path(path), **arrays)


def load_params(path) -> SharedEncoder:
    """Rebuild a SharedEncoder, verifying every array shape against the header."""
    with np.load(Path(path)) as data:
        dims = ModelDims(**json.loads(bytes(data["__dims__"]).decode()))
        params = SharedEncoder(dims)
        for name, tensor in params.named_parameters():
            if name not in data:
                raise ValueError(f"checkpoint missing parameter '{name}'")
            arr = data[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"checkpoint parameter '{name}' has shape {arr.shape}, "
                    f"expected {tuple(tensor.shape)}"
                )
            with torch.no_grad():
                tensor.copy_(torch.from_numpy(arr))
    return params
