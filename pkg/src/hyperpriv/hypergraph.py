"""Patient hypergraph construction, severing and incidence algebra.

Each patient owns eight nodes in a fixed slot layout (five MRI views, one
clinical, one dense-text, one sparse-concept node); flat node index is
``patient_id * 8 + slot``.  Five hyperedge families connect them: per-patient
intra edges, cosine KNN edges over visual / clinical / text summaries, and one
edge per active concept.  Text and concept derived structure is privileged:
``sever`` drops those edge families and masks the corresponding node slots for
the student pass.
"""

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .validation import check_finite

SLOTS_PER_PATIENT = 8
MRI_SLOTS = (0, 1, 2, 3, 4)
SLOT_CLINICAL = 5
SLOT_TEXT = 6
SLOT_CONCEPT = 7
PRIVILEGED_SLOTS = (SLOT_TEXT, SLOT_CONCEPT)


class EdgeKind(str, Enum):
    INTRA = "intra"
    VISUAL_KNN = "visual_knn"
    CLINICAL_KNN = "clinical_knn"
    TEXT_KNN = "text_knn"
    CONCEPT = "concept"

    @property
    def privileged(self) -> bool:
        return self in (EdgeKind.TEXT_KNN, EdgeKind.CONCEPT)


# Slot(s) contributed per member patient of each KNN family.
_KNN_SLOTS = {
    EdgeKind.VISUAL_KNN: MRI_SLOTS,
    EdgeKind.CLINICAL_KNN: (SLOT_CLINICAL,),
    EdgeKind.TEXT_KNN: (SLOT_TEXT,),
}


@dataclass(frozen=True)
class NodeIndex:
    """(patient, slot) coordinate of one node."""

    patient_id: int
    slot: int

    def __post_init__(self):
        if not 0 <= self.slot < SLOTS_PER_PATIENT:
            raise ValueError(f"slot must lie in [0, {SLOTS_PER_PATIENT}), got {self.slot}")
        if self.patient_id < 0:
            raise ValueError(f"patient_id must be non-negative, got {self.patient_id}")

    def flat(self) -> int:
        return self.patient_id * SLOTS_PER_PATIENT + self.slot

    @classmethod
    def from_flat(cls, index: int) -> "NodeIndex":
        return cls(index // SLOTS_PER_PATIENT, index % SLOTS_PER_PATIENT)


@dataclass(frozen=True)
class Hyperedge:
    """A weighted set of at least two distinct nodes (flat indices, sorted)."""

    id: int
    kind: EdgeKind
    members: tuple
    weight: float = 1.0

    def __post_init__(self):
        members = tuple(sorted(set(int(m) for m in self.members)))
        if len(members) < 2:
            raise ValueError(f"edge {self.id}: needs at least 2 distinct members, got {members}")
        if any(m < 0 for m in members):
            raise ValueError(f"edge {self.id}: negative member index")
        if not self.weight > 0:
            raise ValueError(f"edge {self.id}: weight must be positive, got {self.weight}")
        object.__setattr__(self, "members", members)


@dataclass(frozen=True)
class HypergraphTopology:
    """Immutable edge list over ``n_nodes`` flat node indices."""

    n_nodes: int
    edges: tuple

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        for expected, e in enumerate(self.edges):
            if e.id != expected:
                raise ValueError(f"edge ids must be contiguous from 0; position {expected} has id {e.id}")
            if e.members[-1] >= self.n_nodes:
                raise ValueError(
                    f"edge {e.id}: member {e.members[-1]} out of range for {self.n_nodes} nodes"
                )

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edges_of_kind(self, kind: EdgeKind) -> tuple:
        return tuple(e for e in self.edges if e.kind == kind)


@dataclass(frozen=True)
class SeveredView:
    """Student view: common-edge topology plus the node blind mask.

    ``blind_mask`` multiplies node inputs: True keeps a node's features,
    False zeroes them.  It is False exactly at the text and concept slots
    of every patient.
    """

    topology: HypergraphTopology
    blind_mask: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes


def blind_mask_for(n_patients: int) -> np.ndarray:
    """Multiplicative node mask: False at every privileged slot."""
    mask = np.ones(n_patients * SLOTS_PER_PATIENT, dtype=bool)
    for slot in PRIVILEGED_SLOTS:
        mask[slot::SLOTS_PER_PATIENT] = False
    return mask


def _renumber(edges) -> tuple:
    return tuple(replace(e, id=i) for i, e in enumerate(edges))


def build_intra_edges(n_patients: int) -> list:
    """One edge per patient joining all eight of its nodes."""
    base = np.arange(SLOTS_PER_PATIENT)
    return [
        Hyperedge(id=i, kind=EdgeKind.INTRA, members=tuple(i * SLOTS_PER_PATIENT + base))
        for i in range(n_patients)
    ]


def knn_neighbors(features: np.ndarray, k: int) -> np.ndarray:
    """(N, k) cosine nearest neighbours; ties broken toward the lower index.

    Self-similarity is excluded.  Raises on zero-norm rows (cosine undefined).
    """
    features = check_finite("knn features", np.asarray(features, dtype=np.float64))
    n = features.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n_patients, got k={k}, n={n}")
    norms = np.linalg.norm(features, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot build cosine KNN: patient {zero[0]} has a zero-norm feature vector")
    unit = features / norms[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    out = np.empty((n, k), dtype=int)
    idx = np.arange(n)
    for i in range(n):
        # Stable order: descending similarity, then ascending patient id.
        order = np.lexsort((idx, -sims[i]))
        out[i] = order[:k]
    return out


def build_knn_edges(features: np.ndarray, k: int, kind: EdgeKind) -> list:
    """One edge per anchor patient over its k cosine neighbours.

    Member nodes are the family's slots of the anchor and each neighbour:
    all five MRI slots for visual edges, the single clinical or text slot
    otherwise.
    """
    if kind not in _KNN_SLOTS:
        raise ValueError(f"{kind} is not a KNN edge family")
    slots = np.asarray(_KNN_SLOTS[kind])
    neighbors = knn_neighbors(features, k)
    edges = []
    for anchor, nbrs in enumerate(neighbors):
        patients = np.concatenate(([anchor], nbrs))
        members = (patients[:, None] * SLOTS_PER_PATIENT + slots[None, :]).ravel()
        edges.append(Hyperedge(id=anchor, kind=kind, members=tuple(members)))
    return edges


def build_concept_edges(concept_flags: np.ndarray) -> list:
    """One edge per concept over the concept slots of flagged patients.

    Concepts active in fewer than two patients yield no edge.
    """
    flags = np.asarray(concept_flags, dtype=bool)
    edges = []
    for c in range(flags.shape[1]):
        carriers = np.flatnonzero(flags[:, c])
        if carriers.size < 2:
            continue
        members = tuple(carriers * SLOTS_PER_PATIENT + SLOT_CONCEPT)
        edges.append(Hyperedge(id=len(edges), kind=EdgeKind.CONCEPT, members=members))
    return edges


def _common_edges(cohort, k: int) -> list:
    visual = cohort.mri_array().mean(axis=1)  # per-patient mean over the 5 views
    edges = build_intra_edges(cohort.n_patients)
    edges += build_knn_edges(visual, k, EdgeKind.VISUAL_KNN)
    edges += build_knn_edges(cohort.clinical_array(), k, EdgeKind.CLINICAL_KNN)
    return edges


def assemble_teacher(cohort, k: int = 10) -> HypergraphTopology:
    """Full topology: intra, visual/clinical/text KNN, then concept edges."""
    edges = _common_edges(cohort, k)
    edges += build_knn_edges(cohort.text_array(), k, EdgeKind.TEXT_KNN)
    edges += build_concept_edges(cohort.concept_flags_array())
    return HypergraphTopology(
        n_nodes=cohort.n_patients * SLOTS_PER_PATIENT, edges=_renumber(edges)
    )


def assemble_student(cohort, k: int = 10) -> SeveredView:
    """Student view built from common modalities alone.

    Equals ``sever(assemble_teacher(cohort, k))`` but never reads text or
    concept data, which makes the inference path's independence from
    privileged inputs structural rather than incidental.
    """
    edges = _common_edges(cohort, k)
    topology = HypergraphTopology(
        n_nodes=cohort.n_patients * SLOTS_PER_PATIENT, edges=_renumber(edges)
    )
    return SeveredView(topology=topology, blind_mask=blind_mask_for(cohort.n_patients))


def sever(topology: HypergraphTopology) -> SeveredView:
    """Drop privileged edge families and mask privileged node slots."""
    kept = _renumber(e for e in topology.edges if not e.kind.privileged)
    n_patients = topology.n_nodes // SLOTS_PER_PATIENT
    return SeveredView(
        topology=HypergraphTopology(n_nodes=topology.n_nodes, edges=kept),
        blind_mask=blind_mask_for(n_patients),
    )


@dataclass(frozen=True)
class IncidenceStructure:
    """Dense incidence H (n_nodes × n_edges) with weights and degree vectors.

    ``d_v[v] = sum_e w_e H[v, e]`` (weighted node degree) and ``d_e[e] =
    |members(e)|`` (unweighted edge cardinality).
    """

    h: np.ndarray
    w: np.ndarray
    d_v: np.ndarray
    d_e: np.ndarray


def incidence(topology: HypergraphTopology) -> IncidenceStructure:
    h = np.zeros((topology.n_nodes, topology.n_edges))
    w = np.empty(topology.n_edges)
    for e in topology.edges:
        h[list(e.members), e.id] = 1.0
        w[e.id] = e.weight
    d_v = h @ w
    d_e = h.sum(axis=0)
    return IncidenceStructure(h=h, w=w, d_v=d_v, d_e=d_e)


def save_topology_csv(topology: HypergraphTopology, path) -> None:
    """Edge list as ``edge_id,kind,weight,members`` with ';'-joined flat indices."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["edge_id", "kind", "weight", "members"])
        for e in topology.edges:
            writer.writerow([e.id, e.kind.value, repr(e.weight), ";".join(map(str, e.members))])


def load_topology_csv(path) -> HypergraphTopology:
    edges = []
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            edges.append(
                Hyperedge(
                    id=int(row["edge_id"]),
                    kind=EdgeKind(row["kind"]),
                    members=tuple(int(m) for m in row["members"].split(";")),
                    weight=float(row["weight"]),
                )
            )
    n_nodes = max(e.members[-1] for e in edges) + 1
    # Round up to whole patients so flat indices stay interpretable.
    n_nodes = -(-n_nodes // SLOTS_PER_PATIENT) * SLOTS_PER_PATIENT
    return HypergraphTopology(n_nodes=n_nodes, edges=tuple(edges))
