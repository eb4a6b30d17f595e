"""Synthetic ependymoma-like cohort generation and (de)serialization.

A latent molecular subtype (PFA aggressive, PFB indolent) drives every
modality: five MRI view embeddings share one pair of class means, a dense text
embedding separates the classes along its own direction, sparse concept flags
fire with subtype-conditional probabilities, and exponential survival times use
subtype base hazards scaled multiplicatively by the active concepts.  Censoring
is uniform with its horizon solved so the expected pooled censor fraction hits
the configured rate.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng
from .validation import ConfigError, check_dim, check_positive, check_probability

GROUPS = ("PFA", "PFB")
GRADES = ("II", "III")
N_LOCATIONS = 3
N_MRI_VIEWS = 5

# Smallest cohort for which the downstream default KNN topology (k = 10) is
# well posed; generation refuses anything smaller.
DEFAULT_K_KNN = 10
MIN_PATIENTS = 2 * DEFAULT_K_KNN


class CohortFormatError(ValueError):
    """A cohort file violates the documented JSON schema."""


def _default_location_probs():
    return {"PFA": [0.5, 0.3, 0.2], "PFB": [0.2, 0.3, 0.5]}


def _default_concept_probs():
    return {
        "PFA": [0.7, 0.6, 0.5, 0.35, 0.2, 0.1],
        "PFB": [0.1, 0.2, 0.3, 0.45, 0.6, 0.7],
    }


def _default_base_hazards():
    return {
        "PFA": {"progression": 0.10, "os": 0.055},
        "PFB": {"progression": 0.020, "os": 0.010},
    }


def _default_multipliers():
    return [2.2, 1.8, 1.4, 1.0, 0.7, 0.5]


@dataclass
class GenConfig:
    """Generator knobs; every probability lives in [0, 1], every hazard > 0."""

    n_patients: int = 200
    d_c: int = 8
    d_m: int = 32
    d_t: int = 32
    v_c: int = 6
    subtype_prevalence: float = 0.5
    mri_signal: float = 2.0
    text_signal: float = 6.0
    noise_sigma: float = 1.0
    mri_artifact_dims: int = 8
    mri_artifact_sigma: float = 5.0
    concept_mri_signal: float = 0.4
    location_probs: dict = field(default_factory=_default_location_probs)
    concept_probs: dict = field(default_factory=_default_concept_probs)
    concept_hazard_multipliers: list = field(default_factory=_default_multipliers)
    base_hazards: dict = field(default_factory=_default_base_hazards)
    censor_rate: float = 0.2
    grade_flip_prob: float = 0.25
    seed: int = 0

    def validate(self):
        check_dim("n_patients", self.n_patients, minimum=2)
        check_dim("d_c", self.d_c)
        check_dim("d_m", self.d_m)
        check_dim("d_t", self.d_t)
        check_dim("v_c", self.v_c, minimum=1)
        check_probability("subtype_prevalence", self.subtype_prevalence)
        check_probability("censor_rate", self.censor_rate)
        check_probability("grade_flip_prob", self.grade_flip_prob)
        if self.mri_signal < 0 or self.text_signal < 0:
            raise ConfigError("signal strengths must be non-negative")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0 <= self.mri_artifact_dims < self.d_m:
            raise ConfigError("mri_artifact_dims must satisfy 0 <= dims < d_m")
        if self.mri_artifact_sigma < 0:
            raise ConfigError("mri_artifact_sigma must be non-negative")
        if self.concept_mri_signal < 0:
            raise ConfigError("concept_mri_signal must be non-negative")
        for g in GROUPS:
            locs = self.location_probs[g]
            if len(locs) != N_LOCATIONS:
                raise ConfigError(f"location_probs[{g}] must have {N_LOCATIONS} entries")
            for p in locs:
                check_probability(f"location_probs[{g}]", p)
            if abs(sum(locs) - 1.0) > 1e-9:
                raise ConfigError(f"location_probs[{g}] must sum to 1")
            cps = self.concept_probs[g]
            if len(cps) != self.v_c:
                raise ConfigError(f"concept_probs[{g}] must have v_c={self.v_c} entries")
            for p in cps:
                check_probability(f"concept_probs[{g}]", p)
            for name, h in self.base_hazards[g].items():
                check_positive(f"base_hazards[{g}][{name}]", h)
        if len(self.concept_hazard_multipliers) != self.v_c:
            raise ConfigError("concept_hazard_multipliers must have v_c entries")
        for m in self.concept_hazard_multipliers:
            check_positive("concept_hazard_multipliers", m)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig fields: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class PatientRecord:
    """One synthetic patient; arrays are float64, flags boolean."""

    id: int
    age: float
    sex: int
    location: int
    clinical_vec: np.ndarray
    mri_views: np.ndarray  # (5, d_m)
    text_dense: np.ndarray  # (d_t,)
    concept_flags: np.ndarray  # (v_c,) bool
    group_label: str
    grade_label: str
    pfs_time: float
    pfs_event: bool
    os_time: float
    os_event: bool


@dataclass
class Cohort:
    """A generated cohort plus the config that produced it."""

    config: GenConfig
    patients: list

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.patients)

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    def validate(self):
        if not self.patients:
            raise CohortFormatError("cohort is empty")
        for i, p in enumerate(self.patients):
            if p.id != i:
                raise CohortFormatError(f"patient ids must be contiguous from 0; index {i} has id {p.id}")
            if p.mri_views.shape != (N_MRI_VIEWS, self.config.d_m):
                raise CohortFormatError(
                    f"patient {p.id}: mri_views must have shape (5, {self.config.d_m})"
                )
            if p.text_dense.shape != (self.config.d_t,):
                raise CohortFormatError(f"patient {p.id}: text_dense must have length {self.config.d_t}")
            if p.clinical_vec.shape != (self.config.d_c,):
                raise CohortFormatError(f"patient {p.id}: clinical_vec must have length {self.config.d_c}")
            if p.concept_flags.shape != (self.config.v_c,):
                raise CohortFormatError(f"patient {p.id}: concept_flags must have length {self.config.v_c}")
            if not (0 < p.pfs_time <= p.os_time):
                raise CohortFormatError(
                    f"patient {p.id}: requires 0 < pfs_time <= os_time, "
                    f"got pfs={p.pfs_time}, os={p.os_time}"
                )
            if p.group_label not in GROUPS:
                raise CohortFormatError(f"patient {p.id}: group must be one of {GROUPS}")
            if p.grade_label not in GRADES:
                raise CohortFormatError(f"patient {p.id}: grade must be one of {GRADES}")
            if not 0 <= p.location < N_LOCATIONS:
                raise CohortFormatError(f"patient {p.id}: location must lie in [0, {N_LOCATIONS})")
        return self

    # --- dense views used by graph construction and the model ---

    def mri_array(self) -> np.ndarray:
        """(N, 5, d_m) stack of MRI view embeddings."""
        return np.stack([p.mri_views for p in self.patients])

    def clinical_array(self) -> np.ndarray:
        return np.stack([p.clinical_vec for p in self.patients])

    def text_array(self) -> np.ndarray:
        return np.stack([p.text_dense for p in self.patients])

    def concept_array(self) -> np.ndarray:
        """(N, v_c) float copy of the concept flags."""
        return np.stack([p.concept_flags for p in self.patients]).astype(np.float64)

    def concept_flags_array(self) -> np.ndarray:
        return np.stack([p.concept_flags for p in self.patients])

    def label_arrays(self) -> dict:
        """Supervision targets keyed by task name."""
        return {
            "group": np.array([GROUPS.index(p.group_label) for p in self.patients]),
            "grade": np.array([GRADES.index(p.grade_label) for p in self.patients]),
            "location": np.array([p.location for p in self.patients]),
            "pfs_time": np.array([p.pfs_time for p in self.patients]),
            "pfs_event": np.array([p.pfs_event for p in self.patients]),
            "os_time": np.array([p.os_time for p in self.patients]),
            "os_event": np.array([p.os_event for p in self.patients]),
        }

    def with_mri(self, views: np.ndarray) -> "Cohort":
        """Copy of the cohort with MRI view embeddings replaced by ``views`` (N, 5, d)."""
        if views.shape[0] != len(self.patients) or views.shape[1] != N_MRI_VIEWS:
            raise ValueError(f"views must have shape (N, {N_MRI_VIEWS}, d), got {views.shape}")
        config = dataclasses.replace(self.config, d_m=int(views.shape[2]))
        patients = [
            dataclasses.replace(p, mri_views=np.array(views[i], dtype=np.float64))
            for i, p in enumerate(self.patients)
        ]
        return Cohort(config=config, patients=patients)

    def take(self, n: int) -> "Cohort":
        """First ``n`` patients as a standalone cohort (ids stay contiguous)."""
        if not 0 < n <= len(self.patients):
            raise ValueError(f"cannot take {n} of {len(self.patients)} patients")
        config = dataclasses.replace(self.config, n_patients=n)
        return Cohort(config=config, patients=[dataclasses.replace(p) for p in self.patients[:n]])


def _solve_censor_horizon(rates: np.ndarray, target: float) -> float:
    """Uniform-censoring horizon M with pooled expected censor fraction ``target``.

    For T ~ Exp(rate) and C ~ U(0, M), P(C < T) = (1 - exp(-rate*M)) / (rate*M),
    which decreases monotonically in M; bisection is exact enough here.
    """

    def pooled(M):
        lm = rates * M
        return float(np.mean(-np.expm1(-lm) / lm))

    lo, hi = 1e-9, 1.0
    while pooled(hi) > target:
        hi *= 2.0
        if hi > 1e12:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if pooled(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_cohort(config: GenConfig) -> Cohort:
    """Draw a full cohort deterministically from ``config`` and its seed."""
    config.validate()
    n = config.n_patients
    if n < MIN_PATIENTS:
        raise ConfigError(
            f"n_patients={n} is too small to build KNN topologies with "
            f"k={DEFAULT_K_KNN}; need at least {MIN_PATIENTS}"
        )
    seed = config.seed

    subtype = (rng(seed, "subtype").random(n) < config.subtype_prevalence).astype(int)  # 1 = PFA
    group = np.where(subtype == 1, "PFA", "PFB")

    # Class-mean directions shared across views / modalities.  The MRI mean
    # lives in the leading "clean" coordinates; the trailing artifact block
    # carries high-variance per-view noise and no class signal, so cosine
    # similarity on raw features is dominated by nuisance until refined.
    n_clean = config.d_m - config.mri_artifact_dims
    u_mri = np.zeros(config.d_m)
    u_clean = rng(seed, "mri_direction").standard_normal(n_clean)
    u_mri[:n_clean] = u_clean / np.linalg.norm(u_clean)
    u_text = rng(seed, "text_direction").standard_normal(config.d_t)
    u_text /= np.linalg.norm(u_text)
    sign = np.where(subtype == 1, 1.0, -1.0)

    probs = np.stack(
        [np.asarray(config.concept_probs["PFB"]), np.asarray(config.concept_probs["PFA"])]
    )
    flags = rng(seed, "concepts").random((n, config.v_c)) < probs[subtype]

    mri_noise = rng(seed, "mri_noise").standard_normal((n, N_MRI_VIEWS, config.d_m))
    mri = 0.5 * config.mri_signal * sign[:, None, None] * u_mri[None, None, :]
    mri = mri + config.noise_sigma * mri_noise
    if config.concept_mri_signal > 0:
        # Active concepts leave a faint imaging trace along per-concept
        # directions in the clean block: visible in principle, but weak
        # enough that censored events alone are a poor teacher for it.
        u_concepts = rng(seed, "concept_directions").standard_normal((config.v_c, n_clean))
        u_concepts /= np.linalg.norm(u_concepts, axis=1, keepdims=True)
        bump = flags.astype(float) @ u_concepts  # (n, n_clean)
        mri[:, :, :n_clean] += config.concept_mri_signal * bump[:, None, :]
    if config.mri_artifact_dims > 0:
        artifact = rng(seed, "mri_artifact").standard_normal(
            (n, N_MRI_VIEWS, config.mri_artifact_dims)
        )
        mri[:, :, n_clean:] += config.mri_artifact_sigma * artifact

    text_noise = rng(seed, "text_noise").standard_normal((n, config.d_t))
    text = 0.5 * config.text_signal * sign[:, None] * u_text[None, :] + config.noise_sigma * text_noise

    age = np.clip(rng(seed, "age").normal(8.0, 3.0, n), 0.5, None)
    sex = (rng(seed, "sex").random(n) < 0.5).astype(int)
    loc_probs = np.stack(
        [np.asarray(config.location_probs["PFB"]), np.asarray(config.location_probs["PFA"])]
    )
    loc_u = rng(seed, "location").random(n)
    location = (loc_u[:, None] >= np.cumsum(loc_probs[subtype], axis=1)).sum(axis=1)
    location = np.minimum(location, N_LOCATIONS - 1)

    clin = np.zeros((n, config.d_c))
    clin[:, 0] = (age - 8.0) / 3.0
    clin[:, 1] = sex
    clin[np.arange(n), 2 + location] = 1.0
    pad = config.d_c - (2 + N_LOCATIONS)
    if pad > 0:
        clin[:, 2 + N_LOCATIONS :] = rng(seed, "clinical_noise").standard_normal((n, pad))

    flip = rng(seed, "grade_flip").random(n) < config.grade_flip_prob
    # PFA tumours present as grade III, PFB as grade II, with label noise.
    grade_idx = np.where(subtype == 1, 1, 0)
    grade_idx = np.where(flip, 1 - grade_idx, grade_idx)
    grade = np.array(GRADES)[grade_idx]

    mult = np.asarray(config.concept_hazard_multipliers)
    log_scale = flags @ np.log(mult)
    base_prog = np.where(
        subtype == 1,
        config.base_hazards["PFA"]["progression"],
        config.base_hazards["PFB"]["progression"],
    )
    base_os = np.where(
        subtype == 1, config.base_hazards["PFA"]["os"], config.base_hazards["PFB"]["os"]
    )
    lam_prog = base_prog * np.exp(log_scale)
    lam_os = base_os * np.exp(log_scale)

    t_os = rng(seed, "os_time").exponential(1.0, n) / lam_os
    t_prog = rng(seed, "progression_time").exponential(1.0, n) / lam_prog
    t_pfs = np.minimum(t_prog, t_os)

    if config.censor_rate > 0.0:
        horizon = _solve_censor_horizon(
            np.concatenate([lam_prog + lam_os, lam_os]), config.censor_rate
        )
        censor = rng(seed, "censor").uniform(0.0, horizon, n)
        obs_pfs = np.minimum(t_pfs, censor)
        ev_pfs = t_pfs <= censor
        obs_os = np.minimum(t_os, censor)
        ev_os = t_os <= censor
    else:
        obs_pfs, ev_pfs = t_pfs, np.ones(n, dtype=bool)
        obs_os, ev_os = t_os, np.ones(n, dtype=bool)

    patients = [
        PatientRecord(
            id=i,
            age=float(age[i]),
            sex=int(sex[i]),
            location=int(location[i]),
            clinical_vec=clin[i].copy(),
            mri_views=mri[i].copy(),
            text_dense=text[i].copy(),
            concept_flags=flags[i].copy(),
            group_label=str(group[i]),
            grade_label=str(grade[i]),
            pfs_time=float(obs_pfs[i]),
            pfs_event=bool(ev_pfs[i]),
            os_time=float(obs_os[i]),
            os_event=bool(ev_os[i]),
        )
        for i in range(n)
    ]
    return Cohort(config=config, patients=patients)


# --- JSON serialization ---------------------------------------------------


def _patient_to_dict(p: PatientRecord) -> dict:
    return {
        "id": p.id,
        "age": p.age,
        "sex": p.sex,
        "location": p.location,
        "clinical_vec": p.clinical_vec.tolist(),
        "mri_views": p.mri_views.tolist(),
        "text_dense": p.text_dense.tolist(),
        "concept_flags": [bool(f) for f in p.concept_flags],
        "group": p.group_label,
        "grade": p.grade_label,
        "pfs": {"time": p.pfs_time, "event": bool(p.pfs_event)},
        "os": {"time": p.os_time, "event": bool(p.os_event)},
    }


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise CohortFormatError(f"{where}: missing field '{key}'")
    return mapping[key]


def _patient_from_dict(data: dict, index: int) -> PatientRecord:
    where = f"patient {index}"
    try:
        pfs = _require(data, "pfs", where)
        osr = _require(data, "os", where)
        return PatientRecord(
            id=int(_require(data, "id", where)),
            age=float(_require(data, "age", where)),
            sex=int(_require(data, "sex", where)),
            location=int(_require(data, "location", where)),
            clinical_vec=np.asarray(_require(data, "clinical_vec", where), dtype=np.float64),
            mri_views=np.asarray(_require(data, "mri_views", where), dtype=np.float64),
            text_dense=np.asarray(_require(data, "text_dense", where), dtype=np.float64),
            concept_flags=np.asarray(_require(data, "concept_flags", where), dtype=bool),
            group_label=str(_require(data, "group", where)),
            grade_label=str(_require(data, "grade", where)),
            pfs_time=float(_require(pfs, "time", where + ".pfs")),
            pfs_event=bool(_require(pfs, "event", where + ".pfs")),
            os_time=float(_require(osr, "time", where + ".os")),
            os_event=bool(_require(osr, "event", where + ".os")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CohortFormatError):
            raise
        raise CohortFormatError(f"{where}: malformed value ({exc})") from exc


def save_cohort(cohort: Cohort, path) -> None:
    payload = {
        "config": cohort.config.to_dict(),
        "patients": [_patient_to_dict(p) for p in cohort.patients],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_cohort(path) -> Cohort:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"{path}: not valid JSON ({exc})") from exc
    if "config" not in payload:
        raise CohortFormatError(f"{path}: missing field 'config'")
    if "patients" not in payload:
        raise CohortFormatError(f"{path}: missing field 'patients'")
    config = GenConfig.from_dict(payload["config"])
    patients = [_patient_from_dict(p, i) for i, p in enumerate(payload["patients"])]
    return Cohort(config=config, patients=patients)
