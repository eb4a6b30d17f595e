"""Generator determinism, signal structure, survival calibration, and the
JSON persistence format."""

import dataclasses
import json

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from hyperpriv.cohort import (
    Cohort,
    CohortFormatError,
    GenConfig,
    generate_cohort,
    load_cohort,
    save_cohort,
)
from hyperpriv.validation import ConfigError

from conftest import small_gen_config


def _split_half_probe(x, y, seed):
    rs = np.random.default_rng(seed)
    idx = rs.permutation(len(y))
    half = len(y) // 2
    model = LogisticRegression(max_iter=2000).fit(x[idx[:half]], y[idx[:half]])
    return model.score(x[idx[half:]], y[idx[half:]])


# ---------------------------------------------------------------------------
# determinism and validation
# ---------------------------------------------------------------------------


def test_same_seed_is_byte_identical(tmp_path):
    config = small_gen_config()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_cohort(generate_cohort(config), a)
    save_cohort(generate_cohort(dataclasses.replace(config)), b)
    assert a.read_bytes() == b.read_bytes()


def test_different_seeds_differ():
    a = generate_cohort(small_gen_config(seed=1))
    b = generate_cohort(small_gen_config(seed=2))
    assert not np.array_equal(a.mri_array(), b.mri_array())


def test_rejects_undersized_cohort():
    with pytest.raises(ConfigError, match="n_patients"):
        generate_cohort(small_gen_config(n_patients=19))


@pytest.mark.parametrize(
    "overrides",
    [
        {"subtype_prevalence": 1.5},
        {"censor_rate": -0.1},
        {"mri_signal": -1.0},
        {"noise_sigma": -0.5},
        {"mri_artifact_dims": 8},  # equals d_m=8 in the small config
        {"mri_artifact_sigma": -1.0},
        {"concept_mri_signal": -0.2},
        {"concept_hazard_multipliers": [1.0, 0.0, 1.0]},
        {"concept_probs": {"PFA": [0.5, 0.5], "PFB": [0.5, 0.5, 0.5]}},
        {"location_probs": {"PFA": [0.7, 0.2, 0.2], "PFB": [0.2, 0.3, 0.5]}},
    ],
)
def test_config_validation_rejects(overrides):
    with pytest.raises(ConfigError):
        small_gen_config(**overrides).validate()


def test_from_dict_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="unknown"):
        GenConfig.from_dict({"n_patients": 20, "bogus_knob": 1})


def test_generated_invariants_hold():
    for seed in range(3):
        cohort = generate_cohort(small_gen_config(seed=seed))
        for p in cohort.patients:
            assert 0 < p.pfs_time <= p.os_time
            assert p.mri_views.shape == (5, cohort.config.d_m)
        assert [p.id for p in cohort.patients] == list(range(cohort.n_patients))


# ---------------------------------------------------------------------------
# signal structure
# ---------------------------------------------------------------------------


def test_zero_signal_gives_chance_classifier():
    config = GenConfig(
        n_patients=1000,
        mri_signal=0.0,
        text_signal=0.0,
        concept_mri_signal=0.0,
        mri_artifact_dims=0,
        seed=42,
    )
    cohort = generate_cohort(config)
    labels = cohort.label_arrays()
    mri = cohort.mri_array().mean(axis=1)
    gap = np.linalg.norm(
        mri[labels["group"] == 0].mean(axis=0) - mri[labels["group"] == 1].mean(axis=0)
    )
    assert gap < 0.4  # pure sampling noise; the default-signal gap is 2.0
    acc = _split_half_probe(mri, labels["group"], seed=7)
    assert 0.44 <= acc <= 0.56


def test_text_probe_beats_mri_probe_on_average():
    mri_accs, text_accs = [], []
    for seed in range(5):
        cohort = generate_cohort(GenConfig(seed=seed))
        labels = cohort.label_arrays()
        mri_accs.append(
            _split_half_probe(cohort.mri_array().mean(axis=1), labels["group"], 100 + seed)
        )
        text_accs.append(_split_half_probe(cohort.text_array(), labels["group"], 100 + seed))
    assert np.mean(text_accs) > np.mean(mri_accs)


def test_concept_prevalence_tracks_subtype():
    cohort = generate_cohort(GenConfig(n_patients=1000, seed=5))
    labels = cohort.label_arrays()
    flags = cohort.concept_flags_array()
    pfa = flags[labels["group"] == 0].mean(axis=0)
    pfb = flags[labels["group"] == 1].mean(axis=0)
    assert np.allclose(pfa, cohort.config.concept_probs["PFA"], atol=0.08)
    assert np.allclose(pfb, cohort.config.concept_probs["PFB"], atol=0.08)


def test_grade_is_group_with_configured_flips():
    cohort = generate_cohort(GenConfig(n_patients=1000, seed=5))
    labels = cohort.label_arrays()
    canonical = np.where(labels["group"] == 0, 1, 0)  # PFA presents as grade III
    flip_rate = float((labels["grade"] != canonical).mean())
    assert abs(flip_rate - cohort.config.grade_flip_prob) < 0.05


def test_clinical_vector_encodes_age_sex_location():
    cohort = generate_cohort(small_gen_config())
    clin = cohort.clinical_array()
    for i, p in enumerate(cohort.patients):
        assert clin[i, 0] == pytest.approx((p.age - 8.0) / 3.0)
        assert clin[i, 1] == p.sex
        onehot = np.zeros(3)
        onehot[p.location] = 1.0
        assert np.array_equal(clin[i, 2:5], onehot)


# ---------------------------------------------------------------------------
# survival and censoring
# ---------------------------------------------------------------------------


def test_zero_censor_rate_means_all_events():
    cohort = generate_cohort(small_gen_config(censor_rate=0.0))
    labels = cohort.label_arrays()
    assert labels["pfs_event"].all()
    assert labels["os_event"].all()


def test_censoring_calibration_near_target():
    for seed in range(3):
        cohort = generate_cohort(GenConfig(seed=seed))
        labels = cohort.label_arrays()
        censored_pfs = 1.0 - labels["pfs_event"].mean()
        censored_os = 1.0 - labels["os_event"].mean()
        pooled = (censored_pfs + censored_os) / 2.0
        assert abs(pooled - cohort.config.censor_rate) <= 0.1
        assert abs(censored_pfs - cohort.config.censor_rate) <= 0.15
        assert abs(censored_os - cohort.config.censor_rate) <= 0.15


def test_concepts_raise_hazard():
    # Patients carrying high-multiplier concepts should die earlier on
    # average within a subtype (censoring off to keep times uncensored).
    cohort = generate_cohort(
        GenConfig(n_patients=1000, censor_rate=0.0, seed=3)
    )
    labels = cohort.label_arrays()
    flags = cohort.concept_flags_array()
    group = labels["group"]
    heavy = flags[:, 0]  # multiplier 2.2
    for g in (0, 1):
        sel = group == g
        t_heavy = labels["os_time"][sel & heavy].mean()
        t_light = labels["os_time"][sel & ~heavy].mean()
        assert t_heavy < t_light


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_round_trip_preserves_everything(tmp_path, small_cohort):
    path = tmp_path / "cohort.json"
    save_cohort(small_cohort, path)
    loaded = load_cohort(path)
    assert loaded.config == small_cohort.config
    for a, b in zip(loaded.patients, small_cohort.patients):
        assert a.id == b.id and a.age == b.age and a.sex == b.sex
        assert a.location == b.location
        assert np.array_equal(a.clinical_vec, b.clinical_vec)
        assert np.array_equal(a.mri_views, b.mri_views)
        assert np.array_equal(a.text_dense, b.text_dense)
        assert np.array_equal(a.concept_flags, b.concept_flags)
        assert (a.group_label, a.grade_label) == (b.group_label, b.grade_label)
        assert (a.pfs_time, a.pfs_event) == (b.pfs_time, b.pfs_event)
        assert (a.os_time, a.os_event) == (b.os_time, b.os_event)


def test_json_schema_shape(tmp_path, small_cohort):
    path = tmp_path / "cohort.json"
    save_cohort(small_cohort, path)
    data = json.loads(path.read_text())
    assert set(data) == {"config", "patients"}
    record = data["patients"][0]
    assert set(record) == {
        "id", "age", "sex", "location", "clinical_vec", "mri_views",
        "text_dense", "concept_flags", "group", "grade", "pfs", "os",
    }
    assert set(record["pfs"]) == {"time", "event"}
    assert len(record["mri_views"]) == 5


def test_load_rejects_wrong_mri_view_count(tmp_path, small_cohort):
    path = tmp_path / "cohort.json"
    save_cohort(small_cohort, path)
    data = json.loads(path.read_text())
    data["patients"][0]["mri_views"] = data["patients"][0]["mri_views"][:4]
    path.write_text(json.dumps(data))
    with pytest.raises(CohortFormatError, match="mri_views"):
        load_cohort(path)


def test_load_rejects_empty_cohort(tmp_path, small_cohort):
    path = tmp_path / "cohort.json"
    save_cohort(small_cohort, path)
    data = json.loads(path.read_text())
    data["patients"] = []
    path.write_text(json.dumps(data))
    with pytest.raises(CohortFormatError, match="empty"):
        load_cohort(path)


def test_load_names_missing_field(tmp_path, small_cohort):
    path = tmp_path / "cohort.json"
    save_cohort(small_cohort, path)
    data = json.loads(path.read_text())
    del data["patients"][0]["group"]
    path.write_text(json.dumps(data))
    with pytest.raises(CohortFormatError, match="group"):
        load_cohort(path)


# ---------------------------------------------------------------------------
# views and subsets
# ---------------------------------------------------------------------------


def test_take_keeps_prefix_with_contiguous_ids(small_cohort):
    sub = small_cohort.take(5)
    assert sub.n_patients == 5
    assert sub.config.n_patients == 5
    assert [p.id for p in sub.patients] == [0, 1, 2, 3, 4]
    assert np.array_equal(sub.mri_array(), small_cohort.mri_array()[:5])


def test_with_mri_swaps_views_and_dim(small_cohort):
    n = small_cohort.n_patients
    new_views = np.random.default_rng(0).standard_normal((n, 5, 4))
    swapped = small_cohort.with_mri(new_views)
    assert swapped.config.d_m == 4
    assert np.array_equal(swapped.mri_array(), new_views)
    assert np.array_equal(swapped.text_array(), small_cohort.text_array())
    # original untouched
    assert small_cohort.config.d_m == 8


def test_label_arrays_are_consistent(small_cohort):
    labels = small_cohort.label_arrays()
    assert set(labels) == {
        "group", "grade", "location", "pfs_time", "pfs_event", "os_time", "os_event",
    }
    for p, g in zip(small_cohort.patients, labels["group"]):
        assert (p.group_label == "PFA") == (g == 0)
