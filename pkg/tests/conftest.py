from __future__ import annotations

import numpy as np
import pytest

from trinet.data import Dataset, LabeledRecord, TriageRecord


def make_record(**overrides) -> TriageRecord:
    base = dict(
        notes="cough since yesterday",
        medications=("acetaminophen",),
        symptoms=("fever",),
        age_months=36.0,
        weight_kg=14.0,
        systolic_bp=95.0,
        diastolic_bp=60.0,
        resp_rate=24.0,
        temp_c=37.5,
        pulse=110.0,
        ctas=3,
        arrival_method="walk_in",
        arrival_hour=14,
        arrival_weekday=2,
        arrival_month=6,
        gender="F",
    )
    base.update(overrides)
    return TriageRecord(**base)


def make_dataset(labels, condition="uti", seed=0) -> Dataset:
    """Small dataset with varied vitals; label-independent values."""
    rng = np.random.default_rng(seed)
    recs = []
    for i, y in enumerate(labels):
        recs.append(LabeledRecord(make_record(
            notes=f"note w{i % 7} common",
            age_months=float(rng.integers(0, 200)),
            weight_kg=float(np.round(rng.uniform(3, 70), 1)),
            temp_c=float(np.round(rng.normal(37.2, 0.5), 1)),
            pulse=float(rng.integers(60, 160)),
            ctas=int(rng.integers(1, 6)),
            gender=("M", "F")[i % 2],
        ), int(y)))
    return Dataset(condition, tuple(recs))


@pytest.fixture
def rec():
    return make_record()
