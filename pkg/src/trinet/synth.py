"""Seeded generator of labeled synthetic triage data.

Positives carry planted signals: a temperature shift for UTI, a lower
weight for age (and a younger age profile) for pneumonia, and
condition-specific medication tokens in the notes. Everything else is
drawn identically for both classes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, LabeledRecord, TriageRecord

SIGNAL_TOKENS = {
    "pneumonia": ("salbutamol", "fluticasone", "amoxicillin"),
    "uti": ("cephalexin", "polyethylene glycol", "trimethoprim"),
}

BACKGROUND_WORDS = """
patient presents with mother father parent reports since yesterday today morning
evening night hours days week onset gradual sudden mild moderate severe intermittent
constant worse better improved unchanged eating drinking sleeping playing tired
fussy irritable alert active interactive crying consolable awake calm anxious
appears well unwell pale flushed warm cool dry moist skin color normal good poor
intake output wet diapers voiding stooling last seen by family doctor clinic walk
school daycare sibling sick contacts travel none recent history previous similar
episode known allergies immunizations up to date denies reports states noted
observed given at home prior arrival triage assessment nurse vitals stable weight
height left right side front back upper lower area region mild tenderness swelling
redness bruise scratch small large around near under over after before during while
still started stopped continues getting trying able unable walking running fell
tripped bumped hit twisted landed injury play sports game park bike stairs bed chair
floor hands arm leg knee ankle wrist foot finger toe head face eye ear nose mouth
throat neck chest belly stomach hip shoulder elbow lip tooth jaw forehead scalp
bottle formula breast fed solids snacks water juice milk meal breakfast lunch dinner
tylenol advil motrin dose dosed hourly twice once three times per day ago minutes
follow reassess plan discharge return waiting room brought car ambulance bus
""".split()

BACKGROUND_MEDICATIONS = (
    "acetaminophen", "ibuprofen", "cetirizine", "ondansetron", "loratadine",
    "melatonin", "vitamin d", "iron", "ranitidine", "omeprazole", "methylphenidate",
    "multivitamin", "diphenhydramine", "hydrocortisone cream",
)
BACKGROUND_SYMPTOMS = (
    "vomiting", "diarrhea", "rash", "headache", "abdominal pain", "sore throat",
    "ear pain", "fall", "laceration", "limb injury", "nausea", "congestion",
    "lethargy", "dizziness", "swelling",
)
ARRIVAL_METHODS = ("walk_in", "car", "ambulance", "transfer")
ARRIVAL_METHOD_P = (0.55, 0.30, 0.12, 0.03)
CTAS_P = (0.02, 0.15, 0.40, 0.30, 0.13)
GENDER_P = {"M": 0.49, "F": 0.49, "U": 0.02}
# arrival hour profile: quiet overnight, busy late afternoon/evening
_HOUR_W = np.array([3, 2, 2, 1, 1, 1, 2, 3, 5, 6, 7, 7, 7, 7, 7, 8, 8, 9, 9, 9, 8, 7, 5, 4], float)
HOUR_P = _HOUR_W / _HOUR_W.sum()
MAX_AGE_MONTHS = 216


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 20000
    condition: str = "pneumonia"
    prevalence: float = 0.06
    temp_shift_c: float = 1.5
    weight_factor: float = 0.6
    signal_token_prob_pos: float = 0.5
    signal_token_prob_neg: float = 0.05
    # fraction of pneumonia positives drawn from the under-5 age band; None
    # draws positives from the background age distribution
    pos_under5_prob: float | None = 0.7
    missing_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.condition not in SIGNAL_TOKENS:
            raise ValueError(f"condition must be one of {tuple(SIGNAL_TOKENS)}")
        if not 0 < self.prevalence < 1:
            raise ValueError("prevalence must be in (0, 1)")
        for name in ("signal_token_prob_pos", "signal_token_prob_neg", "missing_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.pos_under5_prob is not None and not 0 <= self.pos_under5_prob <= 1:
            raise ValueError("pos_under5_prob must be in [0, 1]")
        if self.weight_factor <= 0:
            raise ValueError("weight_factor must be positive")

    def null_signal(self) -> GeneratorConfig:
        """Same config with every planted effect switched off."""
        return replace(
            self,
            temp_shift_c=0.0,
            weight_factor=1.0,
            signal_token_prob_pos=self.signal_token_prob_neg,
            pos_under5_prob=None,
        )


def expected_weight_kg(age_months: float) -> float:
    """Rough median weight-for-age for a paediatric population."""
    if age_months < 12:
        return 3.5 + 0.6 * age_months
    years = age_months / 12.0
    if years < 10:
        return 8.0 + 2.5 * years
    return 33.0 + 5.0 * (years - 10)


def _interp_by_age(age_months, infant, teen):
    frac = min(age_months, MAX_AGE_MONTHS) / MAX_AGE_MONTHS
    return infant + (teen - infant) * frac**0.5


def _record(cfg: GeneratorConfig, rng: np.random.Generator) -> LabeledRecord:
    label = int(rng.random() < cfg.prevalence)
    positive = label == 1

    under5 = rng.random() < 0.45
    if positive and cfg.condition == "pneumonia" and cfg.pos_under5_prob is not None:
        under5 = rng.random() < cfg.pos_under5_prob
    age = float(rng.integers(0, 60) if under5 else rng.integers(60, MAX_AGE_MONTHS + 1))

    weight = expected_weight_kg(age) * float(np.exp(rng.normal(0.0, 0.12)))
    if positive and cfg.condition == "pneumonia":
        weight *= cfg.weight_factor

    fever = rng.random() < 0.15
    temp = 37.0 + rng.normal(0.0, 0.35) + (rng.normal(1.3, 0.4) if fever else 0.0)
    if positive and cfg.condition == "uti":
        temp += cfg.temp_shift_c
    pulse = _interp_by_age(age, 140.0, 80.0) + rng.normal(0.0, 12.0) + (12.0 if fever else 0.0)
    resp = _interp_by_age(age, 40.0, 16.0) + rng.normal(0.0, 4.0)
    sbp = _interp_by_age(age, 80.0, 115.0) + rng.normal(0.0, 9.0)
    dbp = _interp_by_age(age, 50.0, 70.0) + rng.normal(0.0, 7.0)

    vitals = {
        "weight_kg": round(max(weight, 1.0), 1),
        "systolic_bp": float(round(sbp)),
        "diastolic_bp": float(round(dbp)),
        "resp_rate": float(round(max(resp, 6.0))),
        "temp_c": round(temp, 1),
        "pulse": float(round(max(pulse, 30.0))),
    }
    for name in vitals:
        if rng.random() < cfg.missing_rate:
            vitals[name] = None

    words = list(rng.choice(BACKGROUND_WORDS, size=int(rng.integers(5, 13)), replace=False))
    p_signal = cfg.signal_token_prob_pos if positive else cfg.signal_token_prob_neg
    for tok in SIGNAL_TOKENS[cfg.condition]:
        if rng.random() < p_signal:
            words.insert(int(rng.integers(0, len(words) + 1)), tok)
    meds = rng.choice(BACKGROUND_MEDICATIONS, size=int(rng.integers(0, 3)), replace=False)
    symptoms = rng.choice(BACKGROUND_SYMPTOMS, size=int(rng.integers(1, 3)), replace=False)

    record = TriageRecord(
        notes=" ".join(words),
        medications=tuple(str(m) for m in meds),
        symptoms=tuple(str(s) for s in symptoms),
        age_months=age,
        ctas=int(rng.choice(5, p=CTAS_P)) + 1,
        arrival_method=str(rng.choice(ARRIVAL_METHODS, p=ARRIVAL_METHOD_P)),
        arrival_hour=int(rng.choice(24, p=HOUR_P)),
        arrival_weekday=int(rng.integers(0, 7)),
        arrival_month=int(rng.integers(1, 13)),
        gender=str(rng.choice(list(GENDER_P), p=list(GENDER_P.values()))),
        **vitals,
    )
    return LabeledRecord(record, label)


def generate(cfg: GeneratorConfig) -> Dataset:
    """Draw ``cfg.n`` records; record ``i`` uses its own generator seeded by ``(seed, i)``."""
    if cfg.n < 10:
        raise ValueError(f"n must be >= 10, got {cfg.n}")
    root = np.random.SeedSequence(cfg.seed)
    records = [
        _record(cfg, np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=(i,))))
        for i in range(cfg.n)
    ]
    return Dataset(cfg.condition, tuple(records))
