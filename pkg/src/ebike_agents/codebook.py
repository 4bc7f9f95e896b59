"""Coding of extracted strings into the numeric predictor codebook.

=====================  ===============================================
Variable               Codes
=====================  ===============================================
age_cat                1 Children (<=14), 2 Youth (15-24),
                       3 Adults (25-64), 4 Seniors (65+)
gender                 1 Female, 2 Male
cause_type_code        1 Human-related, 2 Equipment-related, 3 Both
weather                1 Favorable (clear, unspecified), 2 Adverse
road                   1 Favorable (dry, unspecified), 2 Adverse
time                   1 Favorable (day, unspecified), 2 Adverse
modes_count            number of transportation modes (>= 1)
=====================  ===============================================
"""

from __future__ import annotations

import enum
from dataclasses import astuple, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import RecordExcluded
from .records import SENTINEL, CauseType
from .rules import RuleSet, default_rules

CONDITION_KINDS = ("weather", "road", "time")
GENDER_CODES = {"Female": 1, "Male": 2}
UNCLEAR = "Unclear"


class Condition(enum.IntEnum):
    Favorable = 1
    Adverse = 2


def bin_age(age_years: int) -> int:
    if age_years < 0:
        raise ValueError(f"age must be non-negative, got {age_years}")
    if age_years <= 14:
        return 1
    if age_years <= 24:
        return 2
    if age_years <= 64:
        return 3
    return 4


def code_condition(kind: str, raw: str | None, rules: RuleSet | None = None) -> Condition:
    """Adverse when ``raw`` contains a word starting with an adverse term.

    Absent, empty or sentinel strings are Favorable.
    """
    if kind not in CONDITION_KINDS:
        raise ValueError(f"unknown condition kind {kind!r}; expected one of {CONDITION_KINDS}")
    rules = rules or default_rules()
    if not raw or raw.strip().rstrip(".") == SENTINEL:
        return Condition.Favorable
    if rules.adverse[kind].search(raw):
        return Condition.Adverse
    return Condition.Favorable


def match_causes(text: str, rules: RuleSet | None = None) -> list[str]:
    """All canonical cause labels present in ``text``, in precedence order."""
    rules = rules or default_rules()
    if not text:
        return []
    return [rule.label for rule in rules.causes if rule.matches(text)]


def map_cause(raw_cause: str | None, rules: RuleSet | None = None) -> tuple[str, int | None]:
    """Canonicalize a raw cause string to ``(label, cause_type_code)``.

    Unmatched input gives ``("Unclear", None)``.
    """
    rules = rules or default_rules()
    labels = match_causes(raw_cause or "", rules)
    if not labels:
        return UNCLEAR, None
    rule = rules.cause(labels[0])
    return rule.label, 1 if rule.kind == "human" else 2


def cause_type_of(labels, rules: RuleSet | None = None) -> CauseType:
    rules = rules or default_rules()
    kinds = {rules.cause(label).kind for label in labels if label != UNCLEAR}
    if kinds == {"human", "equipment"}:
        return CauseType.Both
    if kinds == {"human"}:
        return CauseType.HumanRelated
    if kinds == {"equipment"}:
        return CauseType.EquipmentRelated
    return CauseType.Unclear


@dataclass(frozen=True)
class PredictorVector:
    age_cat: int
    gender: int
    cause_type_code: int
    weather: int
    road: int
    time: int
    modes_count: int

    def __post_init__(self):
        checks = {
            "age_cat": self.age_cat in (1, 2, 3, 4),
            "gender": self.gender in (1, 2),
            "cause_type_code": self.cause_type_code in (1, 2, 3),
            "weather": self.weather in (1, 2),
            "road": self.road in (1, 2),
            "time": self.time in (1, 2),
            "modes_count": isinstance(self.modes_count, (int, np.integer)) and self.modes_count >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"predictor codes out of range: {bad} in {self}")

    def as_tuple(self) -> tuple[int, ...]:
        return astuple(self)

    def to_dict(self) -> dict[str, int]:
        return {f.name: int(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data) -> "PredictorVector":
        return cls(**{name: int(data[name]) for name in PREDICTOR_FIELDS})


PREDICTOR_FIELDS = tuple(f.name for f in fields(PredictorVector))
RESTRICTED_FIELDS = ("age_cat", "gender", "cause_type_code", "modes_count")
FULL_FIELDS = ("age_cat", "gender", "cause_type_code", "weather", "road", "time", "modes_count")


def build_predictor_vector(record, rules: RuleSet | None = None) -> PredictorVector:
    """Code one structured record; raises :class:`RecordExcluded` with a reason.

    ``record`` needs ``age_years``, ``gender_raw``, ``severity_code``,
    ``cause_raw``, ``cause_type`` (may be ``None``), ``weather_raw``,
    ``road_raw``, ``time_raw`` and ``modes_count``.
    """
    rules = rules or default_rules()
    if getattr(record, "severity_code", -1) == -1:
        raise RecordExcluded("undefined severity")
    gender = GENDER_CODES.get((record.gender_raw or "").strip())
    if gender is None:
        raise RecordExcluded(f"gender not modeled: {record.gender_raw!r}")
    if record.age_years is None:
        raise RecordExcluded("missing age")
    if record.age_years < 0:
        raise RecordExcluded(f"negative age: {record.age_years}")

    cause_type = getattr(record, "cause_type", None)
    if cause_type is None:
        _, code = map_cause(record.cause_raw, rules)
    else:
        code = CauseType(cause_type).code
    if code is None:
        raise RecordExcluded("cause unclear")

    if not record.modes_count or record.modes_count < 1:
        raise RecordExcluded("no transportation mode extracted")

    return PredictorVector(
        age_cat=bin_age(record.age_years),
        gender=gender,
        cause_type_code=code,
        weather=int(code_condition("weather", record.weather_raw, rules)),
        road=int(code_condition("road", record.road_raw, rules)),
        time=int(code_condition("time", record.time_raw, rules)),
        modes_count=int(record.modes_count),
    )


# Reference levels used when dummy coding; plain numeric coding ignores them.
_BASE_LEVEL = {"age_cat": 1, "gender": 1, "cause_type_code": 2, "weather": 1, "road": 1, "time": 1}


class PredictorEncoder(TransformerMixin, BaseEstimator):
    """Turn predictor vectors into a design matrix.

    Parameters
    ----------
    columns : sequence of str, optional
        Subset of :data:`PREDICTOR_FIELDS` to emit, in order. Defaults to all.
    dummy_coding : bool, default False
        When False each variable enters as its numeric code (one column per
        variable). When True, categorical variables are expanded into
        indicator columns against a reference level and ``modes_count``
        stays numeric.
    """

    def __init__(self, columns=None, dummy_coding=False):
        self.columns = columns
        self.dummy_coding = dummy_coding

    def _as_array(self, X):
        if len(X) and isinstance(X[0], PredictorVector):
            X = [v.as_tuple() for v in X]
        X = check_array(X, dtype=np.float64, ensure_min_samples=0)
        if X.shape[1] != len(PREDICTOR_FIELDS):
            raise ValueError(f"expected {len(PREDICTOR_FIELDS)} predictor columns, got {X.shape[1]}")
        return X

    def fit(self, X, y=None):
        columns = tuple(self.columns) if self.columns is not None else PREDICTOR_FIELDS
        unknown = [c for c in columns if c not in PREDICTOR_FIELDS]
        if unknown:
            raise ValueError(f"unknown predictor columns: {unknown}")
        X = self._as_array(X)
        self.columns_ = columns
        self.levels_ = {}
        if self.dummy_coding:
            for col in columns:
                if col == "modes_count":
                    continue
                observed = np.unique(X[:, PREDICTOR_FIELDS.index(col)]).astype(int)
                base = _BASE_LEVEL[col]
                self.levels_[col] = [int(v) for v in observed if v != base]
        self.n_features_in_ = len(PREDICTOR_FIELDS)
        return self

    def transform(self, X):
        check_is_fitted(self, "columns_")
        X = self._as_array(X)
        out = []
        for col in self.columns_:
            values = X[:, PREDICTOR_FIELDS.index(col)]
            if self.dummy_coding and col in self.levels_:
                for level in self.levels_[col]:
                    out.append((values == level).astype(np.float64))
            else:
                out.append(values)
        if not out:
            return np.empty((X.shape[0], 0))
        return np.column_stack(out)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "columns_")
        names = []
        for col in self.columns_:
            if self.dummy_coding and col in self.levels_:
                names.extend(f"{col}={level}" for level in self.levels_[col])
            else:
                names.append(col)
        return np.asarray(names, dtype=object)
