"""Longitudinal diagnosis records, vocabulary and model-ready sequences."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)
UNK_GROUP = "UNK_GROUP"

DEFAULT_AGE_BUCKETS = 121
DEFAULT_YEAR_MIN = 1990
DEFAULT_YEAR_BUCKETS = 60


@dataclass(frozen=True)
class GroupedCode:
    raw_code: str
    group: str

    def __post_init__(self):
        if not self.raw_code:
            raise ValueError("raw_code must be non-empty")


@dataclass(frozen=True)
class Visit:
    """One admission: the set of diagnosis groups plus when and at what age."""

    diagnoses: tuple[str, ...]
    admit_time: int
    age_years: int
    calendar_year: int

    def __post_init__(self):
        # dedupe, keep first occurrence
        dx = tuple(dict.fromkeys(self.diagnoses))
        if not dx:
            raise ValueError("a visit needs at least one diagnosis")
        if self.age_years < 0:
            raise ValueError(f"negative age {self.age_years}")
        object.__setattr__(self, "diagnoses", dx)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        visits = tuple(self.visits)
        if not visits:
            raise ValueError(f"patient {self.patient_id} has no visits")
        for prev, cur in zip(visits, visits[1:]):
            if cur.admit_time < prev.admit_time:
                raise ValueError(f"patient {self.patient_id}: visits not sorted by admit_time")
            if cur.age_years < prev.age_years:
                raise ValueError(f"patient {self.patient_id}: age decreases across visits")
        object.__setattr__(self, "visits", visits)

    @property
    def num_visits(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class Vocabulary:
    """Token space: five specials followed by disease groups in sorted order.

    Age and calendar year are bucketed here too so that every input lane is
    derived from one object.
    """

    groups: tuple[str, ...]
    num_age_buckets: int = DEFAULT_AGE_BUCKETS
    year_min: int = DEFAULT_YEAR_MIN
    num_year_buckets: int = DEFAULT_YEAR_BUCKETS
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if list(self.groups) != sorted(set(self.groups)):
            raise ValueError("groups must be unique and sorted")
        mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for i, g in enumerate(self.groups):
            if g in mapping:
                raise ValueError(f"group label {g!r} collides with a special token")
            mapping[g] = NUM_SPECIAL + i
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return NUM_SPECIAL + len(self.groups)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def token_id(self, group: str) -> int:
        return self.token_to_id.get(group, UNK)

    def label_index(self, group: str) -> int:
        """Index of a group in the multi-hot label vector."""
        return self.token_to_id[group] - NUM_SPECIAL

    def age_id(self, age: int) -> int:
        return min(max(int(age), 0), self.num_age_buckets - 1)

    def year_id(self, year: int) -> int:
        return min(max(int(year) - self.year_min, 0), self.num_year_buckets - 1)

    def to_dict(self) -> dict:
        return {
            "groups": list(self.groups),
            "num_age_buckets": self.num_age_buckets,
            "year_min": self.year_min,
            "num_year_buckets": self.num_year_buckets,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(
            groups=tuple(d["groups"]),
            num_age_buckets=int(d["num_age_buckets"]),
            year_min=int(d["year_min"]),
            num_year_buckets=int(d["num_year_buckets"]),
        )


@dataclass(frozen=True)
class InputSequence:
    """Parallel integer lanes of length L fed to the encoder.

    ``first_visit`` is the 0-based index of the oldest visit that survived
    truncation; ``truncated`` is set when a lone visit had to be cut short.
    """

    token_ids: np.ndarray
    age_ids: np.ndarray
    year_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray
    first_visit: int = 0
    truncated: bool = False

    LANES = ("token_ids", "age_ids", "year_ids", "segment_ids", "position_ids", "attention_mask")

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class NextVisitExample:
    input: InputSequence
    labels: np.ndarray
    pivot_j: int


@dataclass
class SequenceBatch:
    """A stack of InputSequences; every lane is a (B, L) int array."""

    token_ids: np.ndarray
    age_ids: np.ndarray
    year_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape

    def replace_tokens(self, token_ids: np.ndarray) -> "SequenceBatch":
        return SequenceBatch(token_ids, self.age_ids, self.year_ids, self.segment_ids,
                             self.position_ids, self.attention_mask)

    def take(self, rows) -> "SequenceBatch":
        return SequenceBatch(*(getattr(self, lane)[rows] for lane in InputSequence.LANES))

    def trim(self) -> "SequenceBatch":
        """Drop trailing columns that are PAD in every row.

        Masked keys get exactly zero attention weight, so outputs at real
        positions are unaffected; it only saves work.
        """
        used = int(self.attention_mask.sum(1).max()) if self.attention_mask.size else 0
        used = max(used, 1)
        return SequenceBatch(*(getattr(self, lane)[:, :used] for lane in InputSequence.LANES))


def collate(seqs: Sequence[InputSequence]) -> SequenceBatch:
    if not seqs:
        raise ValueError("cannot collate an empty batch")
    return SequenceBatch(*(np.stack([getattr(s, lane) for s in seqs]) for lane in InputSequence.LANES))


def map_code_to_group(raw_code: str, group_table: Mapping[str, str]) -> str:
    if not group_table:
        raise ValueError("group table is empty")
    return group_table.get(raw_code, UNK_GROUP)


def build_vocabulary(cohort: Iterable[PatientRecord], year_min: int = DEFAULT_YEAR_MIN,
                     num_year_buckets: int = DEFAULT_YEAR_BUCKETS,
                     num_age_buckets: int = DEFAULT_AGE_BUCKETS) -> Vocabulary:
    cohort = list(cohort)
    if not cohort:
        raise ValueError("empty cohort")
    groups = {g for p in cohort for v in p.visits for g in v.diagnoses}
    return Vocabulary(tuple(sorted(groups)), num_age_buckets, year_min, num_year_buckets)


def encode_history(patient: PatientRecord, upto_visit: int, vocab: Vocabulary, L: int) -> InputSequence:
    """Lay out visits 1..upto_visit as ``[CLS] v1 [SEP] v2 [SEP] ...`` padded to L.

    Whole visits are dropped from the oldest end until the layout fits. A
    single visit that still does not fit keeps its first L-2 diagnoses.
    """
    n = patient.num_visits
    if not 1 <= upto_visit <= n:
        raise ValueError(f"upto_visit={upto_visit} out of range 1..{n}")
    if L < 3:
        raise ValueError("L must be at least 3")

    visits = patient.visits[:upto_visit]
    start = 0
    used = 1 + sum(len(v.diagnoses) + 1 for v in visits)
    while used > L and start < len(visits) - 1:
        used -= len(visits[start].diagnoses) + 1
        start += 1
    kept = [list(v.diagnoses) for v in visits[start:]]
    truncated = False
    if used > L:
        kept[0] = kept[0][: L - 2]
        truncated = True

    tok = np.zeros(L, dtype=np.int64)
    age = np.zeros(L, dtype=np.int64)
    year = np.zeros(L, dtype=np.int64)
    seg = np.zeros(L, dtype=np.int64)
    pos = np.zeros(L, dtype=np.int64)

    first = visits[start]
    tok[0] = CLS
    age[0] = vocab.age_id(first.age_years)
    year[0] = vocab.year_id(first.calendar_year)
    i = 1
    for k, (visit, dx) in enumerate(zip(visits[start:], kept)):
        a, y, s = vocab.age_id(visit.age_years), vocab.year_id(visit.calendar_year), k % 2
        ids = [vocab.token_id(g) for g in dx] + [SEP]
        for p, t in enumerate(ids):
            tok[i], age[i], year[i], seg[i], pos[i] = t, a, y, s, p
            i += 1
    mask = (tok != PAD).astype(np.int64)
    return InputSequence(tok, age, year, seg, pos, mask, first_visit=start, truncated=truncated)


def multi_hot(groups: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    labels = np.zeros(vocab.num_groups, dtype=np.int8)
    for g in groups:
        if g in vocab.token_to_id:
            labels[vocab.label_index(g)] = 1
    return labels


def make_nextvisit_example(patient: PatientRecord, j: int, vocab: Vocabulary, L: int) -> NextVisitExample:
    n = patient.num_visits
    if n < 2:
        raise ValueError("patient has no next visit")
    if not 1 <= j <= n - 1:
        raise ValueError(f"pivot j={j} out of range 1..{n - 1}")
    labels = multi_hot(patient.visits[j].diagnoses, vocab)
    if not labels.any():
        raise ValueError(f"patient {patient.patient_id}: visit {j + 1} has no in-vocabulary diagnosis")
    return NextVisitExample(encode_history(patient, j, vocab, L), labels, j)


def filter_min_visits(cohort: Sequence[PatientRecord], threshold: int) -> list[PatientRecord]:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    return [p for p in cohort if p.num_visits >= threshold]


def split_cohort(cohort: Sequence[PatientRecord], train_fraction: float,
                 seed: int) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Patient-level random split; both sides are non-empty."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(cohort) < 2:
        raise ValueError("need at least 2 patients to split")
    n_train = int(math.floor(train_fraction * len(cohort) + 0.5))
    n_train = min(max(n_train, 1), len(cohort) - 1)
    order = np.random.default_rng(seed).permutation(len(cohort))
    chosen = set(order[:n_train].tolist())
    train = [p for i, p in enumerate(cohort) if i in chosen]
    test = [p for i, p in enumerate(cohort) if i not in chosen]
    return train, test


def sample_pivot(patient: PatientRecord, rng: np.random.Generator) -> int:
    return int(rng.integers(1, patient.num_visits))


def build_eval_examples(cohort: Sequence[PatientRecord], vocab: Vocabulary, L: int,
                        seed: int) -> list[NextVisitExample]:
    """One example per patient with >= 2 visits; pivots are frozen by ``seed``."""
    rng = np.random.default_rng(seed)
    return [make_nextvisit_example(p, sample_pivot(p, rng), vocab, L)
            for p in cohort if p.num_visits >= 2]


# --- CSV ingestion ---------------------------------------------------------

VISITS_COLUMNS = ("patient_id", "admit_time_hours", "age_years", "calendar_year", "raw_code")
GROUPS_COLUMNS = ("raw_code", "group")


class IngestError(ValueError):
    """Raised when input CSVs contain malformed rows; ``problems`` lists (line, message)."""

    def __init__(self, path, problems: list[tuple[int, str]]):
        self.path = str(path)
        self.problems = problems
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        super().__init__(f"{self.path}: {len(problems)} malformed row(s): {lines}{more}")


def _open_rows(path, columns):
    fh = open(path, newline="")
    reader = csv.DictReader(fh)
    missing = [c for c in columns if c not in (reader.fieldnames or [])]
    if missing:
        fh.close()
        raise IngestError(path, [(1, f"missing columns {missing}")])
    return fh, reader


def read_group_table(path) -> dict[str, str]:
    fh, reader = _open_rows(path, GROUPS_COLUMNS)
    table, problems = {}, []
    with fh:
        for line, row in enumerate(reader, start=2):
            code, group = (row.get("raw_code") or "").strip(), (row.get("group") or "").strip()
            if not code or not group:
                problems.append((line, "empty raw_code or group"))
            elif code in table and table[code] != group:
                problems.append((line, f"code {code!r} mapped to two groups"))
            else:
                table[code] = group
    if problems:
        raise IngestError(path, problems)
    if not table:
        raise IngestError(path, [(1, "no rows")])
    return table


def read_visits_csv(visits_path, group_table: Mapping[str, str]) -> list[PatientRecord]:
    """Rows sharing (patient_id, admit_time_hours) form one visit."""
    fh, reader = _open_rows(visits_path, VISITS_COLUMNS)
    visits: dict[str, dict[int, dict]] = defaultdict(dict)
    problems = []
    with fh:
        for line, row in enumerate(reader, start=2):
            try:
                pid = row["patient_id"].strip()
                t = int(row["admit_time_hours"])
                age = int(row["age_years"])
                year = int(row["calendar_year"])
                code = row["raw_code"].strip()
            except (TypeError, ValueError, AttributeError) as exc:
                problems.append((line, f"unparseable row ({exc})"))
                continue
            if not pid or not code or age < 0:
                problems.append((line, "empty patient_id/raw_code or negative age"))
                continue
            slot = visits[pid].setdefault(t, {"age": age, "year": year, "dx": []})
            if (slot["age"], slot["year"]) != (age, year):
                problems.append((line, "age/year disagree with earlier rows of the same visit"))
                continue
            slot["dx"].append(map_code_to_group(code, group_table))
    if problems:
        raise IngestError(visits_path, problems)
    cohort = []
    for pid in sorted(visits):
        rows = visits[pid]
        cohort.append(PatientRecord(pid, tuple(
            Visit(tuple(rows[t]["dx"]), t, rows[t]["age"], rows[t]["year"]) for t in sorted(rows))))
    return cohort


def load_cohort(visits_path, groups_path) -> list[PatientRecord]:
    return read_visits_csv(visits_path, read_group_table(groups_path))


def write_cohort_csv(cohort: Iterable[PatientRecord], visits_path, groups_path=None) -> None:
    """Write visits.csv (and an identity groups.csv when ``groups_path`` is given)."""
    groups = set()
    with open(visits_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VISITS_COLUMNS)
        for p in cohort:
            for v in p.visits:
                for g in v.diagnoses:
                    groups.add(g)
                    w.writerow([p.patient_id, v.admit_time, v.age_years, v.calendar_year, g])
    if groups_path is not None:
        with open(groups_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(GROUPS_COLUMNS)
            for g in sorted(groups):
                w.writerow([g, g])
