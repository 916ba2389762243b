"""Assign patients to care-unit centers by longest cumulative stay."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .data import IngestError, PatientRecord

log = logging.getLogger(__name__)

TRANSFERS_COLUMNS = ("patient_id", "care_unit", "duration_hours")


@dataclass(frozen=True)
class TransferRecord:
    patient_id: str
    care_unit: str
    duration_hours: float

    def __post_init__(self):
        if not self.duration_hours > 0:
            raise ValueError(f"transfer duration must be positive, got {self.duration_hours}")


@dataclass
class ClientDataset:
    center_id: str
    patients: list[PatientRecord]

    def __len__(self):
        return len(self.patients)


@dataclass
class PartitionResult:
    clients: list[ClientDataset]
    missing: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, int]:
        return {c.center_id: len(c.patients) for c in self.clients}


def assign_center(transfers: Iterable[TransferRecord]) -> str:
    """Unit with the largest summed duration; ties go to the smallest unit id."""
    durations: dict[str, list[float]] = defaultdict(list)
    for t in transfers:
        durations[t.care_unit].append(t.duration_hours)
    if not durations:
        raise ValueError("patient has no transfers")
    # fsum is correctly rounded, so totals do not depend on record order
    totals = {u: math.fsum(d) for u, d in durations.items()}
    return min(totals, key=lambda u: (-totals[u], u))


def partition_cohort(cohort: Sequence[PatientRecord],
                     transfers: Iterable[TransferRecord]) -> PartitionResult:
    """Materialize one ClientDataset per assigned unit, sorted by center id.

    Patients without any transfer record are excluded and listed in
    ``PartitionResult.missing``.
    """
    by_patient: dict[str, list[TransferRecord]] = defaultdict(list)
    for t in transfers:
        by_patient[t.patient_id].append(t)
    shards: dict[str, list[PatientRecord]] = defaultdict(list)
    missing = []
    for p in cohort:
        recs = by_patient.get(p.patient_id)
        if not recs:
            missing.append(p.patient_id)
            continue
        shards[assign_center(recs)].append(p)
    if missing:
        log.warning("%d patient(s) without transfers excluded from partition", len(missing))
    clients = [ClientDataset(cid, shards[cid]) for cid in sorted(shards)]
    return PartitionResult(clients, missing)


def restrict(clients: Sequence[ClientDataset], keep) -> list[ClientDataset]:
    """Apply a patient-list transform to every shard, keeping center ids."""
    return [ClientDataset(c.center_id, list(keep(c.patients))) for c in clients]


def read_transfers_csv(path) -> list[TransferRecord]:
    out, problems = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRANSFERS_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(path, [(1, f"missing columns {missing}")])
        for line, row in enumerate(reader, start=2):
            try:
                out.append(TransferRecord(row["patient_id"].strip(), row["care_unit"].strip(),
                                          float(row["duration_hours"])))
            except (TypeError, ValueError, AttributeError) as exc:
                problems.append((line, str(exc)))
    if problems:
        raise IngestError(path, problems)
    return out


def write_transfers_csv(transfers: Iterable[TransferRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRANSFERS_COLUMNS)
        for t in transfers:
            w.writerow([t.patient_id, t.care_unit, repr(float(t.duration_hours))])


def write_partition_summary(result: PartitionResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
