"""Seeded synthetic cohorts with Dirichlet label skew across centers."""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .centers import ClientDataset, TransferRecord, write_transfers_csv
from .data import PatientRecord, Visit, write_cohort_csv

log = logging.getLogger(__name__)

HOURS_PER_YEAR = 8760


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generator.

    ``patient_concentration`` controls per-patient deviation from the home
    center's group mix: each patient draws its own mix from
    Dirichlet(patient_concentration * center_mix). ``None`` disables it, so
    every visit samples straight from the center mix.
    """

    num_patients: int = 2000
    num_centers: int = 8
    num_groups: int = 40
    mean_visits: float = 4.0
    max_dx_per_visit: int = 4
    heterogeneity_alpha: float = 0.1
    home_stay_bias: float = 3.0
    patient_concentration: Optional[float] = 2.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_patients", "num_centers", "num_groups", "max_dx_per_visit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_groups < 2:
            raise ValueError("num_groups must be >= 2")
        if self.max_dx_per_visit > self.num_groups:
            raise ValueError("max_dx_per_visit cannot exceed num_groups")
        if not self.mean_visits > 1:
            raise ValueError("mean_visits must be > 1")
        if not self.heterogeneity_alpha > 0:
            raise ValueError("heterogeneity_alpha must be > 0")
        if self.home_stay_bias < 1:
            raise ValueError("home_stay_bias must be >= 1")
        if self.patient_concentration is not None and not self.patient_concentration > 0:
            raise ValueError("patient_concentration must be > 0 or null")

    def to_dict(self) -> dict:
        return asdict(self)


def group_label(k: int, num_groups: int) -> str:
    return f"g{k:0{max(3, len(str(num_groups - 1)))}d}"


def center_label(c: int, num_centers: int) -> str:
    return f"unit{c:0{max(2, len(str(num_centers - 1)))}d}"


def _dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    theta = rng.dirichlet(alpha)
    # floor keeps sampling-without-replacement feasible under tiny alpha
    theta = theta + 1e-9
    return theta / theta.sum()


def generate_cohort(config: SynthConfig) -> tuple[list[PatientRecord], list[TransferRecord]]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    G, C = config.num_groups, config.num_centers
    groups = [group_label(k, G) for k in range(G)]
    centers = [center_label(c, C) for c in range(C)]
    center_mix = np.stack([_dirichlet(rng, np.full(G, config.heterogeneity_alpha)) for _ in range(C)])

    cohort, transfers = [], []
    p_geom = 1.0 / config.mean_visits
    for i in range(config.num_patients):
        pid = f"p{i:06d}"
        home = int(rng.integers(C))
        mix = center_mix[home]
        if config.patient_concentration is not None:
            mix = _dirichlet(rng, config.patient_concentration * mix)
        n_visits = int(rng.geometric(p_geom))  # support 1, 2, ...; mean = mean_visits
        age = int(rng.integers(18, 91))
        year = int(rng.integers(2000, 2016))
        t = (year - 1970) * HOURS_PER_YEAR + int(rng.integers(0, HOURS_PER_YEAR))
        visits = []
        for v in range(n_visits):
            if v:
                inc = int(rng.integers(0, 3))
                age += inc
                year += inc
                t += inc * HOURS_PER_YEAR + int(rng.integers(1, 720))
            k = int(rng.integers(1, config.max_dx_per_visit + 1))
            dx = rng.choice(G, size=k, replace=False, p=mix)
            visits.append(Visit(tuple(groups[d] for d in dx), t, age, year))
        cohort.append(PatientRecord(pid, tuple(visits)))

        n_transfers = int(rng.integers(1, 4))
        units = [home] + [int(u) for u in rng.integers(C, size=n_transfers - 1)]
        durations = rng.exponential(48.0, size=n_transfers) + 1.0
        for u, d in zip(units, durations):
            # scaling each home record scales the home total by the bias
            dur = float(d * config.home_stay_bias) if u == home else float(d)
            transfers.append(TransferRecord(pid, centers[u], dur))
    return cohort, transfers


def group_frequencies(patients: Sequence[PatientRecord]) -> Counter:
    return Counter(g for p in patients for v in p.visits for g in v.diagnoses)


def total_variation(p: Counter, q: Counter) -> float:
    np_, nq = sum(p.values()), sum(q.values())
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0) / np_ - q.get(k, 0) / nq) for k in keys)


def heterogeneity_report(clients: Sequence[ClientDataset]) -> dict:
    """Pairwise total-variation distance between per-client group frequencies."""
    freqs = {}
    for c in clients:
        f = group_frequencies(c.patients)
        if not f:
            log.warning("client %s is empty; skipped in heterogeneity report", c.center_id)
            continue
        freqs[c.center_id] = f
    if len(freqs) < 2:
        raise ValueError("heterogeneity report needs at least 2 non-empty clients")
    pairs = {f"{a}|{b}": total_variation(freqs[a], freqs[b])
             for a, b in itertools.combinations(sorted(freqs), 2)}
    return {"pairs": pairs, "mean_tv": float(np.mean(list(pairs.values()))),
            "clients": sorted(freqs)}


def write_synth(config: SynthConfig, outdir) -> dict[str, Path]:
    """Emit visits.csv, groups.csv (identity grouping) and transfers.csv."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cohort, transfers = generate_cohort(config)
    paths = {"visits": outdir / "visits.csv", "groups": outdir / "groups.csv",
             "transfers": outdir / "transfers.csv"}
    write_cohort_csv(cohort, paths["visits"], paths["groups"])
    write_transfers_csv(transfers, paths["transfers"])
    return paths
