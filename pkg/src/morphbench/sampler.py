"""Quadruplet and matched-triplet stream construction from a manifest.

Sampling is driven by the morph list: each usable morph yields one quadruplet
per epoch pass, with anchor and positive drawn from one of its source
identities and the negative from the other.  The triplet baseline reuses the
exact same draws with the morph slot projected away, so the two training
streams are matched item for item.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

from morphbench.data_model import DatasetManifest

T = TypeVar("T")


class SamplingError(ValueError):
    """No usable material to build the requested sample stream."""


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 32
    seed: int = 0
    include_selfmorphs: bool = False
    selfmorph_as_positive: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class Quadruplet:
    anchor: str
    positive: str
    negative: str
    morph: str


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


@dataclass(frozen=True)
class EpochPlan:
    quadruplets: tuple[Quadruplet, ...]
    skipped_morphs: int


@dataclass(frozen=True)
class TripletPlan:
    triplets: tuple[Triplet, ...]
    skipped_morphs: int


def _pools(manifest: DatasetManifest, cfg: SamplerConfig) -> tuple[dict, dict, list]:
    """Anchor pools (bona fide), positive pools (plus selfmorphs when enabled)
    and the ordered list of records that drive the morph slot."""
    bona: dict[str, list[str]] = {}
    selfm: dict[str, list[str]] = {}
    drivers = []
    for rec in manifest.records:
        if rec.kind == "bona_fide":
            bona.setdefault(rec.identity, []).append(rec.sample_id)
        elif rec.kind == "selfmorph" and cfg.include_selfmorphs:
            selfm.setdefault(rec.identity, []).append(rec.sample_id)
            if not cfg.selfmorph_as_positive:
                drivers.append(rec)
        elif rec.kind == "morph":
            drivers.append(rec)
    positive_pools = {ident: list(ids) for ident, ids in bona.items()}
    if cfg.include_selfmorphs and cfg.selfmorph_as_positive:
        for ident, ids in selfm.items():
            positive_pools.setdefault(ident, []).extend(ids)
    return bona, positive_pools, drivers


def build_quadruplets(manifest: DatasetManifest, cfg: SamplerConfig) -> EpochPlan:
    """One deterministic pass over the manifest's morphs.

    For every morph a seeded coin decides which source identity supplies
    anchor/positive and which supplies the negative; orientations that lack
    samples fall back to the swapped assignment, and morphs unusable either
    way are skipped and counted.
    """
    bona, positive_pools, drivers = _pools(manifest, cfg)
    rng = np.random.default_rng(cfg.seed)
    quadruplets: list[Quadruplet] = []
    skipped = 0

    def usable(side_a: str, side_n: str) -> bool:
        return (len(bona.get(side_a, ())) >= 1
                and len(positive_pools.get(side_a, ())) >= 2
                and len(bona.get(side_n, ())) >= 1)

    identities_with_samples = sorted(ident for ident, ids in bona.items() if ids)
    for rec in drivers:
        if rec.kind == "morph":
            id_a, id_b = rec.source_identities
            flip = bool(rng.integers(0, 2))
            side_a, side_n = (id_b, id_a) if flip else (id_a, id_b)
            if not usable(side_a, side_n):
                if usable(side_n, side_a):
                    side_a, side_n = side_n, side_a
                else:
                    skipped += 1
                    continue
        else:
            side_a = rec.source_identities[0]
            others = [i for i in identities_with_samples if i != side_a]
            if not others or not usable(side_a, others[0]):
                skipped += 1
                continue
            side_n = others[int(rng.integers(len(others)))]
        anchor_pool = bona[side_a]
        anchor = anchor_pool[int(rng.integers(len(anchor_pool)))]
        pos_candidates = [s for s in positive_pools[side_a] if s != anchor]
        positive = pos_candidates[int(rng.integers(len(pos_candidates)))]
        negative = bona[side_n][int(rng.integers(len(bona[side_n])))]
        quadruplets.append(Quadruplet(anchor, positive, negative, rec.sample_id))

    if not drivers:
        raise SamplingError("manifest contains no morphs to drive sampling")
    if not quadruplets:
        raise SamplingError(f"no usable morph: all {skipped} morphs lack source samples")
    return EpochPlan(tuple(quadruplets), skipped)


def build_triplets(manifest: DatasetManifest, cfg: SamplerConfig) -> TripletPlan:
    """The quadruplet stream with the morph slot dropped: identical identity
    draws for the same seed, giving a matched triplet baseline."""
    plan = build_quadruplets(manifest, cfg)
    triplets = tuple(Triplet(q.anchor, q.positive, q.negative) for q in plan.quadruplets)
    return TripletPlan(triplets, plan.skipped_morphs)


def batchify(sequence: Sequence[T], batch_size: int) -> list[Sequence[T]]:
    """Contiguous chunks; the final short chunk is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [sequence[i:i + batch_size] for i in range(0, len(sequence), batch_size)]


def dump_epoch_plan(plan: EpochPlan, path: str | Path) -> None:
    """Audit dump of one epoch's quadruplets."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["anchor", "positive", "negative", "morph"])
        for q in plan.quadruplets:
            writer.writerow([q.anchor, q.positive, q.negative, q.morph])


def verify_quadruplet(q: Quadruplet, manifest: DatasetManifest) -> list[str]:
    """Independent check of the quadruplet invariants against a manifest."""
    problems = []
    rec_a = manifest.record(q.anchor)
    rec_p = manifest.record(q.positive)
    rec_n = manifest.record(q.negative)
    rec_m = manifest.record(q.morph)
    if rec_a.identity is None or rec_a.identity != rec_p.identity:
        problems.append("anchor and positive must share an identity")
    if q.anchor == q.positive:
        problems.append("anchor and positive must be distinct samples")
    if rec_n.identity == rec_a.identity:
        problems.append("negative must come from a different identity")
    if rec_m.kind not in ("morph", "selfmorph"):
        problems.append(f"morph slot holds kind {rec_m.kind!r}")
    if rec_m.kind == "morph":
        if set(rec_m.source_identities) != {rec_a.identity, rec_n.identity}:
            problems.append("morph sources must be the anchor and negative identities")
    return problems
