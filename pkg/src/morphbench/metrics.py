"""Verification protocol, FNMR-anchored threshold solving, and MMPMR metrics.

Morph vulnerability is reported as the fraction of morphs accepted against
their contributing subjects at a similarity threshold anchored to a fixed
false non-match rate on a standard 1-1 verification protocol.  Two variants:
MinMax (a morph counts if even its weakest subject has some accepted sample)
and ProdAvg (product over subjects of per-subject acceptance averages).
A literal triple-loop oracle is kept beside the fast implementations.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from morphbench.data_model import DatasetManifest


@dataclass(frozen=True)
class VerificationProtocol:
    """Cross-modality (enrollment x reference) bona fide pair lists."""

    match_pairs: tuple[tuple[str, str], ...]
    nonmatch_pairs: tuple[tuple[str, str], ...]
    seed: int = 0


@dataclass(frozen=True)
class SubjectScores:
    subject: str
    scores: tuple[float, ...]
    probe_ids: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not self.scores:
            raise ValueError(f"subject {self.subject!r} has no scores")
        if self.probe_ids and len(self.probe_ids) != len(self.scores):
            raise ValueError(f"subject {self.subject!r}: probe_ids do not align with scores")
        arr = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or arr.min() < -1.0 or arr.max() > 1.0:
            raise ValueError(f"subject {self.subject!r} scores must be finite and in [-1, 1]")


@dataclass(frozen=True)
class MorphScores:
    morph_id: str
    subjects: tuple[SubjectScores, ...]

    def __post_init__(self) -> None:
        if not self.subjects:
            raise ValueError(f"morph {self.morph_id!r} has no subjects")


@dataclass(frozen=True)
class MorphScoreSet:
    """Per-morph, per-subject similarity scores between morphs and probes."""

    morphs: tuple[MorphScores, ...]
    excluded: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def from_lists(cls, scores: Iterable[Sequence[Sequence[float]]]) -> "MorphScoreSet":
        """Build from nested lists [morph][subject][sample] with synthetic ids."""
        morphs = []
        for mi, per_subject in enumerate(scores):
            subjects = tuple(
                SubjectScores(f"s{mi}_{ni}", tuple(float(x) for x in subj))
                for ni, subj in enumerate(per_subject))
            morphs.append(MorphScores(f"m{mi}", subjects))
        return cls(tuple(morphs))


@dataclass(frozen=True)
class ThresholdResult:
    tau: float
    achieved_fnmr: float
    target_fnmr: float


def cosine(u, v) -> float:
    """Cosine similarity, clipped into [-1, 1]; rejects zero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise ValueError("cosine is undefined for zero vectors")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def gen_verification_protocol(
    manifest: DatasetManifest,
    max_nonmatch: int = 100_000,
    max_match: int | None = None,
    seed: int = 0,
) -> VerificationProtocol:
    """All enrollment x reference bona fide pairs, labeled match/nonmatch.

    Match pairs are enumerated exhaustively (capped at ``max_match`` when
    given); nonmatch pairs are deterministically subsampled to
    ``max_nonmatch``.
    """
    enroll: list[tuple[str, str]] = []
    ref: list[tuple[str, str]] = []
    for rec in manifest.records:
        if rec.kind != "bona_fide":
            continue
        bucket = enroll if rec.modality == "enrollment" else ref
        bucket.append((rec.sample_id, rec.identity))
    if not enroll or not ref:
        raise ValueError("verification protocol needs bona fide samples in both modalities")

    match: list[tuple[str, str]] = []
    nonmatch: list[tuple[str, str]] = []
    for sid_e, ident_e in enroll:
        for sid_r, ident_r in ref:
            if ident_e == ident_r:
                match.append((sid_e, sid_r))
            else:
                nonmatch.append((sid_e, sid_r))
    if not match:
        raise ValueError("no cross-modality match pairs available")

    rng = np.random.default_rng(seed)
    if max_match is not None and len(match) > max_match:
        keep = np.sort(rng.choice(len(match), size=max_match, replace=False))
        match = [match[int(i)] for i in keep]
    if len(nonmatch) > max_nonmatch:
        keep = np.sort(rng.choice(len(nonmatch), size=max_nonmatch, replace=False))
        nonmatch = [nonmatch[int(i)] for i in keep]
    return VerificationProtocol(tuple(match), tuple(nonmatch), seed)


def fnmr(genuine_scores, tau: float) -> float:
    """Fraction of genuine scores <= tau (genuine pairs rejected)."""
    scores = np.asarray(genuine_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("genuine score list is empty")
    return float(np.count_nonzero(scores <= tau) / scores.size)


def fmr(impostor_scores, tau: float) -> float:
    """Fraction of impostor scores > tau (impostor pairs accepted)."""
    scores = np.asarray(impostor_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("impostor score list is empty")
    return float(np.count_nonzero(scores > tau) / scores.size)


def solve_threshold(genuine_scores, target_fnmr: float = 0.01) -> ThresholdResult:
    """Largest threshold whose FNMR stays within the target.

    With k = floor(target * N), any threshold just below the (k+1)-th
    smallest genuine score rejects at most k genuine pairs; one float ulp
    below that order statistic is therefore the maximal admissible
    threshold (any increase crosses it and overshoots the target).
    """
    scores = np.sort(np.asarray(genuine_scores, dtype=np.float64))
    n = scores.size
    if n == 0:
        raise ValueError("genuine score list is empty")
    if not 0.0 <= target_fnmr <= 1.0:
        raise ValueError("target_fnmr must lie in [0, 1]")
    if target_fnmr > 0 and n < 1.0 / target_fnmr:
        warnings.warn(
            f"only {n} genuine scores for target FNMR {target_fnmr:g}; "
            "threshold resolution is coarse", stacklevel=2)
    k = int(np.floor(target_fnmr * n))
    if k >= n:
        tau = float(scores[-1])
    else:
        tau = float(np.nextafter(scores[k], -np.inf))
    achieved = fnmr(scores, tau)
    return ThresholdResult(tau=tau, achieved_fnmr=achieved, target_fnmr=target_fnmr)


def pair_scores(embeddings, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
    """Cosine scores for (sample_id, sample_id) pairs against an embedding store."""
    return np.array([cosine(embeddings.vector(a), embeddings.vector(b)) for a, b in pairs])


def collect_morph_scores(
    embeddings,
    manifest: DatasetManifest,
    probe_modality: str = "reference",
) -> MorphScoreSet:
    """Score every two-subject morph against its subjects' bona fide probes.

    S[m][n][i] is the cosine between morph m's embedding and the i-th
    ``probe_modality`` bona fide sample of source subject n.  Morphs with a
    subject lacking probes are excluded and reported.
    """
    morphs: list[MorphScores] = []
    excluded: list[str] = []
    for rec in manifest.records:
        if rec.kind != "morph":
            continue
        morph_vec = embeddings.vector(rec.sample_id)
        subjects = []
        for ident in rec.source_identities:
            probe_ids = manifest.samples_of(ident, kind="bona_fide", modality=probe_modality)
            if not probe_ids:
                subjects = []
                break
            scores = tuple(cosine(morph_vec, embeddings.vector(pid)) for pid in probe_ids)
            subjects.append(SubjectScores(ident, scores, tuple(probe_ids)))
        if subjects:
            morphs.append(MorphScores(rec.sample_id, tuple(subjects)))
        else:
            excluded.append(rec.sample_id)
    return MorphScoreSet(tuple(morphs), tuple(excluded))


def minmax_mmpmr(scoreset: MorphScoreSet, tau: float) -> float:
    """Fraction of morphs whose weakest subject still has an accepted sample:
    mean over morphs of 1{ min over subjects of (max over samples) > tau }."""
    if not scoreset.morphs:
        raise ValueError("empty score set")
    hits = 0
    for morph in scoreset.morphs:
        weakest = min(max(subj.scores) for subj in morph.subjects)
        if weakest > tau:
            hits += 1
    return hits / len(scoreset.morphs)


def prodavg_mmpmr(scoreset: MorphScoreSet, tau: float) -> float:
    """Mean over morphs of the product over subjects of per-subject acceptance
    rates (fraction of that subject's samples scoring above tau)."""
    if not scoreset.morphs:
        raise ValueError("empty score set")
    total = 0.0
    for morph in scoreset.morphs:
        term = 1.0
        for subj in morph.subjects:
            arr = np.asarray(subj.scores)
            term *= int(np.count_nonzero(arr > tau)) / len(subj.scores)
        total += term
    return total / len(scoreset.morphs)


def brute_force_mmpmr(scoreset: MorphScoreSet, tau: float) -> tuple[float, float]:
    """Literal triple-loop transcription of both metrics; the oracle."""
    if not scoreset.morphs:
        raise ValueError("empty score set")
    minmax_hits = 0
    prodavg_total = 0.0
    for morph in scoreset.morphs:
        min_of_max = None
        prod = 1.0
        for subj in morph.subjects:
            best = None
            accepted = 0
            for s in subj.scores:
                if best is None or s > best:
                    best = s
                if s > tau:
                    accepted += 1
            if min_of_max is None or best < min_of_max:
                min_of_max = best
            prod = prod * (accepted / len(subj.scores))
        if min_of_max > tau:
            minmax_hits += 1
        prodavg_total += prod
    m = len(scoreset.morphs)
    return minmax_hits / m, prodavg_total / m


@dataclass(frozen=True)
class CurvePoint:
    fnmr: float
    tau: float
    minmax: float
    prodavg: float


def mmpmr_curve(
    scoreset: MorphScoreSet,
    genuine_scores,
    fnmr_grid: Sequence[float],
) -> list[CurvePoint]:
    """Both MMPMR variants at thresholds anchored to each FNMR target."""
    if not fnmr_grid:
        raise ValueError("fnmr grid is empty")
    for t in fnmr_grid:
        if not 0.0 < t < 1.0:
            raise ValueError(f"fnmr grid values must lie in (0, 1), got {t}")
    points = []
    for target in sorted(fnmr_grid):
        res = solve_threshold(genuine_scores, target)
        points.append(CurvePoint(
            fnmr=target,
            tau=res.tau,
            minmax=minmax_mmpmr(scoreset, res.tau),
            prodavg=prodavg_mmpmr(scoreset, res.tau),
        ))
    return points


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_curve(points: Sequence[CurvePoint], path: str | Path, header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fnmr", "tau", "minmax_mmpmr", "prodavg_mmpmr"])
        for p in points:
            writer.writerow([_fmt(p.fnmr), _fmt(p.tau), _fmt(p.minmax), _fmt(p.prodavg)])


def save_scores(scoreset: MorphScoreSet, path: str | Path, header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["morph_id", "subject", "probe_id", "score"])
        for morph in scoreset.morphs:
            for subj in morph.subjects:
                probe_ids = subj.probe_ids or tuple(str(i) for i in range(len(subj.scores)))
                for pid, score in zip(probe_ids, subj.scores):
                    writer.writerow([morph.morph_id, subj.subject, pid, _fmt(score)])
