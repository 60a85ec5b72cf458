"""Morph and selfmorph generation plus the morph pairing protocol.

Two morphing flavors are supported: aligned pixel blending (the synthetic
images are generated pre-aligned, so landmark warping reduces to a convex
per-pixel blend) and latent-space interpolation rendered through the
generator (the GAN-morph surrogate).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from morphbench.data_model import (
    BlobRenderer,
    DatasetManifest,
    ImageStore,
    SampleRecord,
    validate_image,
)

PIXEL_BLEND = "pixel_blend"
LATENT_BLEND = "latent_blend"


class ProtocolError(ValueError):
    """Morph pairing protocol cannot be built or does not fit the manifest."""


@dataclass(frozen=True)
class MorphMethod:
    method: str = PIXEL_BLEND
    coeff: float = 0.5

    def __post_init__(self) -> None:
        if self.method not in (PIXEL_BLEND, LATENT_BLEND):
            raise ValueError(f"unknown morph method {self.method!r}")
        if not 0.0 <= self.coeff <= 1.0:
            raise ValueError("coeff must lie in [0, 1]")


@dataclass(frozen=True)
class MorphPairProtocol:
    """Enrollment sample pairs (distinct identities) selected for morphing."""

    pairs: tuple[tuple[str, str], ...]
    seed: int = 0


def blend_morph(a: np.ndarray, b: np.ndarray, coeff: float) -> np.ndarray:
    """Convex per-pixel blend (1-coeff)*a + coeff*b.

    Every output pixel is clamped into [min(a,b), max(a,b)] so the convexity
    contract holds exactly despite floating-point rounding.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 0.0 <= coeff <= 1.0:
        raise ValueError("coeff must lie in [0, 1]")
    out = (1.0 - coeff) * a + coeff * b
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    return np.clip(out, lo, hi).astype(a.dtype)


def latent_morph(
    id_a: str,
    id_b: str,
    coeff: float,
    latents: Mapping[str, np.ndarray],
    renderer: BlobRenderer,
) -> np.ndarray:
    """Render the interpolated latent (1-coeff)*z_a + coeff*z_b with no sample noise."""
    if not 0.0 <= coeff <= 1.0:
        raise ValueError("coeff must lie in [0, 1]")
    for ident in (id_a, id_b):
        if ident not in latents:
            raise KeyError(f"no latent for identity {ident!r}")
    z = (1.0 - coeff) * latents[id_a] + coeff * latents[id_b]
    return renderer.render(z)


def _content_id(
    prefix: str,
    method: MorphMethod,
    source_samples: tuple[str, ...],
    img: np.ndarray,
) -> str:
    """Deterministic id from the morphing recipe and the resulting pixels.

    The contributing sample ids are hashed too: latent morphs of one identity
    pair render identically regardless of which enrollment samples were
    paired, and distinct protocol pairs must yield distinct records.
    """
    h = hashlib.sha256()
    h.update(method.method.encode())
    h.update(f"{method.coeff:.12g}".encode())
    for sid in sorted(source_samples):
        h.update(sid.encode())
    h.update(np.ascontiguousarray(img).tobytes())
    return f"{prefix}_{method.method}_{h.hexdigest()[:12]}"


def make_selfmorph(
    rec_a: SampleRecord,
    rec_b: SampleRecord,
    images: ImageStore,
    method: MorphMethod,
    latents: Mapping[str, np.ndarray] | None = None,
    renderer: BlobRenderer | None = None,
) -> tuple[SampleRecord, np.ndarray]:
    """Morph two samples of one identity; the result still carries that identity."""
    if rec_a.identity is None or rec_a.identity != rec_b.identity:
        raise ValueError(
            f"selfmorph requires two samples of one identity, got {rec_a.identity!r} and {rec_b.identity!r}")
    ident = rec_a.identity
    if method.method == PIXEL_BLEND:
        img = blend_morph(images.get(rec_a.sample_id), images.get(rec_b.sample_id), method.coeff)
    else:
        if latents is None or renderer is None:
            raise ValueError("latent_blend selfmorphs need latents and a renderer")
        img = latent_morph(ident, ident, method.coeff, latents, renderer)
    sample_id = _content_id("selfmorph", method, (ident,), img)
    record = SampleRecord(
        sample_id=sample_id,
        identity=ident,
        modality="enrollment",
        kind="selfmorph",
        source_identities=(ident,),
        image_ref=f"images/{sample_id}.npy",
    )
    return record, img


def _enrollment_pools(manifest: DatasetManifest) -> dict[str, list[str]]:
    pools: dict[str, list[str]] = {}
    for rec in manifest.records:
        if rec.kind == "bona_fide" and rec.modality == "enrollment":
            pools.setdefault(rec.identity, []).append(rec.sample_id)
    return pools


def gen_morph_pair_protocol(manifest: DatasetManifest, count: int, seed: int = 0) -> MorphPairProtocol:
    """Deterministically select ``count`` distinct-identity enrollment pairs.

    A first pass pairs up a shuffled identity list so every identity appears
    in at least one pair whenever count >= num_identities / 2; remaining
    pairs are drawn uniformly, rejecting duplicate unordered sample pairs.
    """
    if count < 1:
        raise ProtocolError("count must be >= 1")
    pools = _enrollment_pools(manifest)
    identities = [ident for ident in pools if pools[ident]]
    if len(identities) < 2:
        raise ProtocolError("need at least 2 identities with enrollment bona fide samples")
    sizes = [len(pools[i]) for i in identities]
    total = sum(sizes) ** 2 - sum(s * s for s in sizes)
    total //= 2
    if count > total:
        raise ProtocolError(f"count {count} exceeds the {total} valid distinct-identity pairs")

    rng = np.random.default_rng(seed)
    pairs: list[tuple[str, str]] = []
    seen: set[frozenset[str]] = set()

    def try_add(ident_a: str, ident_b: str) -> bool:
        sid_a = pools[ident_a][rng.integers(len(pools[ident_a]))]
        sid_b = pools[ident_b][rng.integers(len(pools[ident_b]))]
        key = frozenset((sid_a, sid_b))
        if key in seen:
            return False
        seen.add(key)
        pairs.append((sid_a, sid_b))
        return True

    order = list(rng.permutation(len(identities)))
    for i in range(0, len(order) - 1, 2):
        if len(pairs) >= count:
            break
        try_add(identities[order[i]], identities[order[i + 1]])
    if len(order) % 2 == 1 and len(pairs) < count:
        lone = identities[order[-1]]
        partner = identities[order[int(rng.integers(len(order) - 1))]]
        try_add(lone, partner)

    while len(pairs) < count:
        ia, ib = rng.choice(len(identities), size=2, replace=False)
        try_add(identities[int(ia)], identities[int(ib)])
    return MorphPairProtocol(pairs=tuple(pairs), seed=seed)


def validate_protocol(protocol: MorphPairProtocol, manifest: DatasetManifest) -> list[str]:
    violations = []
    seen: set[frozenset[str]] = set()
    for sid_a, sid_b in protocol.pairs:
        key = frozenset((sid_a, sid_b))
        if key in seen:
            violations.append(f"duplicate pair ({sid_a}, {sid_b})")
        seen.add(key)
        recs = []
        for sid in (sid_a, sid_b):
            rec = manifest.sample_index.get(sid)
            if rec is None:
                violations.append(f"pair references unknown sample {sid!r}")
                continue
            if rec.kind != "bona_fide" or rec.modality != "enrollment":
                violations.append(f"sample {sid!r} is not an enrollment bona fide")
            recs.append(rec)
        if len(recs) == 2 and recs[0].identity == recs[1].identity:
            violations.append(f"pair ({sid_a}, {sid_b}) shares identity {recs[0].identity!r}")
    return violations


def materialize_morphs(
    protocol: MorphPairProtocol,
    method: MorphMethod,
    manifest: DatasetManifest,
    images: ImageStore,
    latents: Mapping[str, np.ndarray] | None = None,
    renderer: BlobRenderer | None = None,
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Extend the manifest with one morph record (and image) per protocol pair."""
    violations = validate_protocol(protocol, manifest)
    if violations:
        raise ProtocolError("protocol invalid: " + "; ".join(violations))
    if method.method == LATENT_BLEND and (latents is None or renderer is None):
        raise ValueError("latent_blend morphs need latents and a renderer")
    new_records: list[SampleRecord] = []
    new_images: dict[str, np.ndarray] = {}
    for sid_a, sid_b in protocol.pairs:
        ident_a = manifest.record(sid_a).identity
        ident_b = manifest.record(sid_b).identity
        if method.method == PIXEL_BLEND:
            img = blend_morph(images.get(sid_a), images.get(sid_b), method.coeff)
        else:
            img = latent_morph(ident_a, ident_b, method.coeff, latents, renderer)
        validate_image(img)
        sample_id = _content_id("morph", method, (ident_a, ident_b), img)
        new_records.append(SampleRecord(
            sample_id=sample_id,
            identity=None,
            modality="enrollment",
            kind="morph",
            source_identities=(ident_a, ident_b),
            image_ref=f"images/{sample_id}.npy",
        ))
        new_images[sample_id] = img
    extended = manifest.extended(new_records)
    images.update(new_images)
    return extended, new_images


def materialize_selfmorphs(
    manifest: DatasetManifest,
    images: ImageStore,
    method: MorphMethod,
    per_identity: int = 1,
    seed: int = 0,
    latents: Mapping[str, np.ndarray] | None = None,
    renderer: BlobRenderer | None = None,
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Add ``per_identity`` selfmorphs for every identity with >= 2 enrollment samples."""
    rng = np.random.default_rng(seed)
    pools = _enrollment_pools(manifest)
    new_records: list[SampleRecord] = []
    new_images: dict[str, np.ndarray] = {}
    for ident in sorted(pools):
        pool = pools[ident]
        if len(pool) < 2:
            continue
        for _ in range(per_identity):
            ia, ib = rng.choice(len(pool), size=2, replace=False)
            rec, img = make_selfmorph(
                manifest.record(pool[int(ia)]), manifest.record(pool[int(ib)]),
                images, method, latents=latents, renderer=renderer)
            if rec.sample_id in manifest.sample_index or rec.sample_id in new_images:
                continue
            new_records.append(rec)
            new_images[rec.sample_id] = img
    extended = manifest.extended(new_records)
    images.update(new_images)
    return extended, new_images


def save_protocol(protocol: MorphPairProtocol, path: str | Path, header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(f"# seed={protocol.seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["left_sample_id", "right_sample_id"])
        for sid_a, sid_b in protocol.pairs:
            writer.writerow([sid_a, sid_b])


def load_protocol(path: str | Path) -> MorphPairProtocol:
    path = Path(path)
    seed = 0
    pairs: list[tuple[str, str]] = []
    header_seen = False
    with path.open(newline="") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("seed="):
                    seed = int(body[len("seed="):])
                continue
            if not line:
                continue
            row = next(csv.reader([line]))
            if not header_seen:
                if row != ["left_sample_id", "right_sample_id"]:
                    raise ProtocolError(f"bad protocol header {row!r}")
                header_seen = True
                continue
            if len(row) != 2:
                raise ProtocolError(f"bad protocol row {row!r}")
            pairs.append((row[0], row[1]))
    return MorphPairProtocol(pairs=tuple(pairs), seed=seed)
