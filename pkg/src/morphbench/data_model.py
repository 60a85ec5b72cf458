"""Dataset manifest schema, validation, and a seeded synthetic image generator.

The manifest is a flat CSV of samples tagged with identity, capture modality
(enrollment vs reference) and kind (bona fide / morph / selfmorph).  The
synthetic generator stands in for a curated face dataset: each identity is a
latent vector, each image a smooth deterministic rendering of that latent
plus per-sample noise, so latent interpolation produces plausible in-between
images.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MODALITIES = ("enrollment", "reference")
KINDS = ("bona_fide", "morph", "selfmorph")

MANIFEST_COLUMNS = ("sample_id", "identity", "modality", "kind", "source_identities", "image_ref")
_MANIFEST_MAGIC = "morphbench-manifest v1"


class ManifestError(ValueError):
    """Manifest cannot be parsed or violates a schema invariant."""


@dataclass(frozen=True)
class SampleRecord:
    """One image sample.  ``identity`` is None exactly for two-subject morphs."""

    sample_id: str
    identity: str | None
    modality: str
    kind: str
    source_identities: tuple[str, ...] = ()
    image_ref: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable collection of sample records plus derived lookup indexes."""

    records: tuple[SampleRecord, ...]
    provenance: str = ""
    seed: int = 0
    identity_index: dict[str, tuple[str, ...]] = field(default_factory=dict, compare=False, repr=False)
    sample_index: dict[str, SampleRecord] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_records(cls, records: Iterable[SampleRecord], provenance: str = "", seed: int = 0) -> "DatasetManifest":
        records = tuple(records)
        identity_index: dict[str, list[str]] = {}
        sample_index: dict[str, SampleRecord] = {}
        for rec in records:
            sample_index[rec.sample_id] = rec
            if rec.identity is not None:
                identity_index.setdefault(rec.identity, []).append(rec.sample_id)
        frozen_index = {ident: tuple(ids) for ident, ids in identity_index.items()}
        return cls(records, provenance, seed, frozen_index, sample_index)

    def record(self, sample_id: str) -> SampleRecord:
        try:
            return self.sample_index[sample_id]
        except KeyError:
            raise ManifestError(f"unknown sample_id {sample_id!r}") from None

    def samples_of(self, identity: str, kind: str | None = None, modality: str | None = None) -> list[str]:
        """Sample ids of one identity, optionally filtered, in manifest order."""
        out = []
        for sid in self.identity_index.get(identity, ()):
            rec = self.sample_index[sid]
            if kind is not None and rec.kind != kind:
                continue
            if modality is not None and rec.modality != modality:
                continue
            out.append(sid)
        return out

    def extended(self, new_records: Iterable[SampleRecord]) -> "DatasetManifest":
        """New manifest with records appended; existing records are untouched."""
        return DatasetManifest.from_records(self.records + tuple(new_records), self.provenance, self.seed)


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Return a description of every invariant violation (empty list if valid)."""
    violations: list[str] = []
    seen: set[str] = set()
    identified = {rec.identity for rec in manifest.records if rec.identity is not None}
    for rec in manifest.records:
        where = f"sample {rec.sample_id!r}"
        if not rec.sample_id:
            violations.append("record with empty sample_id")
        elif rec.sample_id in seen:
            violations.append(f"duplicate sample_id {rec.sample_id!r}")
        seen.add(rec.sample_id)
        if rec.modality not in MODALITIES:
            violations.append(f"{where}: unknown modality {rec.modality!r}")
        if rec.kind not in KINDS:
            violations.append(f"{where}: unknown kind {rec.kind!r}")
            continue
        if rec.identity is not None and not rec.identity:
            violations.append(f"{where}: empty identity token")
        if rec.kind == "bona_fide":
            if rec.source_identities:
                violations.append(f"{where}: bona_fide must have no source identities")
            if rec.identity is None:
                violations.append(f"{where}: bona_fide requires an identity")
        elif rec.kind == "morph":
            if len(rec.source_identities) != 2 or rec.source_identities[0] == rec.source_identities[1]:
                violations.append(f"{where}: morph requires two distinct source identities")
            if rec.identity is not None:
                violations.append(f"{where}: morph must not carry an identity")
            for src in rec.source_identities:
                if src not in identified:
                    violations.append(f"{where}: morph references unknown identity {src!r}")
        elif rec.kind == "selfmorph":
            if len(rec.source_identities) != 1:
                violations.append(f"{where}: selfmorph requires exactly one source identity")
            elif rec.identity != rec.source_identities[0]:
                violations.append(f"{where}: selfmorph identity must equal its source identity")
    return violations


def _record_to_row(rec: SampleRecord) -> list[str]:
    return [
        rec.sample_id,
        rec.identity or "",
        rec.modality,
        rec.kind,
        "|".join(rec.source_identities),
        rec.image_ref,
    ]


def _record_from_row(row: list[str], line: int) -> SampleRecord:
    if len(row) != len(MANIFEST_COLUMNS):
        raise ManifestError(f"line {line}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}")
    sample_id, identity, modality, kind, sources, image_ref = row
    return SampleRecord(
        sample_id=sample_id,
        identity=identity or None,
        modality=modality,
        kind=kind,
        source_identities=tuple(s for s in sources.split("|") if s),
        image_ref=image_ref,
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    if "\n" in manifest.provenance:
        raise ManifestError("provenance must be a single line")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# {_MANIFEST_MAGIC}\n")
        fh.write(f"# provenance={manifest.provenance}\n")
        fh.write(f"# seed={manifest.seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            writer.writerow(_record_to_row(rec))


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest CSV; raises ManifestError on any defect."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    provenance = ""
    seed = 0
    rows: list[tuple[int, list[str]]] = []
    header: list[str] | None = None
    with path.open(newline="") as fh:
        for line_no, raw in enumerate(fh, start=1):
            stripped = raw.rstrip("\n")
            if stripped.startswith("#"):
                body = stripped.lstrip("#").strip()
                if body.startswith("provenance="):
                    provenance = body[len("provenance="):]
                elif body.startswith("seed="):
                    try:
                        seed = int(body[len("seed="):])
                    except ValueError:
                        raise ManifestError(f"line {line_no}: seed is not an integer") from None
                continue
            if not stripped:
                continue
            parsed = next(csv.reader([stripped]))
            if header is None:
                header = parsed
                if tuple(header) != MANIFEST_COLUMNS:
                    raise ManifestError(f"line {line_no}: bad header {header!r}")
                continue
            rows.append((line_no, parsed))
    if header is None:
        raise ManifestError("manifest has no header row")
    records = [_record_from_row(row, line_no) for line_no, row in rows]
    manifest = DatasetManifest.from_records(records, provenance=provenance, seed=seed)
    violations = validate_manifest(manifest)
    if violations:
        raise ManifestError("invalid manifest: " + "; ".join(violations))
    return manifest


def validate_image(img: np.ndarray) -> None:
    """Enforce the image contract: HxWxC float array, finite, values in [0,1]."""
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWxC with 1 or 3 channels, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError(f"image must be floating point, got {img.dtype}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")


class ImageStore:
    """Maps sample ids to image arrays, loading lazily from disk when rooted.

    In-memory stores (plain dict) and on-disk stores (manifest image_ref paths
    relative to ``root``) share this one interface.
    """

    def __init__(
        self,
        images: Mapping[str, np.ndarray] | None = None,
        root: str | Path | None = None,
        manifest: DatasetManifest | None = None,
    ):
        self._cache: dict[str, np.ndarray] = dict(images) if images else {}
        self.root = Path(root) if root is not None else None
        self.manifest = manifest

    def __contains__(self, sample_id: str) -> bool:
        if sample_id in self._cache:
            return True
        return self._path_for(sample_id) is not None

    def _path_for(self, sample_id: str) -> Path | None:
        if self.root is None or self.manifest is None:
            return None
        rec = self.manifest.sample_index.get(sample_id)
        if rec is None or not rec.image_ref:
            return None
        path = self.root / rec.image_ref
        return path if path.exists() else None

    def get(self, sample_id: str) -> np.ndarray:
        if sample_id in self._cache:
            return self._cache[sample_id]
        path = self._path_for(sample_id)
        if path is None:
            raise KeyError(f"no image available for sample {sample_id!r}")
        img = np.load(path)
        self._cache[sample_id] = img
        return img

    def add(self, sample_id: str, img: np.ndarray) -> None:
        validate_image(img)
        self._cache[sample_id] = img

    def update(self, images: Mapping[str, np.ndarray]) -> None:
        for sid, img in images.items():
            self.add(sid, img)

    @property
    def cached(self) -> dict[str, np.ndarray]:
        return self._cache


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic population generator."""

    num_identities: int = 20
    samples_per_identity_enroll: int = 2
    samples_per_identity_ref: int = 2
    image_size: int = 32
    latent_dim: int = 8
    intra_class_noise: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_identities", "samples_per_identity_enroll", "samples_per_identity_ref",
                     "image_size", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.intra_class_noise < 0:
            raise ValueError("intra_class_noise must be >= 0")


class BlobRenderer:
    """Deterministic smooth map from latent vectors to grayscale images.

    A fixed bank of oriented Gaussian blobs; the latent steers each blob's
    center, orientation, anisotropic widths and amplitude through bounded
    smooth squashings, so nearby latents render to nearby images and latent
    midpoints render to visually in-between images.
    """

    NUM_BLOBS = 6

    def __init__(self, image_size: int, latent_dim: int, seed_seq: np.random.SeedSequence):
        self.image_size = image_size
        self.latent_dim = latent_dim
        rng = np.random.default_rng(seed_seq)
        k, d = self.NUM_BLOBS, latent_dim
        scale = 1.0 / np.sqrt(d)
        self._center_w = rng.standard_normal((k, 2, d)) * scale
        self._center_b = rng.standard_normal((k, 2)) * 0.4
        self._angle_w = rng.standard_normal((k, d)) * scale
        self._width_w = rng.standard_normal((k, 2, d)) * scale
        self._amp_w = rng.standard_normal((k, d)) * scale
        ys, xs = np.meshgrid(
            np.linspace(0.0, 1.0, image_size),
            np.linspace(0.0, 1.0, image_size),
            indexing="ij",
        )
        self._grid = np.stack([xs, ys], axis=-1)

    @classmethod
    def from_config(cls, config: SyntheticConfig) -> "BlobRenderer":
        renderer_seq = np.random.SeedSequence(config.seed).spawn(3)[0]
        return cls(config.image_size, config.latent_dim, renderer_seq)

    def render(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent must have shape ({self.latent_dim},), got {z.shape}")
        centers = 0.5 + 0.35 * np.tanh(self._center_w @ z + self._center_b)
        angles = np.pi * np.tanh(self._angle_w @ z)
        widths = 0.06 + 0.12 / (1.0 + np.exp(-(self._width_w @ z)))
        amps = 0.4 + 0.6 / (1.0 + np.exp(-(self._amp_w @ z)))
        field = np.zeros((self.image_size, self.image_size), dtype=np.float64)
        for k in range(self.NUM_BLOBS):
            delta = self._grid - centers[k]
            ca, sa = np.cos(angles[k]), np.sin(angles[k])
            u = delta[..., 0] * ca + delta[..., 1] * sa
            v = -delta[..., 0] * sa + delta[..., 1] * ca
            field += amps[k] * np.exp(-0.5 * ((u / widths[k, 0]) ** 2 + (v / widths[k, 1]) ** 2))
        img = 1.0 - np.exp(-field)
        return np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]


def synth_generate(config: SyntheticConfig) -> tuple[DatasetManifest, ImageStore, dict[str, np.ndarray]]:
    """Generate a deterministic synthetic population.

    Each identity gets one latent; every sample is rendered from the identity
    latent plus Gaussian latent noise.  Enrollment samples use half the noise
    scale of reference samples (document capture vs live capture).  Identity
    latents are returned so latent-space morphs can be generated later.
    """
    seq = np.random.SeedSequence(config.seed)
    _, latent_seq, noise_seq = seq.spawn(3)
    renderer = BlobRenderer.from_config(config)
    latent_rng = np.random.default_rng(latent_seq)
    noise_rng = np.random.default_rng(noise_seq)

    records: list[SampleRecord] = []
    images: dict[str, np.ndarray] = {}
    latents: dict[str, np.ndarray] = {}
    sigma = config.intra_class_noise
    for i in range(config.num_identities):
        ident = f"id{i:03d}"
        z = latent_rng.standard_normal(config.latent_dim)
        latents[ident] = z
        plan = [("enrollment", "enr", config.samples_per_identity_enroll, sigma * 0.5),
                ("reference", "ref", config.samples_per_identity_ref, sigma)]
        for modality, tag, count, scale in plan:
            for j in range(count):
                sample_id = f"{ident}_{tag}{j}"
                noise = noise_rng.standard_normal(config.latent_dim) * scale
                images[sample_id] = renderer.render(z + noise)
                records.append(SampleRecord(
                    sample_id=sample_id,
                    identity=ident,
                    modality=modality,
                    kind="bona_fide",
                    image_ref=f"images/{sample_id}.npy",
                ))
    provenance = (f"synthetic ids={config.num_identities} enroll={config.samples_per_identity_enroll} "
                  f"ref={config.samples_per_identity_ref} size={config.image_size} "
                  f"latent={config.latent_dim} sigma={config.intra_class_noise:g}")
    manifest = DatasetManifest.from_records(records, provenance=provenance, seed=config.seed)
    return manifest, ImageStore(images=images, manifest=manifest), latents


def save_dataset(
    out_dir: str | Path,
    manifest: DatasetManifest,
    images: ImageStore,
    latents: Mapping[str, np.ndarray] | None = None,
    config: SyntheticConfig | None = None,
) -> None:
    """Write manifest, every image referenced by it, latents and generator config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out_dir / "manifest.csv")
    for rec in manifest.records:
        if not rec.image_ref:
            continue
        target = out_dir / rec.image_ref
        target.parent.mkdir(parents=True, exist_ok=True)
        np.save(target, images.get(rec.sample_id))
    if latents is not None:
        ids = sorted(latents)
        np.savez(out_dir / "latents.npz",
                 identities=np.array(ids),
                 latents=np.stack([latents[i] for i in ids]))
    if config is not None:
        import dataclasses
        import json

        (out_dir / "synth_config.json").write_text(
            json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True) + "\n")


def load_dataset(
    data_dir: str | Path,
) -> tuple[DatasetManifest, ImageStore, dict[str, np.ndarray] | None, SyntheticConfig | None]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / "manifest.csv")
    store = ImageStore(root=data_dir, manifest=manifest)
    latents = None
    latents_path = data_dir / "latents.npz"
    if latents_path.exists():
        with np.load(latents_path) as npz:
            latents = {str(ident): vec for ident, vec in zip(npz["identities"], npz["latents"])}
    config = None
    config_path = data_dir / "synth_config.json"
    if config_path.exists():
        import json

        config = SyntheticConfig(**json.loads(config_path.read_text()))
    return manifest, store, latents, config
