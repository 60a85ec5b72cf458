"""Embedding model construction, seeded training, and manifest-wide embedding.

All four quadruplet branches share one set of weights: a batch is embedded
with a single forward pass over the concatenated anchor/positive/negative/
morph images.  Training is deterministic given (manifest, config) on a fixed
machine; checkpoints round-trip to bit-identical embeddings.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from morphbench.data_model import DatasetManifest, ImageStore
from morphbench.losses import LossConfig, quadruplet_loss, triplet_loss
from morphbench.sampler import SamplerConfig, batchify, build_quadruplets, build_triplets

ARCHITECTURES = ("tiny_cnn", "resnet50")


class TrainingError(RuntimeError):
    """Training aborted: bad configuration, unusable data, or a non-finite loss."""


@dataclass(frozen=True)
class BackboneSpec:
    architecture: str = "tiny_cnn"
    input_size: int = 32
    embedding_dim: int = 64
    channels: int = 1

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unsupported architecture {self.architecture!r}")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneSpec = BackboneSpec()
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 32
    loss_kind: str = "quadruplet"
    loss: LossConfig = LossConfig()
    sampler: SamplerConfig = SamplerConfig()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in ("triplet", "quadruplet"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    skipped_morphs: int


class TinyCNN(nn.Module):
    """Three conv/pool stages and a linear projection onto the unit sphere."""

    def __init__(self, channels: int, embedding_dim: int, normalize: bool = True):
        super().__init__()
        self.normalize = normalize
        self.features = nn.Sequential(
            nn.Conv2d(channels, 16, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.proj = nn.Linear(64 * 4 * 4, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = self.proj(h.flatten(1))
        if self.normalize:
            h = torch.nn.functional.normalize(h, dim=-1)
        return h


class _ResNetEmbedder(nn.Module):
    def __init__(self, channels: int, embedding_dim: int, normalize: bool = True):
        super().__init__()
        import torchvision

        self.normalize = normalize
        net = torchvision.models.resnet50(weights=None)
        if channels != 3:
            net.conv1 = nn.Conv2d(channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
        net.fc = nn.Linear(net.fc.in_features, embedding_dim)
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        if self.normalize:
            h = torch.nn.functional.normalize(h, dim=-1)
        return h


def build_model(spec: BackboneSpec, seed: int = 0, normalize: bool = True) -> nn.Module:
    """Deterministically initialized embedding model for the given spec."""
    torch.manual_seed(seed)
    if spec.architecture == "tiny_cnn":
        return TinyCNN(spec.channels, spec.embedding_dim, normalize=normalize)
    return _ResNetEmbedder(spec.channels, spec.embedding_dim, normalize=normalize)


def model_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def _stack_images(ids: Sequence[str], images: ImageStore, spec: BackboneSpec) -> torch.Tensor:
    arrays = []
    for sid in ids:
        img = images.get(sid)
        if img.shape[0] != spec.input_size or img.shape[1] != spec.input_size or img.shape[2] != spec.channels:
            raise TrainingError(
                f"sample {sid!r} has shape {img.shape}, expected "
                f"({spec.input_size}, {spec.input_size}, {spec.channels})")
        arrays.append(np.transpose(img, (2, 0, 1)))
    return torch.from_numpy(np.stack(arrays)).float()


def train(
    model: nn.Module,
    manifest: DatasetManifest,
    images: ImageStore,
    cfg: TrainConfig,
) -> tuple[nn.Module, list[EpochStats]]:
    """Adam training over per-epoch sampler passes; returns per-epoch stats.

    Every epoch re-derives the sampler seed as (base seed + epoch), so the
    quadruplet model and the triplet baseline see identical identity draws
    under the same config.
    """
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history: list[EpochStats] = []
    model.train()
    for epoch in range(cfg.epochs):
        epoch_sampler = replace(cfg.sampler, seed=cfg.sampler.seed + epoch)
        if cfg.loss_kind == "quadruplet":
            plan = build_quadruplets(manifest, epoch_sampler)
            items = plan.quadruplets
            skipped = plan.skipped_morphs
        else:
            plan = build_triplets(manifest, epoch_sampler)
            items = plan.triplets
            skipped = plan.skipped_morphs
        total_loss = 0.0
        total_items = 0
        for batch_no, batch in enumerate(batchify(items, cfg.batch_size)):
            roles = [[it.anchor for it in batch], [it.positive for it in batch], [it.negative for it in batch]]
            if cfg.loss_kind == "quadruplet":
                roles.append([it.morph for it in batch])
            flat_ids = [sid for role in roles for sid in role]
            stacked = _stack_images(flat_ids, images, cfg.backbone)
            embedded = model(stacked)
            parts = torch.split(embedded, len(batch))
            if cfg.loss_kind == "quadruplet":
                loss = quadruplet_loss(*parts, cfg=cfg.loss)
            else:
                loss = triplet_loss(*parts, cfg=cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch {batch_no}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.detach().item() * len(batch)
            total_items += len(batch)
        history.append(EpochStats(epoch, total_loss / total_items, skipped))
    model.eval()
    return model, history


@dataclass
class EmbeddingStore:
    """sample_id -> embedding vector, with the producing model's fingerprint."""

    embeddings: dict[str, np.ndarray]
    dim: int
    fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.embeddings)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.embeddings

    def vector(self, sample_id: str) -> np.ndarray:
        try:
            return self.embeddings[sample_id]
        except KeyError:
            raise KeyError(f"no embedding for sample {sample_id!r}") from None

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ids = list(self.embeddings)
        matrix = np.stack([self.embeddings[i] for i in ids]) if ids else np.zeros((0, self.dim))
        np.savez(path, sample_ids=np.array(ids), matrix=matrix,
                 dim=np.array(self.dim), fingerprint=np.array(self.fingerprint))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        with np.load(Path(path)) as npz:
            ids = [str(s) for s in npz["sample_ids"]]
            matrix = npz["matrix"]
            return cls(
                embeddings={sid: matrix[i] for i, sid in enumerate(ids)},
                dim=int(npz["dim"]),
                fingerprint=str(npz["fingerprint"]),
            )


def embed_all(
    model: nn.Module,
    manifest: DatasetManifest,
    images: ImageStore,
    spec: BackboneSpec,
    batch_size: int = 64,
) -> EmbeddingStore:
    """One embedding per manifest record (morphs and selfmorphs included)."""
    model.eval()
    out: dict[str, np.ndarray] = {}
    ids = [rec.sample_id for rec in manifest.records]
    with torch.no_grad():
        for chunk in batchify(ids, batch_size):
            stacked = _stack_images(chunk, images, spec)
            vecs = model(stacked).numpy().astype(np.float32)
            for sid, vec in zip(chunk, vecs):
                out[sid] = vec
    return EmbeddingStore(out, dim=spec.embedding_dim, fingerprint=model_fingerprint(model))


CHECKPOINT_FORMAT = "morphbench-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: nn.Module, spec: BackboneSpec, path: str | Path, normalize: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(spec),
        "normalize": normalize,
        "fingerprint": model_fingerprint(model),
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path: str | Path) -> tuple[nn.Module, BackboneSpec]:
    path = Path(path)
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path} is not a morphbench checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(f"unsupported checkpoint version {payload.get('version')!r}")
    spec = BackboneSpec(**payload["backbone"])
    model = build_model(spec, seed=0, normalize=payload.get("normalize", True))
    model.load_state_dict(payload["state_dict"])
    expected = payload.get("fingerprint")
    actual = model_fingerprint(model)
    if expected and expected != actual:
        raise TrainingError(f"checkpoint fingerprint mismatch: {expected} != {actual}")
    model.eval()
    return model, spec


def save_history(history: Sequence[EpochStats], path: str | Path, header_comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "skipped_morphs"])
        for row in history:
            writer.writerow([row.epoch, f"{row.mean_loss:.9g}", row.skipped_morphs])
