"""Command-line pipeline: synthesize data, morph, train, embed, evaluate, compare.

A single JSON config with four sections (dataset, morph, train, eval) drives
every command; ``--set section.key=value`` overrides individual fields.  All
file outputs are deterministic functions of the config, carry a header with
the config hash and tool version, and are byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

import morphbench
from morphbench.data_model import (
    BlobRenderer,
    DatasetManifest,
    ImageStore,
    SyntheticConfig,
    load_dataset,
    save_dataset,
    synth_generate,
)
from morphbench.losses import LossConfig
from morphbench.metrics import (
    collect_morph_scores,
    fmr,
    gen_verification_protocol,
    minmax_mmpmr,
    mmpmr_curve,
    pair_scores,
    prodavg_mmpmr,
    save_curve,
    save_scores,
    solve_threshold,
)
from morphbench.morphgen import (
    MorphMethod,
    gen_morph_pair_protocol,
    materialize_morphs,
    materialize_selfmorphs,
    save_protocol,
)
from morphbench.sampler import SamplerConfig
from morphbench.trainer import (
    BackboneSpec,
    EmbeddingStore,
    TrainConfig,
    build_model,
    embed_all,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
)

OUTPUT_ROOT_ENV = "MORPHBENCH_OUTPUT_ROOT"

DEFAULT_CONFIG: dict[str, Any] = {
    "dataset": {
        "num_identities": 20,
        "samples_per_identity_enroll": 2,
        "samples_per_identity_ref": 2,
        "image_size": 32,
        "latent_dim": 8,
        "intra_class_noise": 0.6,
        "seed": 7,
    },
    "morph": {
        "method": "latent_blend",
        "coeff": 0.5,
        "count": 40,
        "selfmorphs_per_identity": 0,
        "selfmorph_method": "pixel_blend",
        "seed": 11,
    },
    "train": {
        "architecture": "tiny_cnn",
        "input_size": 32,
        "embedding_dim": 64,
        "channels": 1,
        "epochs": 10,
        "learning_rate": 1e-3,
        "batch_size": 16,
        "loss": "quadruplet",
        "margin": 0.2,
        "weights": [0.25, 0.25, 0.25, 0.25],
        "normalize_embeddings": True,
        "include_selfmorphs": False,
        "selfmorph_as_positive": True,
        "sampler_seed": 0,
        "seed": 3,
    },
    "eval": {
        "fnmr_grid": [0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
        "fnmr_anchor": 0.01,
        "probe_modality": "reference",
        "max_nonmatch": 50000,
        "max_match": None,
        "seed": 5,
    },
    "output_dir": "morphbench_run",
}


class ConfigError(ValueError):
    """Run configuration is missing, malformed, or inconsistent."""


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, text = assignment.split("=", 1)
    keys = dotted.split(".")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


@dataclass
class RunConfig:
    """Validated view over the merged JSON config."""

    raw: dict[str, Any]

    @classmethod
    def load(cls, path: str | Path | None, sets: Sequence[str] = ()) -> "RunConfig":
        if path is None:
            merged = copy.deepcopy(DEFAULT_CONFIG)
        else:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                user = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
            if "dataset" in user and "manifest_dir" in user["dataset"]:
                base = copy.deepcopy(DEFAULT_CONFIG)
                base["dataset"] = {"manifest_dir": ""}
                merged = _deep_merge(base, user)
            else:
                merged = _deep_merge(DEFAULT_CONFIG, user)
        cfg = cls(merged)
        for assignment in sets:
            _apply_set(cfg.raw, assignment)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.train_config()
        self.morph_method()
        if not self.uses_external_dataset():
            self.synthetic_config()
        grid = self.raw["eval"]["fnmr_grid"]
        if not grid or not all(0.0 < t < 1.0 for t in grid):
            raise ConfigError("eval.fnmr_grid must be a non-empty list of values in (0, 1)")

    def uses_external_dataset(self) -> bool:
        return "manifest_dir" in self.raw["dataset"]

    def synthetic_config(self) -> SyntheticConfig:
        d = self.raw["dataset"]
        try:
            return SyntheticConfig(
                num_identities=d["num_identities"],
                samples_per_identity_enroll=d["samples_per_identity_enroll"],
                samples_per_identity_ref=d["samples_per_identity_ref"],
                image_size=d["image_size"],
                latent_dim=d["latent_dim"],
                intra_class_noise=d["intra_class_noise"],
                seed=d["seed"],
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad dataset section: {exc}") from None

    def morph_method(self, selfmorph: bool = False) -> MorphMethod:
        m = self.raw["morph"]
        try:
            name = m["selfmorph_method"] if selfmorph else m["method"]
            return MorphMethod(name, m["coeff"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad morph section: {exc}") from None

    def train_config(self, loss_kind: str | None = None) -> TrainConfig:
        t = self.raw["train"]
        try:
            backbone = BackboneSpec(
                architecture=t["architecture"],
                input_size=t["input_size"],
                embedding_dim=t["embedding_dim"],
                channels=t["channels"],
            )
            return TrainConfig(
                backbone=backbone,
                epochs=t["epochs"],
                learning_rate=t["learning_rate"],
                batch_size=t["batch_size"],
                loss_kind=loss_kind or t["loss"],
                loss=LossConfig(
                    margin=t["margin"],
                    weights=tuple(t["weights"]),
                    normalize_embeddings=t["normalize_embeddings"],
                ),
                sampler=SamplerConfig(
                    batch_size=t["batch_size"],
                    seed=t["sampler_seed"],
                    include_selfmorphs=t["include_selfmorphs"],
                    selfmorph_as_positive=t["selfmorph_as_positive"],
                ),
                seed=t["seed"],
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad train section: {exc}") from None

    def output_dir(self, override: str | None = None) -> Path:
        import os

        out = Path(override or self.raw["output_dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def config_hash(self) -> str:
        sections = {k: self.raw[k] for k in ("dataset", "morph", "train", "eval")}
        canon = json.dumps(sections, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def header(self) -> str:
        return f"morphbench v{morphbench.__version__} config={self.config_hash()}"

    def label(self, loss_kind: str) -> str:
        return f"{loss_kind} {self.raw['morph']['method']}"


def _load_run_dataset(cfg: RunConfig, out_dir: Path):
    if cfg.uses_external_dataset():
        data_dir = Path(cfg.raw["dataset"]["manifest_dir"])
    else:
        data_dir = out_dir / "dataset"
    if not (data_dir / "manifest.csv").exists():
        raise ConfigError(f"dataset not found at {data_dir}; run `morphbench synth` first")
    return (data_dir,) + load_dataset(data_dir)


def cmd_synth(cfg: RunConfig, out_dir: Path) -> Path:
    """Generate and persist the synthetic dataset (no-op for external datasets)."""
    if cfg.uses_external_dataset():
        data_dir = Path(cfg.raw["dataset"]["manifest_dir"])
        if not (data_dir / "manifest.csv").exists():
            raise ConfigError(f"external dataset has no manifest: {data_dir}")
        print(f"synth: using external dataset at {data_dir}")
        return data_dir
    synth_cfg = cfg.synthetic_config()
    manifest, images, latents = synth_generate(synth_cfg)
    data_dir = out_dir / "dataset"
    save_dataset(data_dir, manifest, images, latents=latents, config=synth_cfg)
    print(f"synth: {len(manifest.records)} bona fide records -> {data_dir}")
    return data_dir


def cmd_morph(cfg: RunConfig, out_dir: Path) -> Path:
    """Build the pairing protocol and materialize morphs (and selfmorphs)."""
    data_dir, manifest, images, latents, synth_cfg = _load_run_dataset(cfg, out_dir)
    bona_only = DatasetManifest.from_records(
        [r for r in manifest.records if r.kind == "bona_fide"],
        provenance=manifest.provenance, seed=manifest.seed)
    m = cfg.raw["morph"]
    method = cfg.morph_method()
    renderer = BlobRenderer.from_config(synth_cfg) if synth_cfg is not None else None
    if method.method == "latent_blend" and (latents is None or renderer is None):
        raise ConfigError("latent_blend morphs need a synthetic dataset with stored latents")
    protocol = gen_morph_pair_protocol(bona_only, count=m["count"], seed=m["seed"])
    extended, _ = materialize_morphs(protocol, method, bona_only, images,
                                     latents=latents, renderer=renderer)
    if m["selfmorphs_per_identity"] > 0:
        extended, _ = materialize_selfmorphs(
            extended, images, cfg.morph_method(selfmorph=True),
            per_identity=m["selfmorphs_per_identity"], seed=m["seed"] + 1,
            latents=latents, renderer=renderer)
    save_dataset(data_dir, extended, images, latents=latents, config=synth_cfg)
    save_protocol(protocol, out_dir / "protocol.csv", header_comment=cfg.header())
    n_morphs = sum(1 for r in extended.records if r.kind == "morph")
    n_self = sum(1 for r in extended.records if r.kind == "selfmorph")
    print(f"morph: {n_morphs} morphs, {n_self} selfmorphs, protocol -> {out_dir / 'protocol.csv'}")
    return out_dir / "protocol.csv"


def cmd_train(cfg: RunConfig, out_dir: Path, loss_kind: str | None = None) -> Path:
    """Train one embedding model; artifacts are suffixed with the loss kind."""
    _, manifest, images, _, _ = _load_run_dataset(cfg, out_dir)
    train_cfg = cfg.train_config(loss_kind)
    model = build_model(train_cfg.backbone, seed=train_cfg.seed,
                        normalize=train_cfg.loss.normalize_embeddings)
    model, history = train(model, manifest, images, train_cfg)
    kind = train_cfg.loss_kind
    ckpt_path = out_dir / f"checkpoint_{kind}.pt"
    save_checkpoint(model, train_cfg.backbone, ckpt_path,
                    normalize=train_cfg.loss.normalize_embeddings)
    save_history(history, out_dir / f"history_{kind}.csv", header_comment=cfg.header())
    last = history[-1].mean_loss if history else float("nan")
    print(f"train[{kind}]: {train_cfg.epochs} epochs, final mean loss {last:.6g} -> {ckpt_path}")
    return ckpt_path


def cmd_embed(cfg: RunConfig, out_dir: Path, loss_kind: str | None = None) -> Path:
    """Embed every manifest record with a trained checkpoint."""
    _, manifest, images, _, _ = _load_run_dataset(cfg, out_dir)
    kind = loss_kind or cfg.raw["train"]["loss"]
    ckpt_path = out_dir / f"checkpoint_{kind}.pt"
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}; run `morphbench train` first")
    model, spec = load_checkpoint(ckpt_path)
    store = embed_all(model, manifest, images, spec)
    emb_path = out_dir / f"embeddings_{kind}.npz"
    store.save(emb_path)
    print(f"embed[{kind}]: {len(store)} embeddings (d={store.dim}) -> {emb_path}")
    return emb_path


def cmd_eval(cfg: RunConfig, out_dir: Path, loss_kind: str | None = None, plot: bool = False) -> dict:
    """Anchor the threshold, sweep the FNMR grid, and report MMPMR at the anchor."""
    _, manifest, _, _, _ = _load_run_dataset(cfg, out_dir)
    kind = loss_kind or cfg.raw["train"]["loss"]
    emb_path = out_dir / f"embeddings_{kind}.npz"
    if not emb_path.exists():
        raise ConfigError(f"embeddings not found: {emb_path}; run `morphbench embed` first")
    embeddings = EmbeddingStore.load(emb_path)
    e = cfg.raw["eval"]
    protocol = gen_verification_protocol(
        manifest, max_nonmatch=e["max_nonmatch"], max_match=e["max_match"], seed=e["seed"])
    genuine = pair_scores(embeddings, protocol.match_pairs)
    impostor = pair_scores(embeddings, protocol.nonmatch_pairs)
    scoreset = collect_morph_scores(embeddings, manifest, probe_modality=e["probe_modality"])
    points = mmpmr_curve(scoreset, genuine, e["fnmr_grid"])
    save_curve(points, out_dir / f"curve_{kind}.csv", header_comment=cfg.header())
    save_scores(scoreset, out_dir / f"scores_{kind}.csv", header_comment=cfg.header())

    anchor = e["fnmr_anchor"]
    res = solve_threshold(genuine, anchor)
    summary = {
        "_meta": {"tool": f"morphbench v{morphbench.__version__}", "config": cfg.config_hash()},
        "label": cfg.label(kind),
        "loss_kind": kind,
        "fnmr_target": anchor,
        "tau": res.tau,
        "achieved_fnmr": res.achieved_fnmr,
        "fmr": fmr(impostor, res.tau),
        "minmax_mmpmr": minmax_mmpmr(scoreset, res.tau),
        "prodavg_mmpmr": prodavg_mmpmr(scoreset, res.tau),
        "num_morphs_scored": len(scoreset.morphs),
        "num_morphs_excluded": len(scoreset.excluded),
        "num_match_pairs": len(protocol.match_pairs),
        "num_nonmatch_pairs": len(protocol.nonmatch_pairs),
    }
    summary_path = out_dir / f"summary_{kind}.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if plot:
        _plot_curve(points, out_dir / f"curve_{kind}.svg", cfg.label(kind))
    print(f"eval[{kind}]: FNMR={anchor:g} tau={res.tau:.6g} "
          f"MinMax-MMPMR={summary['minmax_mmpmr']:.6g} ProdAvg-MMPMR={summary['prodavg_mmpmr']:.6g}")
    return summary


def _plot_curve(points, path: Path, label: str) -> None:
    try:
        import matplotlib

        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("--plot needs matplotlib (pip install morphbench[plot])") from None
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = [p.fnmr for p in points]
    ax.plot(xs, [p.minmax for p in points], marker="o", label="MinMax-MMPMR")
    ax.plot(xs, [p.prodavg for p in points], marker="s", label="ProdAvg-MMPMR")
    ax.set_xscale("log")
    ax.set_xlabel("FNMR")
    ax.set_ylabel("MMPMR")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(label)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_compare(cfg_a: RunConfig, cfg_b: RunConfig, out_a: Path, out_b: Path,
                loss_a: str | None = None, loss_b: str | None = None) -> Path:
    """Side-by-side MMPMR table for two evaluated runs."""
    rows = []
    for cfg, out_dir, loss in ((cfg_a, out_a, loss_a), (cfg_b, out_b, loss_b)):
        kind = loss or cfg.raw["train"]["loss"]
        summary_path = out_dir / f"summary_{kind}.json"
        if not summary_path.exists():
            raise ConfigError(f"summary not found: {summary_path}; run `morphbench eval` first")
        rows.append(json.loads(summary_path.read_text()))
    anchor = rows[0]["fnmr_target"]
    width = max(len(r["label"]) for r in rows) + 2
    print(f"{'Model & Protocol':<{width}} {'MinMax-MMPMR':>14} {'ProdAvg-MMPMR':>15}   (at FNMR={anchor:g})")
    for r in rows:
        print(f"{r['label']:<{width}} {r['minmax_mmpmr']:>14.6g} {r['prodavg_mmpmr']:>15.6g}")
    compare_path = out_a / "compare.csv"
    with compare_path.open("w", newline="") as fh:
        fh.write(f"# {cfg_a.header()}\n")
        fh.write("label,fnmr_target,minmax_mmpmr,prodavg_mmpmr\n")
        for r in rows:
            fh.write(f"{r['label']},{r['fnmr_target']:.9g},"
                     f"{r['minmax_mmpmr']:.9g},{r['prodavg_mmpmr']:.9g}\n")
    print(f"compare -> {compare_path}")
    return compare_path


def cmd_demo(out_dir: Path, plot: bool = False) -> None:
    """Full pipeline on the bundled small config: both losses plus a comparison."""
    cfg = RunConfig.load(None)
    out_dir.mkdir(parents=True, exist_ok=True)
    cmd_synth(cfg, out_dir)
    cmd_morph(cfg, out_dir)
    for kind in ("quadruplet", "triplet"):
        cmd_train(cfg, out_dir, loss_kind=kind)
        cmd_embed(cfg, out_dir, loss_kind=kind)
        cmd_eval(cfg, out_dir, loss_kind=kind, plot=plot)
    cmd_compare(cfg, cfg, out_dir, out_dir, loss_a="quadruplet", loss_b="triplet")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphbench",
        description="Train morph-aware embedding models and benchmark their MMPMR vulnerability.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run config (defaults to the bundled demo config)")
        p.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field (dotted path)")
        p.add_argument("--out", help="override the config's output directory")

    for name, help_text in (
        ("synth", "generate the synthetic dataset"),
        ("morph", "generate morph pairing protocol and morph images"),
        ("train", "train an embedding model"),
        ("embed", "embed every manifest record with a trained checkpoint"),
        ("eval", "compute FNMR-anchored MMPMR curve and summary"),
    ):
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        if name in ("train", "embed", "eval"):
            p.add_argument("--loss", choices=["triplet", "quadruplet"],
                           help="override train.loss for this command")
        if name == "eval":
            p.add_argument("--plot", action="store_true", help="also write an SVG of the curve")

    p = sub.add_parser("compare", help="side-by-side MMPMR table for two evaluated runs")
    p.add_argument("--config-a", required=True)
    p.add_argument("--config-b", required=True)
    p.add_argument("--set-a", dest="sets_a", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--set-b", dest="sets_b", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--loss-a", choices=["triplet", "quadruplet"])
    p.add_argument("--loss-b", choices=["triplet", "quadruplet"])

    p = sub.add_parser("demo", help="run the whole pipeline on a small bundled config")
    p.add_argument("--out", default="morphbench_demo", help="output directory")
    p.add_argument("--plot", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "demo":
            cfg = RunConfig.load(None)
            cmd_demo(cfg.output_dir(args.out), plot=args.plot)
            return 0
        if args.command == "compare":
            cfg_a = RunConfig.load(args.config_a, args.sets_a)
            cfg_b = RunConfig.load(args.config_b, args.sets_b)
            cmd_compare(cfg_a, cfg_b, cfg_a.output_dir(), cfg_b.output_dir(),
                        loss_a=args.loss_a, loss_b=args.loss_b)
            return 0
        cfg = RunConfig.load(args.config, args.sets)
        out_dir = cfg.output_dir(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            cmd_synth(cfg, out_dir)
        elif args.command == "morph":
            cmd_morph(cfg, out_dir)
        elif args.command == "train":
            cmd_train(cfg, out_dir, loss_kind=args.loss)
        elif args.command == "embed":
            cmd_embed(cfg, out_dir, loss_kind=args.loss)
        elif args.command == "eval":
            cmd_eval(cfg, out_dir, loss_kind=args.loss, plot=args.plot)
        return 0
    except Exception as exc:  # single-line machine-parseable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
