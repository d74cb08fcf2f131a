"""Run configuration (flat INI with sections) and run-directory layout.

A run directory is created by the data-generation stage and grows
append-only through training, stats fitting, and experiments:

    runs/<id>/
      config.ini       resolved configuration echo
      dataset/         train/test files + manifest
      models/          network files (with provenance hashes)
      stats/           hurdle stats table + training latents
      explanations/    per-image explanation records and images
      reports/         CSV reports

Every artifact embeds the sha256 of its inputs; commands verify the chain
before running so stale artifacts fail loudly instead of silently mixing.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

from .datagen import (
    Dataset,
    GlyphParams,
    file_sha256,
    load_dataset,
)
from .hurdle import StatsTable, load_latents, load_stats
from .netcore import Network, load_network, load_provenance
from .pipeline import OptimSettings
from .training import TrainConfig


class ConfigError(Exception):
    pass


class PrerequisiteError(Exception):
    pass


class ProvenanceError(Exception):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_train_per_class: int = 250
    n_test_per_class: int = 100
    glyphs: GlyphParams = GlyphParams()


@dataclass(frozen=True)
class BaselinesConfig:
    lr: float = 0.02
    max_steps: int = 2000
    lam: float = 30.0
    lam_sweep: tuple = (10.0, 30.0, 100.0)


@dataclass(frozen=True)
class ExperimentConfig:
    n_correct: int = 30
    n_close_correct: int = 20
    close_correct_max_prob: float = 0.8
    n_semifactual: int = 20
    max_failure_fraction: float = 0.25


@dataclass(frozen=True)
class MetricsConfig:
    mc_passes: int = 1000
    knn_k: int = 1
    knn_k_extra: int = 3


@dataclass
class RunConfig:
    seed: int = 7
    alpha: float = 0.05
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    classifier: TrainConfig = None
    generator: TrainConfig = None
    autoencoders: TrainConfig = None
    optim: OptimSettings = field(default_factory=OptimSettings)
    baselines: BaselinesConfig = field(default_factory=BaselinesConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.classifier is None:
            self.classifier = TrainConfig(
                epochs=60, hidden=(64, 32), seed=self.seed + 11,
                early_stop_accuracy=0.97,
            )
        if self.generator is None:
            self.generator = TrainConfig(
                epochs=400, hidden=(96,), latent_dim=8, seed=self.seed + 22
            )
        if self.autoencoders is None:
            self.autoencoders = TrainConfig(
                epochs=150, hidden=(64,), latent_dim=8, seed=self.seed + 33
            )
        if not (0.0 < self.alpha < 0.5):
            raise ConfigError(f"alpha must be in (0, 0.5), got {self.alpha}")


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if cast is bool:
            return parser.getboolean(section, key)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _float_list(raw: str) -> tuple:
    return tuple(float(v.strip()) for v in raw.split(",") if v.strip())


_KNOWN_SECTIONS = {
    "run",
    "dataset",
    "classifier",
    "generator",
    "autoencoders",
    "pipeline",
    "baselines",
    "experiment",
    "metrics",
}


def parse_config(path: Optional[str]) -> RunConfig:
    """Load an INI config; missing file or sections fall back to defaults."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = set(parser.sections()) - _KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    seed = _get(parser, "run", "seed", int, 7)
    alpha = _get(parser, "run", "alpha", float, 0.05)

    glyphs = GlyphParams(
        side=_get(parser, "dataset", "side", int, 16),
        n_classes=_get(parser, "dataset", "n_classes", int, 4),
        translate_jitter=_get(parser, "dataset", "translate_jitter", int, 2),
        thickness_min=_get(parser, "dataset", "thickness_min", int, 1),
        thickness_max=_get(parser, "dataset", "thickness_max", int, 3),
        intensity_min=_get(parser, "dataset", "intensity_min", float, 0.7),
        intensity_max=_get(parser, "dataset", "intensity_max", float, 1.0),
        noise_sigma=_get(parser, "dataset", "noise_sigma", float, 0.05),
        seed=seed,
    )
    dataset = DatasetConfig(
        n_train_per_class=_get(parser, "dataset", "n_train_per_class", int, 250),
        n_test_per_class=_get(parser, "dataset", "n_test_per_class", int, 100),
        glyphs=glyphs,
    )

    def train_section(name: str, seed_offset: int, defaults: dict) -> TrainConfig:
        hidden_default = defaults["hidden"]
        if parser.has_option(name, "hidden"):
            hidden = tuple(
                int(v.strip()) for v in parser.get(name, "hidden").split(",") if v.strip()
            )
        else:
            hidden = hidden_default
        return TrainConfig(
            epochs=_get(parser, name, "epochs", int, defaults["epochs"]),
            batch_size=_get(parser, name, "batch_size", int, 32),
            lr=_get(parser, name, "lr", float, 0.003),
            dropout_rate=_get(parser, name, "dropout", float, 0.25),
            latent_dim=_get(parser, name, "latent_dim", int, defaults.get("latent_dim", 8)),
            hidden=hidden,
            seed=_get(parser, name, "seed", int, seed + seed_offset),
            early_stop_accuracy=_get(
                parser, name, "early_stop_accuracy", float, defaults.get("early_stop", 0.97)
            ),
            min_accuracy=_get(parser, name, "min_accuracy", float, 0.85),
            recon_mse_target=_get(parser, name, "recon_mse_target", float, 0.01),
        )

    classifier = train_section("classifier", 11, {"epochs": 60, "hidden": (64, 32)})
    generator = train_section("generator", 22, {"epochs": 400, "hidden": (96,)})
    autoencoders = train_section("autoencoders", 33, {"epochs": 150, "hidden": (64,)})

    optim = OptimSettings(
        invert_restarts=_get(parser, "pipeline", "invert_restarts", int, 8),
        invert_steps=_get(parser, "pipeline", "invert_steps", int, 800),
        invert_lr=_get(parser, "pipeline", "invert_lr", float, 0.05),
        ascent_lr=_get(parser, "pipeline", "ascent_lr", float, 0.02),
        ascent_max_steps=_get(parser, "pipeline", "ascent_max_steps", int, 2000),
        visualize_steps=_get(parser, "pipeline", "visualize_steps", int, 400),
        visualize_lr=_get(parser, "pipeline", "visualize_lr", float, 0.05),
    )
    baselines = BaselinesConfig(
        lr=_get(parser, "baselines", "lr", float, 0.02),
        max_steps=_get(parser, "baselines", "max_steps", int, 2000),
        lam=_get(parser, "baselines", "lambda", float, 30.0),
        lam_sweep=_get(
            parser, "baselines", "lambda_sweep", _float_list, (10.0, 30.0, 100.0)
        ),
    )
    experiment = ExperimentConfig(
        n_correct=_get(parser, "experiment", "n_correct", int, 30),
        n_close_correct=_get(parser, "experiment", "n_close_correct", int, 20),
        close_correct_max_prob=_get(
            parser, "experiment", "close_correct_max_prob", float, 0.8
        ),
        n_semifactual=_get(parser, "experiment", "n_semifactual", int, 20),
        max_failure_fraction=_get(
            parser, "experiment", "max_failure_fraction", float, 0.25
        ),
    )
    metrics = MetricsConfig(
        mc_passes=_get(parser, "metrics", "mc_passes", int, 1000),
        knn_k=_get(parser, "metrics", "knn_k", int, 1),
        knn_k_extra=_get(parser, "metrics", "knn_k_extra", int, 3),
    )
    return RunConfig(
        seed=seed,
        alpha=alpha,
        dataset=dataset,
        classifier=classifier,
        generator=generator,
        autoencoders=autoencoders,
        optim=optim,
        baselines=baselines,
        experiment=experiment,
        metrics=metrics,
    )


def write_config(cfg: RunConfig, path) -> None:
    """Echo the resolved configuration as the flat sectioned format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_ini_text(cfg))


def default_config_ini() -> str:
    return config_ini_text(parse_config(None))


def config_ini_text(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": cfg.seed, "alpha": cfg.alpha}
    g = cfg.dataset.glyphs
    parser["dataset"] = {
        "n_train_per_class": cfg.dataset.n_train_per_class,
        "n_test_per_class": cfg.dataset.n_test_per_class,
        "side": g.side,
        "n_classes": g.n_classes,
        "translate_jitter": g.translate_jitter,
        "thickness_min": g.thickness_min,
        "thickness_max": g.thickness_max,
        "intensity_min": g.intensity_min,
        "intensity_max": g.intensity_max,
        "noise_sigma": g.noise_sigma,
    }
    for name, tc in (
        ("classifier", cfg.classifier),
        ("generator", cfg.generator),
        ("autoencoders", cfg.autoencoders),
    ):
        parser[name] = {
            "epochs": tc.epochs,
            "batch_size": tc.batch_size,
            "lr": tc.lr,
            "dropout": tc.dropout_rate,
            "latent_dim": tc.latent_dim,
            "hidden": ",".join(str(h) for h in tc.hidden),
            "seed": tc.seed,
            "early_stop_accuracy": tc.early_stop_accuracy,
            "min_accuracy": tc.min_accuracy,
            "recon_mse_target": tc.recon_mse_target,
        }
    o = cfg.optim
    parser["pipeline"] = {
        "invert_restarts": o.invert_restarts,
        "invert_steps": o.invert_steps,
        "invert_lr": o.invert_lr,
        "ascent_lr": o.ascent_lr,
        "ascent_max_steps": o.ascent_max_steps,
        "visualize_steps": o.visualize_steps,
        "visualize_lr": o.visualize_lr,
    }
    b = cfg.baselines
    parser["baselines"] = {
        "lr": b.lr,
        "max_steps": b.max_steps,
        "lambda": b.lam,
        "lambda_sweep": ",".join(str(v) for v in b.lam_sweep),
    }
    e = cfg.experiment
    parser["experiment"] = {
        "n_correct": e.n_correct,
        "n_close_correct": e.n_close_correct,
        "close_correct_max_prob": e.close_correct_max_prob,
        "n_semifactual": e.n_semifactual,
        "max_failure_fraction": e.max_failure_fraction,
    }
    m = cfg.metrics
    parser["metrics"] = {
        "mc_passes": m.mc_passes,
        "knn_k": m.knn_k,
        "knn_k_extra": m.knn_k_extra,
    }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Run directory layout


@dataclass
class RunPaths:
    root: str

    def __post_init__(self):
        self.root = os.path.abspath(self.root)

    @property
    def config(self):
        return os.path.join(self.root, "config.ini")

    def dataset(self, name=""):
        return os.path.join(self.root, "dataset", name)

    def models(self, name=""):
        return os.path.join(self.root, "models", name)

    def stats(self, name=""):
        return os.path.join(self.root, "stats", name)

    def explanations(self, *parts):
        return os.path.join(self.root, "explanations", *parts)

    def reports(self, name=""):
        return os.path.join(self.root, "reports", name)

    def ensure_tree(self) -> None:
        for sub in ("dataset", "models", "stats", "explanations", "reports"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    # stage sentinels -------------------------------------------------------

    def datagen_done(self) -> bool:
        return os.path.exists(self.dataset("manifest.json"))

    def train_done(self) -> bool:
        return all(
            os.path.exists(self.models(n))
            for n in ("classifier.json", "generator.json", "ae_full.json")
        )

    def stats_done(self) -> bool:
        return os.path.exists(self.stats("stats.json"))

    def experiment_done(self, expt: int) -> bool:
        return os.path.exists(self.reports(f"expt{expt}_rows.csv"))

    def require_datagen(self) -> None:
        if not self.datagen_done():
            raise PrerequisiteError(
                "no dataset in this run directory; run `piece datagen` first"
            )

    def require_train(self) -> None:
        if not self.train_done():
            raise PrerequisiteError(
                "trained models missing; run `piece train` first"
            )

    def require_stats(self) -> None:
        if not self.stats_done():
            raise PrerequisiteError(
                "stats table missing; run `piece fit-stats` first"
            )


MODEL_FILES = {
    "classifier": "classifier.json",
    "encoder": "encoder.json",
    "generator": "generator.json",
    "ae_full": "ae_full.json",
}


@dataclass
class RunArtifacts:
    config: RunConfig
    train_data: Dataset
    test_data: Dataset
    classifier: Network
    generator: Network
    class_aes: list
    ae_full: Network
    stats: StatsTable
    latents: object
    predicted: object
    manifest_sha: str
    classifier_sha: str


def load_run(paths: RunPaths, verify: bool = True) -> RunArtifacts:
    """Load every artifact of a run, checking the provenance chain."""
    paths.require_datagen()
    paths.require_train()
    paths.require_stats()
    cfg = parse_config(paths.config)
    manifest_sha = file_sha256(paths.dataset("manifest.json"))
    train_data = load_dataset(paths.dataset("train.json"))
    test_data = load_dataset(paths.dataset("test.json"))
    classifier = load_network(paths.models("classifier.json"))
    generator = load_network(paths.models("generator.json"))
    n_classes = cfg.dataset.glyphs.n_classes
    class_aes = [
        load_network(paths.models(f"ae_class_{c}.json")) for c in range(n_classes)
    ]
    ae_full = load_network(paths.models("ae_full.json"))
    stats = load_stats(paths.stats("stats.json"))
    latents, predicted = load_latents(paths.stats("latents.json"))
    classifier_sha = file_sha256(paths.models("classifier.json"))
    if verify:
        model_files = dict(MODEL_FILES)
        for c in range(n_classes):
            model_files[f"ae_class_{c}"] = f"ae_class_{c}.json"
        for name, filename in model_files.items():
            prov = load_provenance(paths.models(filename))
            if prov.get("dataset_sha") != manifest_sha:
                raise ProvenanceError(
                    f"model {name} was trained on a different dataset "
                    f"(manifest hash mismatch); regenerate with `piece train --force`"
                )
        if stats.classifier_sha != classifier_sha:
            raise ProvenanceError(
                "stats table does not match the stored classifier; "
                "refit with `piece fit-stats --force`"
            )
        if stats.dataset_sha != manifest_sha:
            raise ProvenanceError(
                "stats table was fitted on a different dataset; "
                "refit with `piece fit-stats --force`"
            )
    return RunArtifacts(
        config=cfg,
        train_data=train_data,
        test_data=test_data,
        classifier=classifier,
        generator=generator,
        class_aes=class_aes,
        ae_full=ae_full,
        stats=stats,
        latents=latents,
        predicted=predicted,
        manifest_sha=manifest_sha,
        classifier_sha=classifier_sha,
    )
