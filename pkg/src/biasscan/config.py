"""Experiment configuration: one YAML tree, unknown keys rejected.

Relative data paths resolve against the directory of the config file;
``output_dir`` resolves against the working directory.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .attack import AttackConfig
from .poison import PoisonPlan
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(d, allowed: set[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class DataConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    train_limit: int | None = None
    test_limit: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    poison: PoisonPlan
    model_seed: int = 0
    run_seed: int = 0
    output_dir: str = "runs/experiment"
    clean: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig.finetune_default)
    attacks: tuple[AttackConfig, ...] = ()
    pairs: tuple[AttackConfig, ...] = ()
    threshold: float = 2.0
    workers: int = 1
    png: bool = False
    base_dir: str = field(default=".", compare=False)

    def data_path(self, name: str) -> Path:
        p = Path(getattr(self.data, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        def attack(a: AttackConfig) -> dict:
            return {"seed_kind": a.seed_kind, "epsilon": a.epsilon,
                    "iterations": a.iterations, "samples_per_cell": a.samples_per_cell}

        def train(t: TrainConfig) -> dict:
            d = asdict(t)
            d.pop("role")
            return d

        data = {k: v for k, v in asdict(self.data).items() if v is not None}
        return {
            "data": data,
            "model_seed": self.model_seed,
            "run_seed": self.run_seed,
            "output_dir": self.output_dir,
            "train": {"clean": train(self.clean), "finetune": train(self.finetune)},
            "poison": self.poison.to_dict(),
            "attacks": [attack(a) for a in self.attacks],
            "pairs": [attack(a) for a in self.pairs],
            "threshold": self.threshold,
            "workers": self.workers,
            "png": self.png,
        }

    def with_overrides(self, *, out=None, seed=None, epsilons=None, seed_kind=None,
                       samples=None, iters=None) -> "ExperimentConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, output_dir=str(out))
        if seed is not None:
            cfg = replace(cfg, run_seed=int(seed))

        def rework(grid: tuple[AttackConfig, ...]) -> tuple[AttackConfig, ...]:
            grid = tuple(grid)
            if seed_kind not in (None, "all"):
                kept = tuple(a for a in grid if a.seed_kind == seed_kind)
                grid = kept or tuple(replace(a, seed_kind=seed_kind) for a in grid[:1])
            if epsilons:
                kinds = list(dict.fromkeys(a.seed_kind for a in grid))
                base = {a.seed_kind: a for a in grid}
                grid = tuple(replace(base[k], epsilon=float(e)) for k in kinds for e in epsilons)
            if samples is not None:
                grid = tuple(replace(a, samples_per_cell=int(samples)) for a in grid)
            if iters is not None:
                grid = tuple(replace(a, iterations=int(iters)) for a in grid)
            return tuple(replace(a, seed=cfg.run_seed) for a in grid)

        return replace(cfg, attacks=rework(cfg.attacks), pairs=rework(cfg.pairs))


_TOP = {"data", "model_seed", "run_seed", "output_dir", "train", "poison", "attacks", "pairs",
        "threshold", "workers", "png"}
_DATA = {"train_images", "train_labels", "test_images", "test_labels", "train_limit", "test_limit"}
_TRAIN = {"epochs", "batch_size", "lr", "momentum", "seed"}
_ATTACK = {"seed_kind", "epsilon", "iterations", "samples_per_cell"}


def config_from_dict(d: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    _strict(d, _TOP, "config")
    for key in ("data", "poison"):
        if key not in d:
            raise ConfigError(f"config: missing required section {key!r}")
    try:
        data = DataConfig(**_strict(d["data"], _DATA, "data"))
        train = _strict(d.get("train", {}), {"clean", "finetune"}, "train")
        clean = TrainConfig(role="clean", **_strict(train.get("clean", {}), _TRAIN, "train.clean"))
        ft_defaults = asdict(TrainConfig.finetune_default())
        ft_defaults.update(_strict(train.get("finetune", {}), _TRAIN, "train.finetune"))
        finetune = TrainConfig(**ft_defaults)
        poison = PoisonPlan.from_dict(_strict(d["poison"], {"source", "target", "count", "seed", "trigger"}, "poison"))
        run_seed = int(d.get("run_seed", 0))

        def grid(key: str, loss: str) -> tuple[AttackConfig, ...]:
            entries = d.get(key, [])
            if not isinstance(entries, list):
                raise ConfigError(f"{key}: expected a list")
            return tuple(AttackConfig(loss_kind=loss, seed=run_seed,
                                      **_strict(e, _ATTACK, f"{key}[{i}]"))
                         for i, e in enumerate(entries))

        return ExperimentConfig(
            data=data,
            poison=poison,
            model_seed=int(d.get("model_seed", 0)),
            run_seed=run_seed,
            output_dir=str(d.get("output_dir", "runs/experiment")),
            clean=clean,
            finetune=finetune,
            attacks=grid("attacks", "targeted"),
            pairs=grid("pairs", "paired"),
            threshold=float(d.get("threshold", 2.0)),
            workers=int(d.get("workers", 1)),
            png=bool(d.get("png", False)),
            base_dir=str(base_dir),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw or {}, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
