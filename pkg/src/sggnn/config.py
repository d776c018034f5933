"""Experiment configuration: a flat key=value text format with defaults.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected so typos fail fast. The full key list with
defaults lives in ``DEFAULTS`` and is documented in the README. A sha256
hash over the canonical serialization identifies a configuration: any field
change produces a new hash.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .corpus import SynthConfig
from .errors import ConfigError
from .evaluation import SweepPoint, default_sweep_grid
from .graph import FusionConfig
from .trainer import SamplerConfig, TrainSchedule

# key -> (type, default). Types: int, float, str.
DEFAULTS: dict[str, tuple[type, object]] = {
    "corpus.path": (str, ""),
    "corpus.num_identities": (int, 100),
    "corpus.images_per_identity": (int, 8),
    "corpus.dim": (int, 64),
    "corpus.center_scale": (float, 1.0),
    "corpus.noise_sigma": (float, 0.8),
    "corpus.hard_fraction": (float, 0.25),
    "corpus.hard_shift": (float, 0.5),
    "corpus.seed": (int, 7),
    "split.train_fraction": (float, 0.5),
    "split.seed": (int, 11),
    "model.feat_dim": (int, 64),
    "model.hidden_dim": (int, 0),  # 0 = same as the raw dimension
    "model.seed": (int, 3),
    "sampler.k": (int, 4),
    "sampler.m": (int, 8),
    "sampler.seed": (int, 5),
    "train.stage1_lr": (float, 0.01),
    "train.stage1_epochs_before_decay": (int, 15),
    "train.stage1_decay_factor": (float, 10.0),
    "train.stage1_epochs_after": (int, 10),
    "train.stage2_lr": (float, 1e-3),
    "train.stage2_epochs": (int, 20),
    "train.lambda_gg": (float, 1.0),
    "fusion.alpha": (float, 0.9),
    "fusion.iterations": (int, 1),
    "fusion.weight_mode": (str, "similarity_guided"),
    "eval.shortlist_size": (int, 100),
    "eval.methods": (str, "base,sggnn"),
    "sweep.shortlists": (str, ""),
    "sweep.ks": (str, ""),
    "sweep.alphas": (str, ""),
    "sweep.iterations": (str, ""),
    "output.dir": (str, "out"),
}


@dataclass
class ExperimentConfig:
    """Typed view over the flat key=value configuration."""

    values: dict[str, object]

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls(values={k: d for k, (_, d) in DEFAULTS.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        cfg = cls.default()
        for line_no, raw_line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1
        ):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value, where=f"{path}: line {line_no}")
        return cfg

    def set(self, key: str, value: str, where: str = "config") -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        typ = DEFAULTS[key][0]
        try:
            self.values[key] = typ(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: key {key!r}: {exc}") from exc

    def __getitem__(self, key: str):
        return self.values[key]

    def rebase_seeds(self, seed: int) -> None:
        """Derive every sub-seed from one master seed (used by --seed)."""
        self.values["corpus.seed"] = seed
        self.values["split.seed"] = seed + 1
        self.values["model.seed"] = seed + 2
        self.values["sampler.seed"] = seed + 3

    # -- canonical form -----------------------------------------------------

    def canonical(self) -> str:
        return "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values)) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    # -- typed sections ------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_identities=self["corpus.num_identities"],
            images_per_identity=self["corpus.images_per_identity"],
            dim=self["corpus.dim"],
            center_scale=self["corpus.center_scale"],
            noise_sigma=self["corpus.noise_sigma"],
            hard_fraction=self["corpus.hard_fraction"],
            hard_shift=self["corpus.hard_shift"],
            seed=self["corpus.seed"],
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(k=self["sampler.k"], m=self["sampler.m"], seed=self["sampler.seed"])

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            stage1_lr=self["train.stage1_lr"],
            stage1_epochs_before_decay=self["train.stage1_epochs_before_decay"],
            stage1_decay_factor=self["train.stage1_decay_factor"],
            stage1_epochs_after=self["train.stage1_epochs_after"],
            stage2_lr=self["train.stage2_lr"],
            stage2_epochs=self["train.stage2_epochs"],
            alpha=self["fusion.alpha"],
            lambda_gg=self["train.lambda_gg"],
        )

    def fusion_config(self) -> FusionConfig:
        try:
            return FusionConfig(
                alpha=self["fusion.alpha"],
                iterations=self["fusion.iterations"],
                weight_mode=self["fusion.weight_mode"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def methods(self) -> list[str]:
        return [m.strip() for m in str(self["eval.methods"]).split(",") if m.strip()]

    def sweep_grid(self) -> list[SweepPoint]:
        """Cross product of the sweep.* lists, or the default nine-row grid."""
        raw = {
            "shortlists": str(self["sweep.shortlists"]),
            "ks": str(self["sweep.ks"]),
            "alphas": str(self["sweep.alphas"]),
            "iterations": str(self["sweep.iterations"]),
        }
        if not any(raw.values()):
            return default_sweep_grid(k=self["sampler.k"])

        def parse(text: str, typ, fallback):
            if not text:
                return [fallback]
            try:
                return [typ(v.strip()) for v in text.split(",") if v.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad sweep list {text!r}: {exc}") from exc

        shortlists = parse(raw["shortlists"], int, self["eval.shortlist_size"])
        ks = parse(raw["ks"], int, self["sampler.k"])
        alphas = parse(raw["alphas"], float, self["fusion.alpha"])
        iters = parse(raw["iterations"], int, self["fusion.iterations"])
        return [
            SweepPoint(shortlist_size=s, k=k, alpha=a, iterations=t)
            for s in shortlists
            for k in ks
            for a in alphas
            for t in iters
        ]
