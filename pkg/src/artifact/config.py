"""Experiment configuration: an INI file with one section per stage.

Each key holds the value actually used. Where the full-size setting differs,
it sits next to it as ``<key>.paper``; ``[run] profile = paper`` switches every
such key to its paper value.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .detect.dqn import DetectorConfig, EpsilonSchedule, QLearningConfig
from .detect.env import EncoderConfig
from .meta import FineTuneConfig, MetaConfig, VolumeNetConfig
from .phantom import PhantomConfig
from .prehoc import ClassifierConfig
from .saliency import DecoderConfig, LossWeights


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    parse: Callable[[str], Any]
    desk: Any
    paper: Any = None  # None: same at both scales


# Every tunable constant, in file order.
KEYS: list[Key] = [
    Key("run", "seed", int, 0),
    Key("run", "pipeline", str, "both"),
    Key("data", "patients", int, 117),
    Key("data", "tier", str, "default"),
    Key("data", "split", _floats, (45 / 117, 13 / 117, 59 / 117)),
    Key("encoder", "input_extent", _ints, (16, 16, 8), (100, 100, 50)),
    Key("encoder", "blocks", int, 3, 5),
    Key("encoder", "base_channels", int, 8),
    Key("encoder", "positives", int, 800),
    Key("encoder", "negatives", int, 800),
    Key("encoder", "epochs", int, 8),
    Key("encoder", "lr", float, 1e-3),
    Key("detector", "gamma", float, 0.9),
    Key("detector", "eta", float, 10.0),
    Key("detector", "trigger_dice", float, 0.2),
    Key("detector", "replay_capacity", int, 10_000),
    Key("detector", "batch_size", int, 100),
    Key("detector", "lr", float, 1e-4, 1e-6),
    Key("detector", "epsilon_start", float, 1.0),
    Key("detector", "epsilon_end", float, 0.1),
    Key("detector", "epsilon_epochs", int, 40, 300),
    Key("detector", "kappa", float, 0.5),
    Key("detector", "epochs", int, 60, 400),
    Key("detector", "max_steps", int, 20),
    Key("detector", "hidden", int, 128, 512),
    Key("detector", "merge_dice", float, 0.5),
    Key("detector", "val_every", int, 5),
    Key("classifier", "patch_extent", _ints, (24, 24, 12)),
    Key("classifier", "dense_blocks", int, 3),
    Key("classifier", "layers_per_block", int, 2),
    Key("classifier", "growth", int, 6),
    Key("classifier", "compression", float, 0.5),
    Key("classifier", "lr", float, 0.01),
    Key("classifier", "epochs", int, 15, 100),
    Key("classifier", "batch_size", int, 16),
    Key("classifier", "include_lesion_boxes", _bool, True),
    Key("meta", "dense_blocks", int, 3, 5),
    Key("meta", "layers_per_block", int, 2),
    Key("meta", "growth", int, 6),
    Key("meta", "compression", float, 0.5),
    Key("meta", "stem_stride", int, 2, 1),
    Key("meta", "alpha", float, 0.01),
    Key("meta", "beta", float, 0.05, 0.001),
    Key("meta", "inner_steps", int, 5),
    Key("meta", "iterations", int, 60, 3000),
    Key("meta", "tasks_per_batch", int, 5),
    Key("meta", "n_tr", int, 4),
    Key("meta", "n_val", int, 4),
    Key("meta", "buffer_size", int, 40),
    Key("meta", "first_order", _bool, True, False),
    Key("meta", "average", _bool, True),
    Key("finetune", "lr", float, 0.01),
    Key("finetune", "epochs", int, 20, 100),
    Key("finetune", "batch_size", int, 8),
    Key("saliency", "lambda_tv", float, 0.1),
    Key("saliency", "lambda_area", float, 3.0),
    Key("saliency", "lambda_preserve", float, 1.0),
    Key("saliency", "lambda_destroy", float, 2.5),
    Key("saliency", "destroy_floor", float, 0.01),
    Key("saliency", "channels", _ints, (16, 12, 8, 8)),
    Key("saliency", "lr", float, 3e-3),
    Key("saliency", "epochs", int, 20, 100),
    Key("saliency", "zeta", float, 0.8),
    Key("saliency", "min_component", int, 8),
    Key("eval", "dice_min", float, 0.2),
    Key("eval", "max_fpp", float, 3.0),
    Key("eval", "matching", str, "max"),
]

_BY_NAME = {(k.section, k.name): k for k in KEYS}
STAGES = ("gen-data", "train-encoder", "train-detector", "train-classifier", "meta-train", "fine-tune",
          "train-saliency", "infer", "evaluate")


@dataclass
class ExperimentConfig:
    values: dict[tuple[str, str], Any] = field(default_factory=dict)
    profile: str = "desk"
    scale: float = 1.0

    def __getitem__(self, key: str):
        section, name = key.split(".", 1)
        return self.values[(section, name)]

    # -- load / save

    @classmethod
    def default(cls, profile: str = "desk") -> ExperimentConfig:
        if profile not in ("desk", "paper"):
            raise ValueError(f"unknown profile {profile!r}")
        vals = {(k.section, k.name): (k.paper if profile == "paper" and k.paper is not None else k.desk) for k in KEYS}
        return cls(vals, profile)

    @classmethod
    def from_ini(cls, text: str) -> ExperimentConfig:
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.read_string(text)
        profile = cp.get("run", "profile", fallback="desk")
        cfg = cls.default(profile)
        cfg.scale = cp.getfloat("run", "scale", fallback=1.0)
        for section in cp.sections():
            for name, raw in cp.items(section):
                if name in ("profile", "scale") and section == "run":
                    continue
                base = name[: -len(".paper")] if name.endswith(".paper") else name
                key = _BY_NAME.get((section, base))
                if key is None:
                    raise ValueError(f"unknown config key [{section}] {name}")
                if name.endswith(".paper"):
                    if profile == "paper":
                        cfg.values[(section, base)] = key.parse(raw)
                elif not (profile == "paper" and cp.has_option(section, base + ".paper")):
                    cfg.values[(section, base)] = key.parse(raw)
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_ini(Path(path).read_text())

    def to_ini(self) -> str:
        out = io.StringIO()
        out.write(f"[run]\nprofile = {self.profile}\nscale = {_fmt(self.scale)}\n")
        section = "run"
        for k in KEYS:
            if k.section != section:
                section = k.section
                out.write(f"\n[{section}]\n")
            out.write(f"{k.name} = {_fmt(self.values[(k.section, k.name)])}\n")
            if k.paper is not None:
                out.write(f"{k.name}.paper = {_fmt(k.paper)}\n")
        return out.getvalue()

    def with_overrides(self, **kw) -> ExperimentConfig:
        """``with_overrides(**{"meta.iterations": 3})``; the keys use section.name form."""
        vals = dict(self.values)
        for dotted, v in kw.items():
            section, name = dotted.split(".", 1)
            if (section, name) not in _BY_NAME:
                raise KeyError(dotted)
            vals[(section, name)] = v
        return replace(self, values=vals)

    # -- seeding

    def stage_seed(self, stage: str) -> int:
        """Independent per-stage seed derived from the root seed and the stage's position."""
        idx = STAGES.index(stage)
        return int(np.random.SeedSequence(self["run.seed"], spawn_key=(idx,)).generate_state(1)[0])

    # -- stage configs

    def phantom(self) -> PhantomConfig:
        return PhantomConfig.tier(self["data.tier"])

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            input_extent=self["encoder.input_extent"], blocks=self["encoder.blocks"],
            base_channels=self["encoder.base_channels"], scale=self.scale, positives=self["encoder.positives"],
            negatives=self["encoder.negatives"], epochs=self["encoder.epochs"], lr=self["encoder.lr"],
        )

    def detector(self) -> DetectorConfig:
        learning = QLearningConfig(
            gamma=self["detector.gamma"], lr=self["detector.lr"], batch_size=self["detector.batch_size"],
            replay_capacity=self["detector.replay_capacity"], max_steps=self["detector.max_steps"],
            schedule=EpsilonSchedule(self["detector.epsilon_start"], self["detector.epsilon_end"],
                                     self["detector.epsilon_epochs"], self["detector.kappa"]),
        )
        return DetectorConfig(epochs=self["detector.epochs"], hidden=self["detector.hidden"],
                              val_every=self["detector.val_every"], merge_dice=self["detector.merge_dice"],
                              max_fpp=self["eval.max_fpp"], learning=learning)

    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(
            patch_extent=self["classifier.patch_extent"], dense_blocks=self["classifier.dense_blocks"],
            layers_per_block=self["classifier.layers_per_block"], growth=self["classifier.growth"],
            compression=self["classifier.compression"], scale=self.scale, lr=self["classifier.lr"],
            epochs=self["classifier.epochs"], batch_size=self["classifier.batch_size"],
            include_lesion_boxes=self["classifier.include_lesion_boxes"], dice_min=self["eval.dice_min"],
        )

    def meta(self) -> MetaConfig:
        extent = tuple(self.phantom().extent)
        net = VolumeNetConfig(extent=extent, dense_blocks=self["meta.dense_blocks"],
                              layers_per_block=self["meta.layers_per_block"], growth=self["meta.growth"],
                              compression=self["meta.compression"], stem_stride=self["meta.stem_stride"],
                              scale=self.scale)
        return MetaConfig(
            alpha=self["meta.alpha"], beta=self["meta.beta"], inner_steps=self["meta.inner_steps"],
            iterations=self["meta.iterations"], tasks_per_batch=self["meta.tasks_per_batch"],
            n_tr=self["meta.n_tr"], n_val=self["meta.n_val"], buffer_size=self["meta.buffer_size"],
            first_order=self["meta.first_order"], average=self["meta.average"], net=net,
        )

    def finetune(self) -> FineTuneConfig:
        return FineTuneConfig(lr=self["finetune.lr"], epochs=self["finetune.epochs"],
                              batch_size=self["finetune.batch_size"])

    def saliency(self) -> DecoderConfig:
        w = LossWeights(self["saliency.lambda_tv"], self["saliency.lambda_area"], self["saliency.lambda_preserve"],
                        self["saliency.lambda_destroy"], self["saliency.destroy_floor"])
        return DecoderConfig(channels=self["saliency.channels"], lr=self["saliency.lr"],
                             epochs=self["saliency.epochs"], weights=w)
