"""Run configuration: INI files with key=value pairs plus CLI overrides.

A config file holds sections [corpus], [mcnn], [train], [retrieval],
[pipeline], [synth], and optional [label:NAME] sections refining the
synthetic part templates. Every key is schema-checked; unknown sections or
keys are errors that name the offender. Values given on the command line
(--set section.key=value) override file values, which override defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigurationError
from .model import ConvSpec, McnnConfig
from .synth import LabelSpec, SynthSpec, default_labels
from .train import TrainConfig


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v.strip()) for v in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(v.strip()) for v in text.split(","))


def _strs(text: str) -> tuple[str, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(v.strip() for v in text.split(","))


_SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "corpus": {"dir": str},
    "mcnn": {
        "input": int,
        "layers": int,
        "kernel": _ints,
        "stride": _ints,
        "padding": _ints,
        "single_maps": _ints,
        "cross_maps": _ints,
        "cross_layers": _ints,
        "fc_dims": _ints,
        "tie_paths": _bool,
        "siamese": _bool,
    },
    "train": {
        "batch_size": int,
        "momentum": float,
        "weight_decay": float,
        "initial_lr": float,
        "lr_drop_factor": float,
        "plateau_patience": int,
        "min_improvement": float,
        "max_epochs": int,
        "seed": int,
        "k_train": int,
        "balance_ratio": float,
        "augment": _bool,
    },
    "retrieval": {"extractor": str, "downsample": int},
    "pipeline": {
        "knn": int,
        "visibility_threshold": float,
        "foreground_threshold": float,
        "erosion_size": int,
        "gradient_weight": float,
        "superpixel_count": int,
        "use_superpixels": _bool,
        "threads": int,
    },
    "synth": {
        "image": int,
        "seed": int,
        "train": int,
        "val": int,
        "test": int,
        "labels": _strs,
        "body_jitter": float,
        "part_jitter": float,
        "size_jitter": float,
        "background": _ints,
        "background_jitter": int,
    },
}

_LABEL_SCHEMA: dict[str, Callable[[str], Any]] = {
    "shape": str,
    "presence": float,
    "color": _ints,
    "color_jitter": int,
    "anchor": _floats,
    "size": _floats,
    "mirrored": _bool,
    "anchor_x_options": _floats,
}

_DEFAULTS: dict[str, dict[str, Any]] = {
    "corpus": {"dir": ""},
    "mcnn": {
        "input": 0,  # 0 = take the corpus image size
        "layers": 4,
        "kernel": (5,),
        "stride": (2,),
        "padding": (2,),
        "single_maps": (16,),
        "cross_maps": (16,),
        "cross_layers": (2, 3, 4),
        "fc_dims": (128, 64),
        "tie_paths": False,
        "siamese": False,
    },
    "train": {
        "batch_size": 32,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "initial_lr": 5e-4,
        "lr_drop_factor": 10.0,
        "plateau_patience": 3,
        "min_improvement": 1e-4,
        "max_epochs": 30,
        "seed": 0,
        "k_train": 8,
        "balance_ratio": 2.0,
        "augment": True,
    },
    "retrieval": {"extractor": "downsample", "downsample": 16},
    "pipeline": {
        "knn": 9,
        "visibility_threshold": 0.8,
        "foreground_threshold": 0.5,
        "erosion_size": 10,
        "gradient_weight": 10.0,
        "superpixel_count": 150,
        "use_superpixels": True,
        "threads": 1,
    },
    "synth": {
        "image": 64,
        "seed": 0,
        "train": 160,
        "val": 40,
        "test": 40,
        "labels": (),
        "body_jitter": 0.05,
        "part_jitter": 0.015,
        "size_jitter": 0.12,
        "background": (208, 210, 214),
        "background_jitter": 22,
    },
}


@dataclass
class RunConfig:
    """Merged configuration values plus builders for the typed configs."""

    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    label_overrides: dict[str, dict[str, Any]] = field(default_factory=dict)

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    # -- builders ---------------------------------------------------------

    def mcnn_config(self, input_hw: tuple[int, int] | None = None) -> McnnConfig:
        m = self.values["mcnn"]
        n = m["layers"]
        if n < 0:
            raise ConfigurationError("[mcnn] layers must be >= 0")

        def per_layer(key: str) -> tuple[int, ...]:
            vals = m[key]
            if len(vals) == 1:
                return vals * n
            if len(vals) != n:
                raise ConfigurationError(
                    f"[mcnn] {key} needs 1 or {n} comma-separated values"
                )
            return vals

        if input_hw is None:
            if m["input"] <= 0:
                raise ConfigurationError(
                    "[mcnn] input must be set when no corpus dictates the size"
                )
            input_hw = (m["input"], m["input"])
        elif m["input"] > 0 and (m["input"], m["input"]) != tuple(input_hw):
            raise ConfigurationError(
                f"[mcnn] input={m['input']} disagrees with corpus size {input_hw}"
            )
        kernels = per_layer("kernel")
        strides = per_layer("stride")
        paddings = per_layer("padding")
        singles = per_layer("single_maps")
        crosses = per_layer("cross_maps")
        layers = tuple(
            ConvSpec(singles[j], crosses[j], kernels[j], strides[j], paddings[j])
            for j in range(n)
        )
        return McnnConfig(
            input_hw=tuple(input_hw),
            conv_layers=layers,
            cross_enabled=frozenset(m["cross_layers"]),
            fc_dims=m["fc_dims"],
            tie_single_paths=m["tie_paths"],
            siamese=m["siamese"],
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            batch_size=t["batch_size"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            initial_lr=t["initial_lr"],
            lr_drop_factor=t["lr_drop_factor"],
            plateau_patience=t["plateau_patience"],
            min_improvement=t["min_improvement"],
            max_epochs=t["max_epochs"],
            seed=t["seed"],
            k_train=t["k_train"],
            balance_ratio=t["balance_ratio"],
            augment=t["augment"],
        )

    def synth_spec(self) -> SynthSpec:
        s = self.values["synth"]
        labels = _build_labels(s["labels"], self.label_overrides)
        return SynthSpec(
            image_hw=(s["image"], s["image"]),
            seed=s["seed"],
            counts=(s["train"], s["val"], s["test"]),
            labels=labels,
            body_jitter=s["body_jitter"],
            part_jitter=s["part_jitter"],
            size_jitter=s["size_jitter"],
            background=tuple(s["background"]),
            background_jitter=s["background_jitter"],
        )

    def pipeline_options(self) -> dict[str, Any]:
        p = self.values["pipeline"]
        return {
            "k": p["knn"],
            "visibility_threshold": p["visibility_threshold"],
            "foreground_threshold": p["foreground_threshold"],
            "erosion_size": p["erosion_size"],
            "gradient_weight": p["gradient_weight"],
            "superpixel_count": p["superpixel_count"],
            "use_superpixels": p["use_superpixels"],
        }


def _build_labels(
    names: tuple[str, ...], overrides: dict[str, dict[str, Any]]
) -> tuple[LabelSpec, ...]:
    base = {l.name: l for l in default_labels()}
    order = list(names) if names else [l.name for l in default_labels()]
    for name in overrides:
        if name not in order:
            raise ConfigurationError(
                f"[label:{name}] refers to a label not in the synth label list"
            )
    labels = []
    for name in order:
        fields = dict(overrides.get(name, {}))
        if name in base:
            spec = base[name]
            if "anchor" in fields:
                fields["anchor"] = tuple(fields["anchor"])
            if "size" in fields:
                fields["size"] = tuple(fields["size"])
            if "color" in fields:
                fields["color"] = tuple(fields["color"])
            if "anchor_x_options" in fields:
                fields["anchor_x_options"] = tuple(fields["anchor_x_options"])
            labels.append(replace(spec, **fields))
        else:
            for required in ("shape", "anchor", "size", "color"):
                if required not in fields:
                    raise ConfigurationError(
                        f"[label:{name}] must define {required!r} for a new label"
                    )
            labels.append(
                LabelSpec(
                    name=name,
                    shape=fields["shape"],
                    anchor=tuple(fields["anchor"]),
                    size=tuple(fields["size"]),
                    color=tuple(fields["color"]),
                    presence=fields.get("presence", 1.0),
                    color_jitter=fields.get("color_jitter", 20),
                    mirrored=fields.get("mirrored", False),
                    anchor_x_options=tuple(fields.get("anchor_x_options", (0.0,))),
                )
            )
    return tuple(labels)


def _parse_value(section: str, key: str, raw: str) -> Any:
    if section.startswith("label:"):
        schema = _LABEL_SCHEMA
    else:
        schema = _SCHEMA.get(section)
        if schema is None:
            raise ConfigurationError(f"unknown config section [{section}]")
    if key not in schema:
        raise ConfigurationError(f"unknown config key {key!r} in section [{section}]")
    try:
        return schema[key](raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(
            f"bad value for [{section}] {key}: {raw!r} ({exc})"
        ) from exc


def load_run_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> RunConfig:
    """Defaults, overlaid with an optional INI file, overlaid with --set pairs."""
    values = {sec: dict(defaults) for sec, defaults in _DEFAULTS.items()}
    label_overrides: dict[str, dict[str, Any]] = {}

    def apply(section: str, key: str, raw: str) -> None:
        parsed = _parse_value(section, key, raw)
        if section.startswith("label:"):
            label_overrides.setdefault(section[len("label:"):], {})[key] = parsed
        else:
            values[section][key] = parsed

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file {path} not found or unreadable")
        for section in parser.sections():
            for key, raw in parser.items(section):
                apply(section, key, raw)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not section.key=value")
        target, raw = item.split("=", 1)
        if "." not in target:
            raise ConfigurationError(f"override {item!r} is not section.key=value")
        section, key = target.split(".", 1)
        apply(section.strip(), key.strip(), raw.strip())

    return RunConfig(values=values, label_overrides=label_overrides)
