"""Synthetic figure corpus: colored doll shapes on plain backgrounds.

Each entry draws a stylized standing figure from rectangles and ellipses.
Per-entry randomness (seeded, reproducible) covers which optional parts are
present, a global body offset, small per-part offsets and size factors, part
colors, the background tone, and for parts with placement options (the bag)
which side they hang on. Parts are drawn in the label-id order given by the
spec, so later labels occlude earlier ones; label ids therefore double as a
fixed back-to-front depth order.

Every geometric quantity is specified in normalized units relative to the
image edge, which keeps one spec usable across raster sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import Corpus, CorpusEntry, save_corpus
from .errors import ConfigurationError, CorpusError


@dataclass(frozen=True)
class LabelSpec:
    """Geometry and appearance template for one part label.

    `anchor` is the part center (cx, cy) in the body frame; `size` its
    (width, height). `mirrored` draws the part twice, mirrored about the body
    axis (arms, legs, shoes). `anchor_x_options` lists alternative horizontal
    offsets added to cx, one of which is chosen per entry (the bag's side).
    """

    name: str
    shape: str  # "rect" or "ellipse"
    anchor: tuple[float, float]
    size: tuple[float, float]
    color: tuple[int, int, int]
    presence: float = 1.0
    color_jitter: int = 20
    mirrored: bool = False
    anchor_x_options: tuple[float, ...] = (0.0,)

    def __post_init__(self) -> None:
        if self.shape not in ("rect", "ellipse"):
            raise ConfigurationError(f"label {self.name}: unknown shape {self.shape!r}")
        if not 0.0 <= self.presence <= 1.0:
            raise ConfigurationError(f"label {self.name}: presence must be in [0, 1]")
        if not self.anchor_x_options:
            raise ConfigurationError(f"label {self.name}: needs at least one anchor option")


@dataclass(frozen=True)
class SynthSpec:
    image_hw: tuple[int, int] = (64, 64)
    seed: int = 0
    counts: tuple[int, int, int] = (160, 40, 40)  # train, val, test
    labels: tuple[LabelSpec, ...] = ()
    body_jitter: float = 0.05
    part_jitter: float = 0.015
    size_jitter: float = 0.12
    background: tuple[int, int, int] = (208, 210, 214)
    background_jitter: int = 22

    def __post_init__(self) -> None:
        if not self.labels:
            object.__setattr__(self, "labels", default_labels())
        names = [l.name for l in self.labels]
        if len(set(names)) != len(names):
            raise ConfigurationError("label names must be unique")
        if min(self.counts) < 0 or sum(self.counts) == 0:
            raise ConfigurationError("split counts must be non-negative and not all zero")
        validate_geometry(self)

    @property
    def label_names(self) -> list[str]:
        return [l.name for l in self.labels]


def default_labels() -> tuple[LabelSpec, ...]:
    """The standing-figure part set, ordered back to front."""
    return (
        LabelSpec("legs", "rect", (0.0, 0.70), (0.085, 0.26), (60, 70, 120),
                  mirrored=True, anchor_x_options=(0.055,)),
        LabelSpec("shoes", "rect", (0.0, 0.86), (0.10, 0.06), (45, 35, 35),
                  presence=0.85, mirrored=True, anchor_x_options=(0.06,)),
        LabelSpec("upper_cloth", "rect", (0.0, 0.46), (0.26, 0.24), (180, 60, 60)),
        LabelSpec("arms", "rect", (0.0, 0.45), (0.065, 0.22), (215, 170, 140),
                  presence=0.95, mirrored=True, anchor_x_options=(0.175,)),
        LabelSpec("scarf", "rect", (0.0, 0.315), (0.17, 0.05), (230, 200, 80), presence=0.4),
        LabelSpec("face", "ellipse", (0.0, 0.22), (0.15, 0.16), (225, 185, 155)),
        LabelSpec("hat", "rect", (0.0, 0.125), (0.19, 0.075), (90, 150, 90), presence=0.6),
        LabelSpec("bag", "rect", (0.0, 0.54), (0.11, 0.14), (150, 90, 160),
                  presence=0.55, anchor_x_options=(-0.27, 0.27)),
    )


def validate_geometry(spec: SynthSpec) -> None:
    """Reject part templates that can leave the frame under worst-case jitter."""
    margin = 0.01
    for label in spec.labels:
        half_w = label.size[0] * (1 + spec.size_jitter) / 2
        half_h = label.size[1] * (1 + spec.size_jitter) / 2
        slack = spec.body_jitter + spec.part_jitter
        for opt in label.anchor_x_options:
            offsets = (opt, -opt) if label.mirrored else (opt,)
            for off in offsets:
                cx = 0.5 + label.anchor[0] + off
                if cx - half_w - slack < margin or cx + half_w + slack > 1 - margin:
                    raise CorpusError(
                        f"label {label.name!r}: horizontal extent can leave the frame"
                    )
        cy = label.anchor[1]
        if cy - half_h - slack < margin or cy + half_h + slack > 1 - margin:
            raise CorpusError(f"label {label.name!r}: vertical extent can leave the frame")


def _draw_part(
    image: np.ndarray,
    label_map: np.ndarray,
    label_id: int,
    shape: str,
    cx: float,
    cy: float,
    w: float,
    h: float,
    color: np.ndarray,
) -> None:
    hh, ww = label_map.shape
    if shape == "rect":
        c1 = int(round((cx - w / 2) * ww))
        c2 = int(round((cx + w / 2) * ww))
        r1 = int(round((cy - h / 2) * hh))
        r2 = int(round((cy + h / 2) * hh))
        c1, c2 = max(c1, 0), min(max(c2, c1 + 1), ww)
        r1, r2 = max(r1, 0), min(max(r2, r1 + 1), hh)
        image[r1:r2, c1:c2] = color
        label_map[r1:r2, c1:c2] = label_id
    else:
        ys = (np.arange(hh) + 0.5) / hh
        xs = (np.arange(ww) + 0.5) / ww
        ry, rx = max(h / 2, 1.0 / hh), max(w / 2, 1.0 / ww)
        mask = ((ys[:, None] - cy) / ry) ** 2 + ((xs[None, :] - cx) / rx) ** 2 <= 1.0
        image[mask] = color
        label_map[mask] = label_id


def _render_entry(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.image_hw
    bg = np.array(spec.background, dtype=np.float64)
    bg = bg + rng.integers(-spec.background_jitter, spec.background_jitter + 1, size=3)
    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = np.clip(bg, 0, 255).astype(np.uint8)
    label_map = np.zeros((h, w), dtype=np.uint8)

    body_dx = rng.uniform(-spec.body_jitter, spec.body_jitter)
    body_dy = rng.uniform(-spec.body_jitter / 2, spec.body_jitter / 2)

    for label_id, label in enumerate(spec.labels, start=1):
        present = rng.random() < label.presence if label.presence < 1.0 else True
        option = label.anchor_x_options[rng.integers(len(label.anchor_x_options))]
        part_dx = rng.uniform(-spec.part_jitter, spec.part_jitter)
        part_dy = rng.uniform(-spec.part_jitter, spec.part_jitter)
        size_f = rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter)
        color = np.clip(
            np.array(label.color, dtype=np.int64)
            + rng.integers(-label.color_jitter, label.color_jitter + 1, size=3),
            0,
            255,
        ).astype(np.uint8)
        if not present:
            continue
        cx = 0.5 + label.anchor[0] + option + body_dx + part_dx
        cy = label.anchor[1] + body_dy + part_dy
        pw, ph = label.size[0] * size_f, label.size[1] * size_f
        if label.mirrored:
            off = abs(option)
            base = 0.5 + label.anchor[0] + body_dx + part_dx
            _draw_part(image, label_map, label_id, label.shape, base - off, cy, pw, ph, color)
            _draw_part(image, label_map, label_id, label.shape, base + off, cy, pw, ph, color)
        else:
            _draw_part(image, label_map, label_id, label.shape, cx, cy, pw, ph, color)
    return image, label_map


def generate_corpus(spec: SynthSpec, directory: str | Path | None = None) -> Corpus:
    """Generate a corpus from `spec`; optionally also write it to disk.

    The same spec (seed included) always produces byte-identical rasters.
    Entry randomness derives from (seed, split index, entry index), so a
    split's contents do not depend on the other splits' sizes.
    """
    entries: dict[str, CorpusEntry] = {}
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for split_idx, (split, count) in enumerate(zip(("train", "val", "test"), spec.counts)):
        for i in range(count):
            rng = np.random.default_rng([spec.seed, split_idx, i])
            image, label_map = _render_entry(spec, rng)
            eid = f"{split}_{i:04d}"
            entries[eid] = CorpusEntry.from_rasters(eid, image, label_map)
            splits[split].append(eid)
    corpus = Corpus(
        label_names=spec.label_names,
        image_hw=spec.image_hw,
        entries=entries,
        splits=splits,
    )
    if directory is not None:
        save_corpus(corpus, directory)
    return corpus


def small_spec(
    seed: int = 0,
    image: int = 48,
    counts: tuple[int, int, int] = (64, 16, 16),
    min_presence: float = 0.0,
) -> SynthSpec:
    """A reduced corpus spec sized for fast desk-scale experiments.

    `min_presence` lifts every part's presence probability to at least that
    value. Regions whose source image lacks the label are mean images with no
    trace of the label asked about, so their confidence targets cannot be
    predicted from pixels; raising presence keeps that irreducible fraction
    of the pair stream small in training sanity checks.
    """
    labels = tuple(
        replace(l, presence=max(l.presence, min_presence)) if l.presence < min_presence else l
        for l in default_labels()
    )
    return SynthSpec(image_hw=(image, image), seed=seed, counts=counts, labels=labels)
