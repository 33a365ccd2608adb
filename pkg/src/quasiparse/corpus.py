"""Annotated image corpus: rasters, boxes, masked regions, training pairs.

Geometry convention: pixel (row r, col c) of an H x W raster covers the
half-open square [c/W, (c+1)/W) x [r/H, (r+1)/H) in normalized coordinates,
so a bounding box over pixel columns cmin..cmax has x1 = cmin/W and
x2 = (cmax+1)/W (outer edges). Boxes are (x1, y1, x2, y2) corner pairs in
[0, 1] and displacements are corner differences in the same units.

Labels are 1-based; 0 is background everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image

from . import tensor
from .errors import ConfigurationError, CorpusError
from .model import MatchOutput

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class BoxNorm(NamedTuple):
    """Axis-aligned box in normalized [0,1] coordinates, corners (x1,y1,x2,y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    def shifted(self, offsets: np.ndarray) -> "BoxNorm":
        dx1, dy1, dx2, dy2 = (float(v) for v in offsets)
        return BoxNorm(self.x1 + dx1, self.y1 + dy1, self.x2 + dx2, self.y2 + dy2)

    def clipped(self) -> "BoxNorm":
        return BoxNorm(
            min(max(self.x1, 0.0), 1.0),
            min(max(self.y1, 0.0), 1.0),
            min(max(self.x2, 0.0), 1.0),
            min(max(self.y2, 0.0), 1.0),
        )

    @property
    def empty(self) -> bool:
        return self.x2 <= self.x1 or self.y2 <= self.y1

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BoxNorm":
        """Tight box around a binary mask; (0,0,0,0) when the mask is empty."""
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0)
        h, w = mask.shape
        return cls(
            cols.min() / w,
            rows.min() / h,
            (cols.max() + 1) / w,
            (rows.max() + 1) / h,
        )

    def pixel_rect(self, h: int, w: int) -> tuple[int, int, int, int]:
        """Half-open pixel rows/cols (r1, r2, c1, c2) covered by the box."""
        c1 = int(np.clip(round(self.x1 * w), 0, w))
        c2 = int(np.clip(round(self.x2 * w), 0, w))
        r1 = int(np.clip(round(self.y1 * h), 0, h))
        r2 = int(np.clip(round(self.y2 * h), 0, h))
        return r1, max(r2, r1), c1, max(c2, c1)


def displacement_target(box_region: BoxNorm, box_query: BoxNorm) -> np.ndarray:
    """Corner displacements (dx1, dy1, dx2, dy2) moving the region box onto the query box."""
    return box_query.as_array() - box_region.as_array()


@dataclass
class CorpusEntry:
    """One annotated image: RGB raster, dense label map, derived label geometry."""

    id: str
    image: np.ndarray  # uint8 [H, W, 3]
    label_map: np.ndarray  # uint8 [H, W], 0 = background
    label_set: frozenset[int]
    boxes: dict[int, BoxNorm]

    @classmethod
    def from_rasters(cls, entry_id: str, image: np.ndarray, label_map: np.ndarray) -> "CorpusEntry":
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise CorpusError(f"entry {entry_id}: image must be uint8 [H, W, 3]")
        if label_map.shape != image.shape[:2]:
            raise CorpusError(f"entry {entry_id}: label map size differs from image")
        present = frozenset(int(v) for v in np.unique(label_map) if v != 0)
        boxes = {l: BoxNorm.from_mask(label_map == l) for l in present}
        return cls(entry_id, image, np.ascontiguousarray(label_map, dtype=np.uint8), present, boxes)


@dataclass
class Corpus:
    """A set of entries plus label vocabulary and train/val/test split lists."""

    label_names: list[str]
    image_hw: tuple[int, int]
    entries: dict[str, CorpusEntry]
    splits: dict[str, list[str]]
    _mean_cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def split_ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise CorpusError(f"corpus has no split named {split!r}")
        return self.splits[split]

    def mean_image(self, split: str = "train") -> np.ndarray:
        """Pixel-wise mean over a split, float32 in 0..255 scale."""
        if split not in self._mean_cache:
            ids = self.split_ids(split)
            self._mean_cache[split] = compute_mean_image(
                [self.entries[i] for i in ids]
            )
        return self._mean_cache[split]


def compute_mean_image(entries: Sequence[CorpusEntry]) -> np.ndarray:
    """Pixel-wise mean of the entry images, float32 in 0..255 scale."""
    if not entries:
        raise CorpusError("cannot take the mean of zero images")
    acc = np.zeros(entries[0].image.shape, dtype=np.float64)
    for e in entries:
        if e.image.shape != acc.shape:
            raise CorpusError(f"entry {e.id}: image size differs from the rest of the corpus")
        acc += e.image
    return (acc / len(entries)).astype(np.float32)


@dataclass
class KnnRegion:
    """A retrieved neighbor restricted to one label.

    `image` keeps the neighbor's pixels where its label map equals `label`
    and the corpus mean image everywhere else. When the neighbor lacks the
    label entirely, `image` is exactly the mean image, `present` is False and
    the box is (0, 0, 0, 0).
    """

    source_id: str
    label: int
    image: np.ndarray  # float32 [H, W, 3], 0..255 scale
    mask: np.ndarray  # bool [H, W]
    box: BoxNorm
    present: bool


def make_knn_region(entry: CorpusEntry, label: int, mean_image: np.ndarray) -> KnnRegion:
    """Mask a neighbor down to one label, mean-filling everything else."""
    if mean_image.shape != entry.image.shape:
        raise CorpusError("mean image size differs from entry image")
    mask = entry.label_map == label
    present = bool(mask.any())
    image = mean_image.astype(np.float32, copy=True)
    if present:
        image[mask] = entry.image[mask]
    box = entry.boxes.get(label, BoxNorm(0.0, 0.0, 0.0, 0.0))
    return KnnRegion(entry.id, label, image, mask, box, present)


def to_network_input(image: np.ndarray) -> np.ndarray:
    """HWC raster (uint8 or float 0..255) to centered [3, H, W] floats in [-0.5, 0.5]."""
    arr = np.asarray(image, dtype=tensor.active_dtype()) / 255.0 - 0.5
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Augmentation: {scale 1, scale 1.2 center-crop} x {original, mirrored}.
# ---------------------------------------------------------------------------


def _resize_nearest(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    sh, sw = arr.shape[:2]
    oh, ow = out_hw
    rows = np.clip(((np.arange(oh) + 0.5) * sh / oh).astype(int), 0, sh - 1)
    cols = np.clip(((np.arange(ow) + 0.5) * sw / ow).astype(int), 0, sw - 1)
    return arr[rows][:, cols]


def _center_crop_scale(image: np.ndarray, label_map: np.ndarray, factor: float):
    h, w = label_map.shape
    ch = max(1, int(round(h / factor)))
    cw = max(1, int(round(w / factor)))
    r0, c0 = (h - ch) // 2, (w - cw) // 2
    img = _resize_nearest(image[r0 : r0 + ch, c0 : c0 + cw], (h, w))
    lab = _resize_nearest(label_map[r0 : r0 + ch, c0 : c0 + cw], (h, w))
    return img, lab


def augment_entry(entry: CorpusEntry, scale_factor: float = 1.2) -> list[CorpusEntry]:
    """Four deterministic variants of an entry; boxes are recomputed from pixels.

    Nearest-neighbor resampling is used for both rasters so image and label
    map stay aligned pixel for pixel. Mirroring preserves per-label pixel
    counts exactly and maps a box (x1, y1, x2, y2) to (1-x2, y1, 1-x1, y2).
    """
    variants: list[CorpusEntry] = []
    scaled_img, scaled_lab = _center_crop_scale(entry.image, entry.label_map, scale_factor)
    for tag, img, lab in (
        ("orig", entry.image, entry.label_map),
        ("scale", scaled_img, scaled_lab),
    ):
        variants.append(CorpusEntry.from_rasters(f"{entry.id}#{tag}", img.copy(), lab.copy()))
        variants.append(
            CorpusEntry.from_rasters(
                f"{entry.id}#{tag}-mirror",
                np.ascontiguousarray(img[:, ::-1]),
                np.ascontiguousarray(lab[:, ::-1]),
            )
        )
    return variants


# ---------------------------------------------------------------------------
# Output normalization.
# ---------------------------------------------------------------------------


@dataclass
class OutputNormalizer:
    """Element-wise standardization of the 5-dim regression target.

    Statistics are float64. Variance components below 1e-8 are clamped to
    1e-8, which sends constant components to exactly 0 under normalize.
    """

    mean: np.ndarray
    variance: np.ndarray

    VAR_FLOOR = 1e-8

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(5)
        self.variance = np.asarray(self.variance, dtype=np.float64).reshape(5)
        if not (self.variance > 0).all():
            raise ConfigurationError("normalizer variance must be positive")

    def normalize(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        return (v - self.mean) / np.sqrt(self.variance)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        return v * np.sqrt(self.variance) + self.mean


def fit_normalizer(targets: np.ndarray, displacement_valid: np.ndarray) -> OutputNormalizer:
    """Fit element-wise mean/variance over a target stream [N, 5].

    Confidence statistics use every pair; displacement statistics use only
    pairs whose displacement target is defined (both sides carry the label).
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != 5:
        raise ConfigurationError("normalizer fit needs [N, 5] targets")
    if targets.shape[0] == 0:
        raise ConfigurationError("normalizer fit needs at least one target")
    valid = np.asarray(displacement_valid, dtype=bool).reshape(-1)
    mean = np.zeros(5)
    var = np.zeros(5)
    mean[0] = targets[:, 0].mean()
    var[0] = targets[:, 0].var()
    if valid.any():
        disp = targets[valid, 1:]
        mean[1:] = disp.mean(axis=0)
        var[1:] = disp.var(axis=0)
    var = np.maximum(var, OutputNormalizer.VAR_FLOOR)
    return OutputNormalizer(mean=mean, variance=var)


# ---------------------------------------------------------------------------
# Training pairs.
# ---------------------------------------------------------------------------


@dataclass
class TrainPair:
    """One (query image, masked neighbor region) supervision pair.

    `target.confidence` is 1.0 exactly when the query contains the region's
    label, else 0.0. `displacement_valid` is True only when both sides carry
    the label; otherwise the displacement target is all zeros and must stay
    out of the loss.
    """

    query_id: str
    query: np.ndarray  # uint8 [H, W, 3]
    region: KnnRegion
    target: MatchOutput
    displacement_valid: bool


def targets_matrix(pairs: Sequence[TrainPair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack pair targets into ([N, 5] float64, [N] bool valid)."""
    t = np.zeros((len(pairs), 5), dtype=np.float64)
    valid = np.zeros(len(pairs), dtype=bool)
    for i, p in enumerate(pairs):
        t[i, 0] = p.target.confidence
        t[i, 1:] = p.target.displacements
        valid[i] = p.displacement_valid
    return t, valid


def gen_pairs(
    corpus: Corpus,
    index,
    *,
    split: str = "train",
    k_neighbors: int = 8,
    seed: int = 0,
    balance_ratio: float | None = 2.0,
    augment: bool = True,
    mean_image: np.ndarray | None = None,
    region_cache: dict | None = None,
) -> list[TrainPair]:
    """Build the supervised pair stream for a split.

    For every query image, its `k_neighbors` nearest corpus images (never the
    query itself) are each split into one region per label. With `augment`
    on, each query contributes its four augmentation variants; neighbors and
    regions are never augmented, and displacement targets are recomputed from
    the transformed query geometry. Positive (confidence 1) pair counts per
    label are capped at `balance_ratio` times the scarcest label's count by
    seeded subsampling. The final stream order is a seeded shuffle.
    """
    from .retrieval import embed_image, retrieve_knn

    if mean_image is None:
        mean_image = corpus.mean_image("train")
    if region_cache is None:
        region_cache = {}
    rng = np.random.default_rng([seed, 0x7041])
    labels = range(1, corpus.num_labels + 1)

    pairs: list[TrainPair] = []
    for qid in corpus.split_ids(split):
        entry = corpus.entries[qid]
        neighbor_ids = retrieve_knn(
            index, embed_image(entry.image, index.extractor), k_neighbors, exclude=qid
        )
        queries = augment_entry(entry) if augment else [entry]
        for q in queries:
            for gid in neighbor_ids:
                for label in labels:
                    key = (gid, label)
                    region = region_cache.get(key)
                    if region is None:
                        region = make_knn_region(corpus.entries[gid], label, mean_image)
                        region_cache[key] = region
                    in_query = label in q.label_set
                    valid = bool(region.present and in_query)
                    if valid:
                        disp = displacement_target(region.box, q.boxes[label])
                    else:
                        disp = np.zeros(4)
                    pairs.append(
                        TrainPair(
                            query_id=q.id,
                            query=q.image,
                            region=region,
                            target=MatchOutput(1.0 if in_query else 0.0, disp),
                            displacement_valid=valid,
                        )
                    )

    if balance_ratio is not None and balance_ratio > 0:
        pairs = _balance_positives(pairs, balance_ratio, rng)
    rng.shuffle(pairs)
    return pairs


def _balance_positives(
    pairs: list[TrainPair], ratio: float, rng: np.random.Generator
) -> list[TrainPair]:
    """Subsample each label's positives down to ratio x the scarcest label."""
    pos_by_label: dict[int, list[int]] = {}
    for i, p in enumerate(pairs):
        if p.target.confidence == 1.0:
            pos_by_label.setdefault(p.region.label, []).append(i)
    if not pos_by_label:
        return pairs
    floor_count = min(len(v) for v in pos_by_label.values())
    cap = max(1, int(floor_count * ratio))
    drop: set[int] = set()
    for label in sorted(pos_by_label):
        idx = pos_by_label[label]
        if len(idx) > cap:
            removed = rng.choice(len(idx), size=len(idx) - cap, replace=False)
            drop.update(idx[i] for i in removed)
    return [p for i, p in enumerate(pairs) if i not in drop]


# ---------------------------------------------------------------------------
# On-disk corpus format: manifest.json plus 8-bit PNG rasters.
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    """Write manifest.json, images/<id>.png (RGB) and labels/<id>.png (single channel)."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    split_of = {
        eid: split for split, ids in corpus.splits.items() for eid in ids
    }
    for eid, entry in corpus.entries.items():
        image_rel = f"images/{eid}.png"
        label_rel = f"labels/{eid}.png"
        Image.fromarray(entry.image, mode="RGB").save(root / image_rel)
        Image.fromarray(entry.label_map, mode="L").save(root / label_rel)
        records.append(
            {
                "id": eid,
                "split": split_of.get(eid, "train"),
                "image": image_rel,
                "label_map": label_rel,
                "boxes": {str(l): list(map(float, b)) for l, b in sorted(entry.boxes.items())},
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "label_names": corpus.label_names,
        "num_labels": corpus.num_labels,
        "image_size": list(corpus.image_hw),
        "entries": records,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def load_corpus(directory: str | Path) -> Corpus:
    """Read a corpus directory, validating rasters against the manifest.

    Boxes stored in the manifest are checked for exact agreement with boxes
    recomputed from the label-map pixels; a mismatch means the files do not
    belong together.
    """
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CorpusError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"unreadable manifest: {exc}") from exc
    for key in ("label_names", "image_size", "entries"):
        if key not in manifest:
            raise CorpusError(f"manifest missing key {key!r}")
    label_names = list(manifest["label_names"])
    num_labels = len(label_names)
    image_hw = tuple(int(v) for v in manifest["image_size"])

    entries: dict[str, CorpusEntry] = {}
    # standard splits always exist, possibly empty, so callers can probe them
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for rec in manifest["entries"]:
        eid = rec["id"]
        if eid in entries:
            raise CorpusError(f"duplicate entry id {eid!r}")
        image = np.asarray(Image.open(root / rec["image"]).convert("RGB"), dtype=np.uint8)
        label_img = Image.open(root / rec["label_map"])
        if label_img.mode != "L":
            label_img = label_img.convert("L")
        label_map = np.asarray(label_img, dtype=np.uint8)
        if image.shape[:2] != image_hw or label_map.shape != image_hw:
            raise CorpusError(f"entry {eid}: raster size differs from manifest image_size")
        if label_map.max(initial=0) > num_labels:
            raise CorpusError(
                f"entry {eid}: label id {int(label_map.max())} exceeds {num_labels} labels"
            )
        entry = CorpusEntry.from_rasters(eid, image, label_map)
        if "boxes" in rec:
            declared = {int(l): BoxNorm(*map(float, b)) for l, b in rec["boxes"].items()}
            if declared != entry.boxes:
                raise CorpusError(f"entry {eid}: manifest boxes disagree with label pixels")
        entries[eid] = entry
        splits.setdefault(rec.get("split", "train"), []).append(eid)
    if not entries:
        raise CorpusError("corpus has no entries")
    return Corpus(label_names=label_names, image_hw=image_hw, entries=entries, splits=splits)
