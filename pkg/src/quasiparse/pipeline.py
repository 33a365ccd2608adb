"""Label transfer and post-processing: from matcher outputs to a parse.

Given a query image, K retrieved neighbors, and a matcher that scores each
(neighbor, label) region against the query, the pipeline:

1. averages matching confidence per label over the regions that actually
   carry the label, marking a label visible when the average clears a strict
   threshold;
2. for each visible label, moves every carrying region's mask into the
   query frame by shifting the region's box with the predicted displacements
   and resampling the mask into the shifted box (nearest neighbor);
3. fuses the moved masks into per-label probability maps, weighting each by
   its non-negative confidence (uniform weights if none are positive);
4. estimates a background probability by geodesic distance: foreground seeds
   come from thresholding and eroding the max of the label maps, background
   seeds from eroding its complement, and distances grow along image
   gradients so the background floods up to strong edges;
5. assigns per pixel the argmax of [P(bg), (1 - P(bg)) * M_label], ties going
   to background and then the lowest label id;
6. optionally snaps the result to superpixels by majority vote.

All probability maps stay in [0, 1] throughout.
"""

from __future__ import annotations

import heapq
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .corpus import Corpus, KnnRegion, make_knn_region, to_network_input
from .errors import ConfigurationError
from .model import forward_batch
from .retrieval import KnnIndex, embed_image, retrieve_knn

Matcher = Callable[[np.ndarray, Sequence[KnnRegion]], np.ndarray]
"""Maps (query HWC raster, regions) to denormalized [len(regions), 5] outputs."""


# ---------------------------------------------------------------------------
# Confidence aggregation and mask transfer.
# ---------------------------------------------------------------------------


def aggregate_confidence(
    confidences: dict[int, list[float]],
    num_labels: int,
    visibility_threshold: float = 0.8,
) -> tuple[np.ndarray, np.ndarray]:
    """Average confidence per label over carrying regions; strict threshold.

    Labels no retrieved neighbor carries get confidence 0 and stay invisible.
    Returns (mean confidence [L+1], visible [L+1]); index 0 is unused.
    """
    mean = np.zeros(num_labels + 1, dtype=np.float64)
    visible = np.zeros(num_labels + 1, dtype=bool)
    for label, values in confidences.items():
        if not 1 <= label <= num_labels:
            raise ConfigurationError(f"label id {label} out of range")
        if values:
            mean[label] = float(np.mean(values))
            visible[label] = mean[label] > visibility_threshold
    return mean, visible


def transfer_label_mask(
    region: KnnRegion, offsets: np.ndarray, out_hw: tuple[int, int]
) -> np.ndarray:
    """Resample the region's label mask into its displaced box in the query frame.

    The region box is shifted by the predicted corner offsets and clipped to
    the frame; the mask content inside the source box is nearest-neighbor
    resampled into the shifted box. A box that clips to zero area, or a
    region without the label, produces an all-zero map.
    """
    h, w = out_hw
    out = np.zeros((h, w), dtype=np.float32)
    if not region.present:
        return out
    target = region.box.shifted(np.asarray(offsets, dtype=np.float64)).clipped()
    if target.empty:
        return out
    sr1, sr2, sc1, sc2 = region.box.pixel_rect(*region.mask.shape)
    src = region.mask[sr1:sr2, sc1:sc2]
    if src.size == 0:
        return out
    tr1, tr2, tc1, tc2 = target.pixel_rect(h, w)
    th, tw = tr2 - tr1, tc2 - tc1
    if th <= 0 or tw <= 0:
        return out
    rows = np.clip(((np.arange(th) + 0.5) * src.shape[0] / th).astype(int), 0, src.shape[0] - 1)
    cols = np.clip(((np.arange(tw) + 0.5) * src.shape[1] / tw).astype(int), 0, src.shape[1] - 1)
    out[tr1:tr2, tc1:tc2] = src[rows][:, cols].astype(np.float32)
    return out


@dataclass
class ProbabilityMaps:
    """Per-label fused maps [L+1, H, W] in [0, 1]; plane 0 is unused."""

    maps: np.ndarray

    @property
    def num_labels(self) -> int:
        return self.maps.shape[0] - 1


def build_probability_maps(
    transferred: dict[int, list[tuple[np.ndarray, float]]],
    num_labels: int,
    out_hw: tuple[int, int],
) -> ProbabilityMaps:
    """Confidence-weighted mean of the transferred masks per label.

    Weights are the matching confidences clipped at zero; if every weight of
    a label is zero the masks are averaged uniformly. Invisible labels simply
    do not appear in `transferred` and keep all-zero maps.
    """
    maps = np.zeros((num_labels + 1, *out_hw), dtype=np.float32)
    for label, pairs in transferred.items():
        if not pairs:
            continue
        weights = np.array([max(c, 0.0) for _, c in pairs], dtype=np.float64)
        if weights.sum() <= 0:
            weights = np.ones(len(pairs), dtype=np.float64)
        weights /= weights.sum()
        acc = np.zeros(out_hw, dtype=np.float64)
        for (mask, _), wgt in zip(pairs, weights):
            acc += wgt * mask
        maps[label] = acc.astype(np.float32)
    return ProbabilityMaps(maps=maps)


# ---------------------------------------------------------------------------
# Background probability via geodesic distance.
# ---------------------------------------------------------------------------


@dataclass
class SeedMasks:
    foreground: np.ndarray
    background: np.ndarray
    erosion_fallback: bool  # True when erosion emptied a seed set


def foreground_seeds(
    maps: ProbabilityMaps,
    foreground_threshold: float = 0.5,
    erosion_size: int = 10,
) -> SeedMasks:
    """Erode the thresholded foreground and its complement into seed sets.

    Both masks are eroded with a square structuring element of the given
    side. If either eroded set comes out empty, both fall back to the
    un-eroded masks and the result is flagged.
    """
    fg_rough = maps.maps[1:].max(axis=0) > foreground_threshold
    bg_rough = ~fg_rough
    if erosion_size <= 1:
        return SeedMasks(fg_rough, bg_rough, False)
    structure = np.ones((erosion_size, erosion_size), dtype=bool)
    fg = ndimage.binary_erosion(fg_rough, structure=structure)
    bg = ndimage.binary_erosion(bg_rough, structure=structure)
    if not fg.any() or not bg.any():
        return SeedMasks(fg_rough, bg_rough, True)
    return SeedMasks(fg, bg, False)


def geodesic_distance(cost: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Shortest-path distance from the seed set over a 4-connected grid.

    Stepping between adjacent pixels costs the mean of their two node costs,
    so the distance accumulated along a path is the trapezoid-rule integral
    of the cost field. Seed pixels are at distance 0; with no seeds every
    distance is +inf.
    """
    h, w = cost.shape
    dist = np.full((h, w), np.inf, dtype=np.float64)
    heap: list[tuple[float, int]] = []
    flat_cost = cost.reshape(-1)
    flat_dist = dist.reshape(-1)
    for idx in np.flatnonzero(seeds.reshape(-1)):
        flat_dist[idx] = 0.0
        heap.append((0.0, int(idx)))
    heapq.heapify(heap)
    while heap:
        d, idx = heapq.heappop(heap)
        if d > flat_dist[idx]:
            continue
        r, c = divmod(idx, w)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            nidx = nr * w + nc
            nd = d + 0.5 * (flat_cost[idx] + flat_cost[nidx])
            if nd < flat_dist[nidx]:
                flat_dist[nidx] = nd
                heapq.heappush(heap, (nd, nidx))
    return dist


def background_probability(
    image: np.ndarray,
    seeds: SeedMasks,
    gradient_weight: float = 10.0,
) -> np.ndarray:
    """P(background) per pixel from competing geodesic distances.

    The traversal cost field is 1 + gradient_weight * |grad(gray)|, so paths
    crossing strong edges are long and the nearer seed set (geodesically)
    claims each pixel. With no foreground seeds at all the whole image is
    background with probability 1.
    """
    if not seeds.foreground.any():
        return np.ones(image.shape[:2], dtype=np.float64)
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray @ np.array([0.299, 0.587, 0.114])
    gray /= 255.0
    gy, gx = np.gradient(gray)
    cost = 1.0 + gradient_weight * np.hypot(gy, gx)
    d_fg = geodesic_distance(cost, seeds.foreground)
    d_bg = geodesic_distance(cost, seeds.background)
    denom = d_fg + d_bg
    # Disjoint seed sets and strictly positive costs keep the denominator
    # positive everywhere; guard anyway for degenerate single-pixel frames.
    denom[denom == 0] = 1.0
    return d_fg / denom


def map_assign(maps: ProbabilityMaps, bg_prob: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of [P(bg), (1 - P(bg)) * M_label].

    Ties resolve to background first, then the lowest label id, which is
    what argmax over the stacked score volume yields.
    """
    if bg_prob.shape != maps.maps.shape[1:]:
        raise ConfigurationError("background map size differs from label maps")
    scores = np.empty_like(maps.maps, dtype=np.float64)
    scores[0] = bg_prob
    scores[1:] = (1.0 - bg_prob)[None] * maps.maps[1:]
    return scores.argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Superpixels and label smoothing.
# ---------------------------------------------------------------------------


def _rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB (0..255) to CIELAB, D65 white, vectorized over the image."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    m = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = linear @ m.T
    white = np.array([0.95047, 1.0, 1.08883])
    t = xyz / white
    f = np.where(t > (6 / 29) ** 3, np.cbrt(t), t / (3 * (6 / 29) ** 2) + 4 / 29)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116 * f[..., 1] - 16
    lab[..., 1] = 500 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200 * (f[..., 1] - f[..., 2])
    return lab


@dataclass
class SuperpixelMap:
    """Contiguous segment ids 0..count-1 for every pixel."""

    labels: np.ndarray
    count: int


def superpixel_segment(
    image: np.ndarray,
    target_count: int,
    compactness: float = 10.0,
    iterations: int = 10,
) -> SuperpixelMap:
    """Local k-means over (Lab, xy) features from a regular grid of centers.

    Deterministic: centers start on a grid, each iteration assigns pixels
    within a 2-step window of each center by combined color plus
    compactness-scaled spatial distance, and centers move to their segment
    means. Afterwards connectivity is enforced: each assigned segment is
    split into connected components and components far below the average
    target size are merged into their largest adjacent neighbor.
    """
    h, w = image.shape[:2]
    n = h * w
    target_count = int(np.clip(target_count, 1, n))
    step = float(np.sqrt(n / target_count))
    lab = _rgb_to_lab(image)
    ys = np.arange(step / 2, h, step)
    xs = np.arange(step / 2, w, step)
    centers_yx = np.array([(y, x) for y in ys for x in xs], dtype=np.float64)
    k = len(centers_yx)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    feats = np.concatenate([lab, rr[..., None], cc[..., None]], axis=2)
    centers = np.array(
        [feats[int(np.clip(round(y), 0, h - 1)), int(np.clip(round(x), 0, w - 1))]
         for y, x in centers_yx]
    )
    spatial_scale = (compactness / step) ** 2

    assign = np.zeros((h, w), dtype=np.int32)
    for _ in range(iterations):
        best = np.full((h, w), np.inf)
        assign.fill(-1)
        for ci in range(k):
            cy, cx = centers[ci, 3], centers[ci, 4]
            r1 = max(int(cy - 2 * step), 0)
            r2 = min(int(cy + 2 * step) + 1, h)
            c1 = max(int(cx - 2 * step), 0)
            c2 = min(int(cx + 2 * step) + 1, w)
            if r1 >= r2 or c1 >= c2:
                continue
            patch = feats[r1:r2, c1:c2]
            dlab = ((patch[..., :3] - centers[ci, :3]) ** 2).sum(axis=2)
            dxy = ((patch[..., 3:] - centers[ci, 3:]) ** 2).sum(axis=2)
            d = dlab + spatial_scale * dxy
            window_best = best[r1:r2, c1:c2]
            better = d < window_best
            window_best[better] = d[better]
            assign[r1:r2, c1:c2][better] = ci
        if (assign < 0).any():
            # Pixels outside every window (possible on extreme aspect
            # ratios): assign to the spatially nearest center.
            miss = np.argwhere(assign < 0)
            for r, c in miss:
                d = (centers[:, 3] - r) ** 2 + (centers[:, 4] - c) ** 2
                assign[r, c] = int(d.argmin())
        for ci in range(k):
            members = feats[assign == ci]
            if len(members):
                centers[ci] = members.mean(axis=0)

    return _enforce_connectivity(assign, k, max(1, int(round(step * step / 4))))


def _enforce_connectivity(assign: np.ndarray, k: int, min_size: int) -> SuperpixelMap:
    h, w = assign.shape
    out = np.full((h, w), -1, dtype=np.int32)
    next_id = 0
    small: list[tuple[np.ndarray, np.ndarray]] = []
    for ci in range(k):
        mask = assign == ci
        if not mask.any():
            continue
        comps, n_comps = ndimage.label(mask)
        for comp in range(1, n_comps + 1):
            comp_mask = comps == comp
            if comp_mask.sum() < min_size:
                small.append(np.nonzero(comp_mask))
            else:
                out[comp_mask] = next_id
                next_id += 1
    if next_id == 0:
        # Everything was "small"; keep the largest component as one segment.
        out[:] = 0
        next_id = 1
        small = []
    for rows, cols in small:
        neighbor_ids: dict[int, int] = {}
        for r, c in zip(rows, cols):
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nr < h and 0 <= nc < w and out[nr, nc] >= 0:
                    neighbor_ids[out[nr, nc]] = neighbor_ids.get(out[nr, nc], 0) + 1
        if neighbor_ids:
            target = max(sorted(neighbor_ids), key=lambda i: neighbor_ids[i])
        else:
            target = 0  # enclosed by other small components; resolved below
        out[rows, cols] = target
    while (out < 0).any():  # pragma: no cover - defensive
        rows, cols = np.nonzero(out < 0)
        out[rows, cols] = 0
    return SuperpixelMap(labels=out, count=next_id)


def smooth_labels(label_map: np.ndarray, superpixels: SuperpixelMap) -> np.ndarray:
    """Replace each superpixel's labels with its majority label.

    Majority ties resolve to the smallest label id. A uniformly labeled
    segment is left untouched by construction, and no new label ids can
    appear.
    """
    if label_map.shape != superpixels.labels.shape:
        raise ConfigurationError("label map and superpixel map sizes differ")
    num_classes = int(label_map.max()) + 1
    seg = superpixels.labels.reshape(-1).astype(np.int64)
    lab = label_map.reshape(-1).astype(np.int64)
    hist = np.zeros((superpixels.count, num_classes), dtype=np.int64)
    np.add.at(hist, (seg, lab), 1)
    majority = hist.argmax(axis=1).astype(label_map.dtype)
    return majority[superpixels.labels]


# ---------------------------------------------------------------------------
# End-to-end parse.
# ---------------------------------------------------------------------------


@dataclass
class ParseResult:
    label_map: np.ndarray  # uint8 [H, W]
    confidence: np.ndarray  # [L+1] mean matching confidence per label
    visible: np.ndarray  # [L+1] bool
    neighbor_ids: list[str]
    seed_fallback: bool

    def to_dict(self, label_names: list[str]) -> dict:
        return {
            "neighbors": self.neighbor_ids,
            "seed_fallback": self.seed_fallback,
            "labels": {
                name: {
                    "confidence": float(self.confidence[i + 1]),
                    "visible": bool(self.visible[i + 1]),
                }
                for i, name in enumerate(label_names)
            },
        }


def network_matcher(checkpoint, *, batch_size: int = 64, threads: int = 1) -> Matcher:
    """Adapt a trained checkpoint into a region matcher.

    Splits the candidate regions into fixed-size chunks, runs the network on
    each, and denormalizes the outputs. Chunks are independent, so running
    them on a thread pool cannot change the result; outputs are concatenated
    in submission order.
    """
    params = checkpoint.params
    normalizer = checkpoint.normalizer

    def run(query: np.ndarray, regions: Sequence[KnnRegion]) -> np.ndarray:
        if not regions:
            return np.zeros((0, 5), dtype=np.float64)
        q = to_network_input(query)
        chunks = [regions[i : i + batch_size] for i in range(0, len(regions), batch_size)]

        def run_chunk(chunk: Sequence[KnnRegion]) -> np.ndarray:
            qs = np.broadcast_to(q, (len(chunk), *q.shape))
            rs = np.stack([to_network_input(r.image) for r in chunk])
            out, _ = forward_batch(params, np.ascontiguousarray(qs), rs)
            return out

        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outs = list(pool.map(run_chunk, chunks))
        else:
            outs = [run_chunk(c) for c in chunks]
        return normalizer.denormalize(np.concatenate(outs, axis=0))

    return run


def parse(
    query_image: np.ndarray,
    corpus: Corpus,
    index: KnnIndex,
    matcher: Matcher,
    *,
    k: int = 9,
    visibility_threshold: float = 0.8,
    foreground_threshold: float = 0.5,
    erosion_size: int = 10,
    gradient_weight: float = 10.0,
    superpixel_count: int = 150,
    use_superpixels: bool = True,
    exclude_id: str | None = None,
    mean_image: np.ndarray | None = None,
    region_cache: dict | None = None,
) -> tuple[ParseResult, ProbabilityMaps]:
    """Parse one query image into a dense label map.

    Retrieves `k` neighbors, scores one region per (neighbor, label) with the
    matcher, and runs the full post-processing chain. When no label is
    visible the parse is all background. `exclude_id` supports leave-one-out
    parsing of corpus members. Deterministic for fixed inputs.
    """
    h, w = query_image.shape[:2]
    num_labels = corpus.num_labels
    if mean_image is None:
        mean_image = corpus.mean_image("train")
    if region_cache is None:
        region_cache = {}

    neighbor_ids = retrieve_knn(
        index, embed_image(query_image, index.extractor), k, exclude=exclude_id
    )

    # Regions whose neighbor lacks the label contribute nothing downstream
    # (no confidence average, no mask), so only present regions are scored.
    regions: list[KnnRegion] = []
    for gid in neighbor_ids:
        for label in range(1, num_labels + 1):
            key = (gid, label)
            region = region_cache.get(key)
            if region is None:
                region = make_knn_region(corpus.entries[gid], label, mean_image)
                region_cache[key] = region
            if region.present:
                regions.append(region)

    outputs = matcher(query_image, regions)
    outputs = np.asarray(outputs, dtype=np.float64).reshape(len(regions), 5)

    by_label: dict[int, list[float]] = {}
    for region, out in zip(regions, outputs):
        by_label.setdefault(region.label, []).append(float(out[0]))
    confidence, visible = aggregate_confidence(by_label, num_labels, visibility_threshold)

    transferred: dict[int, list[tuple[np.ndarray, float]]] = {}
    for region, out in zip(regions, outputs):
        if not visible[region.label]:
            continue
        mask = transfer_label_mask(region, out[1:], (h, w))
        transferred.setdefault(region.label, []).append((mask, float(out[0])))
    maps = build_probability_maps(transferred, num_labels, (h, w))

    if not visible.any():
        label_map = np.zeros((h, w), dtype=np.uint8)
        seeds_fallback = False
    else:
        seeds = foreground_seeds(maps, foreground_threshold, erosion_size)
        seeds_fallback = seeds.erosion_fallback
        bg_prob = background_probability(query_image, seeds, gradient_weight)
        label_map = map_assign(maps, bg_prob)
        if use_superpixels:
            sp = superpixel_segment(query_image, superpixel_count)
            label_map = smooth_labels(label_map, sp)

    result = ParseResult(
        label_map=label_map,
        confidence=confidence,
        visible=visible,
        neighbor_ids=neighbor_ids,
        seed_fallback=seeds_fallback,
    )
    return result, maps


def oracle_matcher(corpus: Corpus, query_id: str) -> Matcher:
    """Ground-truth matcher for pipeline identity tests.

    Returns confidence 1 and the exact box displacement for labels the query
    truly contains, confidence 0 otherwise.
    """
    from .corpus import displacement_target

    entry = corpus.entries[query_id]

    def run(_query: np.ndarray, regions: Sequence[KnnRegion]) -> np.ndarray:
        out = np.zeros((len(regions), 5), dtype=np.float64)
        for i, region in enumerate(regions):
            if region.label in entry.label_set and region.present:
                out[i, 0] = 1.0
                out[i, 1:] = displacement_target(region.box, entry.boxes[region.label])
        return out

    return run


def copy_nearest_labels(
    corpus: Corpus, index: KnnIndex, query_image: np.ndarray, exclude_id: str | None = None
) -> np.ndarray:
    """Baseline: verbatim label map of the single nearest neighbor."""
    nearest = retrieve_knn(
        index, embed_image(query_image, index.extractor), 1, exclude=exclude_id
    )[0]
    return corpus.entries[nearest].label_map.copy()


def write_parse_json(
    result: ParseResult, label_names: list[str], path: str | Path
) -> None:
    Path(path).write_text(json.dumps(result.to_dict(label_names), indent=1))
