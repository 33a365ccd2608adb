"""Matching network: paired conv paths, cross-image conv path, regression head.

The network takes a query image and a masked neighbor region and regresses
five numbers: one matching confidence plus four corner displacements that
move the region's bounding box onto the query's. Two structural ideas carry
the design:

* Two single-image conv paths (one per input) with identical layer shapes.
  Their parameters are independent by default and can be tied.
* A cross-image conv path whose layer ``j`` convolves the concatenation of
  both single-path outputs of layer ``j-1`` (plus the previous cross output,
  when layer ``j-1`` has one).  At layer 1 the cross path sees the two RGB
  inputs stacked into six channels.  Because convolution is linear over input
  channels, one filter bank over the concatenation equals the sum of separate
  filter banks per group; `cross_feature_map` exposes that grouped form.

After the last conv layer, the absolute difference of the two single-path
feature maps is stacked with the cross maps, flattened, and pushed through a
small fully connected stack with a linear 5-way output.

Every conv layer uses stride 2 and is followed by ReLU; there is no pooling.
A Siamese variant for ablations replaces the fusion: each conv path is
flattened and embedded by a shared fc layer, and the head sees the absolute
difference of the two embeddings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from . import tensor
from .errors import ConfigurationError
from .tensor import ConvLayer, FcLayer

OUTPUT_DIM = 5  # 1 confidence + 4 box-corner displacements


class MatchOutput(NamedTuple):
    """One prediction or target: confidence plus (dx1, dy1, dx2, dy2)."""

    confidence: float
    displacements: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.confidence], np.asarray(self.displacements, dtype=float)))


@dataclass(frozen=True)
class ConvSpec:
    """Shape of one conv layer, shared by both single paths.

    `single_maps` is the output map count of each single path; `cross_maps`
    is the cross path's output map count, used only on layers where the cross
    path is enabled.
    """

    single_maps: int
    cross_maps: int
    kernel: int
    stride: int = 2
    padding: int = 0


@dataclass(frozen=True)
class McnnConfig:
    input_hw: tuple[int, int]
    conv_layers: tuple[ConvSpec, ...]
    cross_enabled: frozenset[int]  # 1-based conv layer indices
    fc_dims: tuple[int, ...]
    tie_single_paths: bool = False
    siamese: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "cross_enabled", frozenset(self.cross_enabled))
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        self.validate()

    def validate(self) -> None:
        n = len(self.conv_layers)
        h, w = self.input_hw
        if h < 1 or w < 1:
            raise ConfigurationError("input size must be positive")
        for j in self.cross_enabled:
            if not 1 <= j <= n:
                raise ConfigurationError(
                    f"cross layer index {j} outside conv stack of depth {n}"
                )
        if self.siamese and self.cross_enabled:
            raise ConfigurationError("the siamese variant has no cross path")
        if self.siamese and not self.fc_dims:
            raise ConfigurationError("the siamese variant needs an embedding fc layer")
        for j, spec in enumerate(self.conv_layers, start=1):
            if spec.stride != 2:
                raise ConfigurationError(
                    f"conv layer {j}: the matching network uses stride 2 everywhere"
                )
            if spec.single_maps < 1:
                raise ConfigurationError(f"conv layer {j}: single_maps must be >= 1")
            if j in self.cross_enabled and spec.cross_maps < 1:
                raise ConfigurationError(
                    f"conv layer {j}: cross_maps must be >= 1 on a cross-enabled layer"
                )
            if spec.kernel < 1:
                raise ConfigurationError(f"conv layer {j}: kernel must be >= 1")
            try:
                h, w = tensor.conv_output_hw(h, w, spec.kernel, spec.stride, spec.padding)
            except ConfigurationError as exc:
                raise ConfigurationError(f"conv layer {j}: {exc}") from exc
            if h < 1 or w < 1:
                raise ConfigurationError(f"conv layer {j}: output size collapses to zero")
        for d in self.fc_dims:
            if d < 1:
                raise ConfigurationError("fc widths must be >= 1")

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "conv_layers": [
                {
                    "single_maps": s.single_maps,
                    "cross_maps": s.cross_maps,
                    "kernel": s.kernel,
                    "stride": s.stride,
                    "padding": s.padding,
                }
                for s in self.conv_layers
            ],
            "cross_enabled": sorted(self.cross_enabled),
            "fc_dims": list(self.fc_dims),
            "tie_single_paths": self.tie_single_paths,
            "siamese": self.siamese,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "McnnConfig":
        return cls(
            input_hw=tuple(data["input_hw"]),
            conv_layers=tuple(ConvSpec(**s) for s in data["conv_layers"]),
            cross_enabled=frozenset(data["cross_enabled"]),
            fc_dims=tuple(data["fc_dims"]),
            tie_single_paths=bool(data.get("tie_single_paths", False)),
            siamese=bool(data.get("siamese", False)),
        )

    @property
    def n_layers(self) -> int:
        return len(self.conv_layers)

    def cross_maps_at(self, j: int) -> int:
        """Effective cross map count of layer j (0 when the layer has none)."""
        if j < 1 or j > self.n_layers or j not in self.cross_enabled:
            return 0
        return self.conv_layers[j - 1].cross_maps

    def feature_hw(self) -> list[tuple[int, int]]:
        """Spatial size after each conv layer; index 0 is the input size."""
        sizes = [tuple(self.input_hw)]
        h, w = self.input_hw
        for spec in self.conv_layers:
            h, w = tensor.conv_output_hw(h, w, spec.kernel, spec.stride, spec.padding)
            sizes.append((h, w))
        return sizes

    def cross_in_maps(self, j: int) -> int:
        """Input channel count of cross layer j: P + Q + T of layer j-1."""
        if j == 1:
            return 6  # both RGB inputs stacked
        prev = self.conv_layers[j - 2].single_maps
        return 2 * prev + self.cross_maps_at(j - 1)

    def fusion_dim(self) -> int:
        """Flattened width of |feat_I - feat_R| stacked with the last cross maps."""
        h, w = self.feature_hw()[-1]
        if self.n_layers == 0:
            return 3 * h * w
        maps = self.conv_layers[-1].single_maps + self.cross_maps_at(self.n_layers)
        return maps * h * w

    def single_flat_dim(self) -> int:
        """Flattened width of one single path's last feature map."""
        h, w = self.feature_hw()[-1]
        maps = self.conv_layers[-1].single_maps if self.n_layers else 3
        return maps * h * w


def receptive_field_sizes(config: McnnConfig) -> list[int]:
    """Receptive field edge (input pixels) after each conv layer.

    r_1 = k_1 and r_j = r_{j-1} + (k_j - 1) * product of strides before j.
    """
    sizes = []
    r = 1
    jump = 1
    for spec in config.conv_layers:
        r = r + (spec.kernel - 1) * jump
        jump *= spec.stride
        sizes.append(r)
    return sizes


@dataclass
class McnnParams:
    """All trainable tensors of one network instance.

    When paths are tied, `single_r` holds the same layer objects as
    `single_i` and only the `single_i.*` names exist.
    """

    config: McnnConfig
    single_i: list[ConvLayer]
    single_r: list[ConvLayer]
    cross: dict[int, ConvLayer]
    fc: list[FcLayer]

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Stable name -> array mapping used for gradients and checkpoints."""
        out: dict[str, np.ndarray] = {}
        for j, layer in enumerate(self.single_i, start=1):
            out[f"single_i.conv{j}.weight"] = layer.weights
            out[f"single_i.conv{j}.bias"] = layer.bias
        if not self.config.tie_single_paths:
            for j, layer in enumerate(self.single_r, start=1):
                out[f"single_r.conv{j}.weight"] = layer.weights
                out[f"single_r.conv{j}.bias"] = layer.bias
        for j in sorted(self.cross):
            out[f"cross.conv{j}.weight"] = self.cross[j].weights
            out[f"cross.conv{j}.bias"] = self.cross[j].bias
        for j, layer in enumerate(self.fc, start=1):
            out[f"fc{j}.weight"] = layer.weights
            out[f"fc{j}.bias"] = layer.bias
        return out


def _conv_name(path: str, j: int, tied: bool) -> str:
    if tied and path == "single_r":
        path = "single_i"
    return f"{path}.conv{j}"


def _fc_layer_dims(config: McnnConfig) -> list[tuple[int, int]]:
    """(out, in) shapes of the fc stack, ending in the 5-way output."""
    if config.siamese:
        dims = [(config.fc_dims[0], config.single_flat_dim())]
        prev = config.fc_dims[0]
        for d in config.fc_dims[1:]:
            dims.append((d, prev))
            prev = d
    else:
        dims = []
        prev = config.fusion_dim()
        for d in config.fc_dims:
            dims.append((d, prev))
            prev = d
    dims.append((OUTPUT_DIM, prev))
    return dims


def init_params(config: McnnConfig, seed: int = 0, zeros: bool = False) -> McnnParams:
    """Allocate parameters: seeded uniform fan-in init, or all-zero skeleton."""
    rng = np.random.default_rng(seed)
    dtype = tensor.active_dtype()

    def conv(out_maps: int, in_maps: int, spec: ConvSpec) -> ConvLayer:
        if zeros:
            return ConvLayer(
                weights=np.zeros((out_maps, in_maps, spec.kernel, spec.kernel), dtype=dtype),
                bias=np.zeros(out_maps, dtype=dtype),
                stride=spec.stride,
                padding=spec.padding,
            )
        return ConvLayer.initialized(
            rng, out_maps, in_maps, spec.kernel, spec.stride, spec.padding
        )

    single_i: list[ConvLayer] = []
    single_r: list[ConvLayer] = []
    in_maps = 3
    for spec in config.conv_layers:
        single_i.append(conv(spec.single_maps, in_maps, spec))
        if not config.tie_single_paths:
            single_r.append(conv(spec.single_maps, in_maps, spec))
        in_maps = spec.single_maps
    if config.tie_single_paths:
        single_r = single_i

    cross: dict[int, ConvLayer] = {}
    for j in sorted(config.cross_enabled):
        spec = config.conv_layers[j - 1]
        cross[j] = conv(spec.cross_maps, config.cross_in_maps(j), spec)

    fc: list[FcLayer] = []
    fc_dims = _fc_layer_dims(config)
    for pos, (out_dim, in_dim) in enumerate(fc_dims):
        if zeros:
            fc.append(
                FcLayer(
                    weights=np.zeros((out_dim, in_dim), dtype=dtype),
                    bias=np.zeros(out_dim, dtype=dtype),
                )
            )
        else:
            # hidden fc layers feed ReLU, the last one is linear regression output
            gain = np.sqrt(6.0) if pos < len(fc_dims) - 1 else 1.0
            fc.append(FcLayer.initialized(rng, out_dim, in_dim, gain=gain))
    return McnnParams(config=config, single_i=single_i, single_r=single_r, cross=cross, fc=fc)


def cross_feature_map(
    prev_i: np.ndarray,
    prev_r: np.ndarray,
    prev_c: np.ndarray | None,
    filters_i: np.ndarray,
    filters_r: np.ndarray,
    filters_c: np.ndarray | None,
    bias: np.ndarray,
    stride: int = 2,
    padding: int = 0,
) -> np.ndarray:
    """Cross map from grouped filters: ReLU(bias + f_i*x_i + f_r*x_r + f_c*x_c).

    Equivalent to one convolution over the channel concatenation; kept in
    grouped form so the composition can be checked term by term.
    """
    groups = [(prev_i, filters_i), (prev_r, filters_r)]
    if (prev_c is None) != (filters_c is None):
        raise ConfigurationError("previous cross maps and cross filters must match")
    if prev_c is not None:
        groups.append((prev_c, filters_c))
    total = None
    for idx, (x, w) in enumerate(groups):
        layer = ConvLayer(
            weights=w,
            bias=bias if idx == 0 else np.zeros_like(bias),
            stride=stride,
            padding=padding,
        )
        term = tensor.conv2d_forward(x, layer)
        total = term if total is None else total + term
    return tensor.relu(total)


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def forward_batch(
    params: McnnParams, images: np.ndarray, regions: np.ndarray
) -> tuple[np.ndarray, dict[str, Any]]:
    """Run the network on a batch; returns predictions [B, 5] and a cache.

    The cache keeps every intermediate needed by `backward_batch`, including
    the lowered conv windows, so backward never recomputes a forward pass.
    """
    images = _as_batch(images)
    regions = _as_batch(regions)
    if images.shape != regions.shape:
        raise ConfigurationError("image and region batches must have equal shape")
    cfg = params.config
    if images.shape[1:] != (3, *cfg.input_hw):
        raise ConfigurationError(
            f"network expects 3x{cfg.input_hw[0]}x{cfg.input_hw[1]} inputs, "
            f"got {images.shape[1:]}"
        )

    cache: dict[str, Any] = {
        "arch": "siamese" if cfg.siamese else "mcnn",
        "acts_i": [images],
        "acts_r": [regions],
        "acts_c": {},
        "pre_i": {},
        "pre_r": {},
        "pre_c": {},
        "cols": {},
        "cross_in": {},
    }

    prev_i, prev_r, prev_c = images, regions, None
    for j in range(1, cfg.n_layers + 1):
        cols: list = []
        pre_i = tensor.conv2d_forward(prev_i, params.single_i[j - 1], cols)
        cache["cols"][("i", j)] = cols[0]
        cols = []
        pre_r = tensor.conv2d_forward(prev_r, params.single_r[j - 1], cols)
        cache["cols"][("r", j)] = cols[0]
        act_i, act_r = tensor.relu(pre_i), tensor.relu(pre_r)
        cache["pre_i"][j], cache["pre_r"][j] = pre_i, pre_r

        act_c = None
        if j in params.cross:
            parts = [prev_i, prev_r] + ([prev_c] if prev_c is not None else [])
            cross_in = np.concatenate(parts, axis=1)
            cache["cross_in"][j] = cross_in
            cols = []
            pre_c = tensor.conv2d_forward(cross_in, params.cross[j], cols)
            cache["cols"][("c", j)] = cols[0]
            cache["pre_c"][j] = pre_c
            act_c = tensor.relu(pre_c)
            cache["acts_c"][j] = act_c

        cache["acts_i"].append(act_i)
        cache["acts_r"].append(act_r)
        prev_i, prev_r, prev_c = act_i, act_r, act_c

    b = images.shape[0]
    if cfg.siamese:
        flat_i = prev_i.reshape(b, -1)
        flat_r = prev_r.reshape(b, -1)
        embed = params.fc[0]
        emb_i = tensor.fc_forward(flat_i, embed)
        emb_r = tensor.fc_forward(flat_r, embed)
        diff = emb_i - emb_r
        h = np.abs(diff)
        cache.update(flat_i=flat_i, flat_r=flat_r, ediff_sign=np.sign(diff))
        head = params.fc[1:]
    else:
        diff = prev_i - prev_r
        fused = np.abs(diff)
        cache["fuse_sign"] = np.sign(diff)
        if prev_c is not None:
            cache["fused_single_maps"] = fused.shape[1]
            fused = np.concatenate([fused, prev_c], axis=1)
        cache["fused_shape"] = fused.shape
        h = fused.reshape(b, -1)
        cache["flat"] = h
        head = params.fc

    fc_inputs: list[np.ndarray] = []
    fc_pre: list[np.ndarray] = []
    for idx, layer in enumerate(head):
        fc_inputs.append(h)
        z = tensor.fc_forward(h, layer)
        fc_pre.append(z)
        h = tensor.relu(z) if idx < len(head) - 1 else z
    cache["fc_inputs"] = fc_inputs
    cache["fc_pre"] = fc_pre
    cache["out"] = h
    return h, cache


def forward(
    params: McnnParams, image: np.ndarray, region: np.ndarray
) -> tuple[MatchOutput, dict[str, Any]]:
    """Single-pair forward; returns a MatchOutput plus the backward cache."""
    out, cache = forward_batch(params, image[None] if image.ndim == 3 else image, region[None] if region.ndim == 3 else region)
    return MatchOutput(float(out[0, 0]), out[0, 1:].copy()), cache


def siamese_forward(
    params: McnnParams, image: np.ndarray, region: np.ndarray
) -> tuple[MatchOutput, dict[str, Any]]:
    """Explicit entry point for the Siamese variant."""
    if not params.config.siamese:
        raise ConfigurationError("siamese_forward requires a siamese config")
    return forward(params, image, region)


def matching_loss(
    predictions: np.ndarray, targets: np.ndarray, displacement_valid: np.ndarray
) -> float:
    """Mean squared confidence error plus masked mean squared displacement error.

    Both terms divide by the full pair count, so pairs whose displacement is
    masked out still count in the denominator. With a batch laid out as
    L labels x K neighbors this is exactly the (1/LK)-scaled training
    objective.
    """
    predictions = np.atleast_2d(predictions)
    targets = np.atleast_2d(targets)
    if predictions.shape != targets.shape or predictions.shape[1] != OUTPUT_DIM:
        raise ConfigurationError("loss needs matching [B,5] prediction/target arrays")
    valid = np.asarray(displacement_valid, dtype=predictions.dtype).reshape(-1)
    if valid.shape[0] != predictions.shape[0]:
        raise ConfigurationError("one displacement-valid flag per pair is required")
    d = predictions - targets
    b = predictions.shape[0]
    conf_term = float(np.sum(d[:, 0] ** 2)) / b
    disp_term = float(np.sum((valid[:, None] * d[:, 1:]) ** 2)) / b
    return conf_term + disp_term


def matching_loss_grad(
    predictions: np.ndarray, targets: np.ndarray, displacement_valid: np.ndarray
) -> np.ndarray:
    """d(loss)/d(predictions); exactly zero on masked displacement entries."""
    predictions = np.atleast_2d(predictions)
    targets = np.atleast_2d(targets)
    valid = np.asarray(displacement_valid, dtype=predictions.dtype).reshape(-1)
    d = predictions - targets
    g = np.empty_like(d)
    b = predictions.shape[0]
    g[:, 0] = 2.0 * d[:, 0] / b
    g[:, 1:] = 2.0 * valid[:, None] * d[:, 1:] / b
    return g


def _acc(grads: dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


def backward_batch(
    params: McnnParams,
    cache: dict[str, Any],
    targets: np.ndarray,
    displacement_valid: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for the batch whose forward pass produced `cache`."""
    cfg = params.config
    out = cache["out"]
    loss = matching_loss(out, targets, displacement_valid)
    g = matching_loss_grad(np.atleast_2d(out), np.atleast_2d(targets), displacement_valid)
    grads: dict[str, np.ndarray] = {}
    tied = cfg.tie_single_paths

    head = params.fc[1:] if cfg.siamese else params.fc
    offset = 1 if cfg.siamese else 0
    for idx in range(len(head) - 1, -1, -1):
        if idx < len(head) - 1:
            g = tensor.relu_backward(g, cache["fc_pre"][idx])
        gx, gw, gb = tensor.fc_backward(cache["fc_inputs"][idx], head[idx], g)
        _acc(grads, f"fc{idx + 1 + offset}.weight", gw)
        _acc(grads, f"fc{idx + 1 + offset}.bias", gb)
        g = gx

    n = cfg.n_layers
    acc: dict[tuple[str, int], np.ndarray] = {}

    if cfg.siamese:
        g_emb = g * cache["ediff_sign"]
        embed = params.fc[0]
        gx_i, gw_i, gb_i = tensor.fc_backward(cache["flat_i"], embed, g_emb)
        gx_r, gw_r, gb_r = tensor.fc_backward(cache["flat_r"], embed, -g_emb)
        _acc(grads, "fc1.weight", gw_i + gw_r)
        _acc(grads, "fc1.bias", gb_i + gb_r)
        shape = cache["acts_i"][n].shape
        acc[("i", n)] = gx_i.reshape(shape)
        acc[("r", n)] = gx_r.reshape(shape)
    else:
        g_fused = g.reshape(cache["fused_shape"])
        if n in params.cross:
            p = cache["fused_single_maps"]
            g_diff, g_cross = g_fused[:, :p], g_fused[:, p:]
            acc[("c", n)] = g_cross
        else:
            g_diff = g_fused
        signed = g_diff * cache["fuse_sign"]
        acc[("i", n)] = signed
        acc[("r", n)] = -signed

    for j in range(n, 0, -1):
        if j in params.cross and ("c", j) in acc:
            g_c = tensor.relu_backward(acc.pop(("c", j)), cache["pre_c"][j])
            gin, gw, gb = tensor.conv2d_backward(
                cache["cross_in"][j],
                params.cross[j],
                g_c,
                cols=cache["cols"][("c", j)],
                need_input_grad=j > 1,
            )
            _acc(grads, f"cross.conv{j}.weight", gw)
            _acc(grads, f"cross.conv{j}.bias", gb)
            if gin is not None:
                p = cache["acts_i"][j - 1].shape[1]
                t = cfg.cross_maps_at(j - 1)
                _accumulate(acc, ("i", j - 1), gin[:, :p])
                _accumulate(acc, ("r", j - 1), gin[:, p : 2 * p])
                if t:
                    _accumulate(acc, ("c", j - 1), gin[:, 2 * p :])
        elif j in params.cross:
            # Cross maps that reach neither the fusion nor a later cross
            # layer get exact zero gradients.
            layer = params.cross[j]
            _acc(grads, f"cross.conv{j}.weight", np.zeros_like(layer.weights))
            _acc(grads, f"cross.conv{j}.bias", np.zeros_like(layer.bias))

        for path, layers in (("i", params.single_i), ("r", params.single_r)):
            g_act = acc.pop((path, j), None)
            if g_act is None:
                g_act = np.zeros_like(cache[f"pre_{path}"][j])
            g_pre = tensor.relu_backward(g_act, cache[f"pre_{path}"][j])
            gin, gw, gb = tensor.conv2d_backward(
                cache[f"acts_{path}"][j - 1],
                layers[j - 1],
                g_pre,
                cols=cache["cols"][(path, j)],
                need_input_grad=j > 1,
            )
            name = _conv_name(f"single_{path}", j, tied)
            _acc(grads, f"{name}.weight", gw)
            _acc(grads, f"{name}.bias", gb)
            if gin is not None:
                _accumulate(acc, (path, j - 1), gin)

    return loss, grads


def _accumulate(acc: dict, key: tuple, value: np.ndarray) -> None:
    if key in acc:
        acc[key] = acc[key] + value
    else:
        acc[key] = value


def reduced_check_config() -> McnnConfig:
    """Small network for gradient checking: 32x32 inputs, 3 conv layers,
    cross path at layers 2 and 3, one 32-wide fc layer."""
    return McnnConfig(
        input_hw=(32, 32),
        conv_layers=(
            ConvSpec(4, 4, 5, 2, 2),
            ConvSpec(4, 4, 5, 2, 2),
            ConvSpec(4, 4, 5, 2, 2),
        ),
        cross_enabled=frozenset({2, 3}),
        fc_dims=(32,),
    )


def gradient_check(
    config: McnnConfig | None = None,
    *,
    batch: int = 3,
    samples: int = 200,
    epsilon: float = 1e-4,
    seed: int = 0,
) -> dict:
    """Finite-difference check of the full analytic gradient in 64-bit mode.

    Builds seeded random inputs and mixed targets (both confidence classes,
    both displacement mask states), then compares `backward_batch` against
    central differences on randomly sampled parameter coordinates.
    """
    if config is None:
        config = reduced_check_config()
    rng = np.random.default_rng([seed, 77])
    started = time.perf_counter()
    with tensor.precision("float64"):
        params = init_params(config, seed=seed)
        images = rng.uniform(0.0, 1.0, size=(batch, 3, *config.input_hw))
        regions = rng.uniform(0.0, 1.0, size=(batch, 3, *config.input_hw))
        targets = np.zeros((batch, 5))
        targets[:, 0] = (np.arange(batch) % 2).astype(float)
        targets[:, 1:] = rng.uniform(-0.3, 0.3, size=(batch, 4))
        valid = (np.arange(batch) % 2).astype(float)  # mask at least one pair

        out, cache = forward_batch(params, images, regions)
        _, grads = backward_batch(params, cache, targets, valid)

        def loss_fn() -> float:
            pred, _ = forward_batch(params, images, regions)
            return matching_loss(pred, targets, valid)

        named = params.named_tensors()
        total = sum(int(a.size) for a in named.values())
        err = tensor.finite_diff_check(
            loss_fn, named, grads, epsilon=epsilon, max_samples=samples, rng=rng
        )
    return {
        "max_rel_error": float(err),
        "param_count": total,
        "sampled": min(samples, total),
        "epsilon": epsilon,
        "seed": seed,
        "seconds": round(time.perf_counter() - started, 3),
    }
