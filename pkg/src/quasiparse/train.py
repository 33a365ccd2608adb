"""Training loop, learning-rate schedule, and checkpoint files.

Protocol: plain minibatch SGD with momentum and weight decay on the combined
confidence/displacement loss, targets standardized element-wise over the
training pair stream. The pair set is generated once per run (seeded) and
reshuffled every epoch; validation loss is computed on unaugmented,
unbalanced pairs from the validation split, falling back to the training
split when the corpus has none. The learning rate divides by a fixed factor
whenever validation loss fails to improve for `plateau_patience` consecutive
epochs.

Checkpoints are a binary container (magic "MCNN"): a JSON config block, the
named parameter tensors as little-endian float32, the master RNG state, the
epoch counter, and the output normalizer. Saving, loading, and saving again
yields byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import corpus as corpus_mod
from . import model as model_mod
from . import tensor
from .corpus import Corpus, OutputNormalizer, TrainPair, fit_normalizer, targets_matrix, to_network_input
from .errors import CheckpointError, ConfigurationError, TrainingError
from .model import McnnConfig, McnnParams
from .retrieval import DownsampleExtractor, Extractor, KnnIndex, build_index
from .tensor import SgdState, sgd_step

CHECKPOINT_MAGIC = b"MCNN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    initial_lr: float = 5e-4
    lr_drop_factor: float = 10.0
    plateau_patience: int = 3
    min_improvement: float = 1e-4
    max_epochs: int = 30
    seed: int = 0
    k_train: int = 8
    balance_ratio: float = 2.0
    augment: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0 or self.k_train < 1:
            raise ConfigurationError("batch size, epochs and k_train must be positive")
        if self.lr_drop_factor < 1:
            raise ConfigurationError("lr_drop_factor must be >= 1")
        if self.initial_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("rates must be non-negative")


class EpochLog(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class Checkpoint:
    mcnn_config: McnnConfig
    params: McnnParams
    normalizer: OutputNormalizer
    epoch: int
    rng_state: dict
    lr: float


def _net_inputs_for(pairs: list[TrainPair]) -> tuple[dict, dict]:
    """Network-ready tensors for every distinct query variant and region."""
    queries: dict[str, np.ndarray] = {}
    regions: dict[tuple[str, int], np.ndarray] = {}
    for p in pairs:
        if p.query_id not in queries:
            queries[p.query_id] = to_network_input(p.query)
        rkey = (p.region.source_id, p.region.label)
        if rkey not in regions:
            regions[rkey] = to_network_input(p.region.image)
    return queries, regions


def _batch_arrays(
    pairs: list[TrainPair],
    idx: np.ndarray,
    queries: dict,
    regions: dict,
    targets: np.ndarray,
    valid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    qs = np.stack([queries[pairs[i].query_id] for i in idx])
    rs = np.stack(
        [regions[(pairs[i].region.source_id, pairs[i].region.label)] for i in idx]
    )
    return qs, rs, targets[idx], valid[idx]


def _eval_loss(
    params: McnnParams,
    pairs: list[TrainPair],
    queries: dict,
    regions: dict,
    targets: np.ndarray,
    valid: np.ndarray,
    chunk: int = 256,
) -> float:
    total = 0.0
    for start in range(0, len(pairs), chunk):
        idx = np.arange(start, min(start + chunk, len(pairs)))
        qs, rs, t, v = _batch_arrays(pairs, idx, queries, regions, targets, valid)
        out, _ = model_mod.forward_batch(params, qs, rs)
        total += model_mod.matching_loss(out, t, v) * len(idx)
    return total / len(pairs)


def train(
    corpus: Corpus,
    mcnn_config: McnnConfig,
    config: TrainConfig,
    *,
    extractor: Extractor | None = None,
    resume: Checkpoint | None = None,
    diag_path: str | Path | None = None,
    progress: Callable[[EpochLog], None] | None = None,
) -> tuple[Checkpoint, list[EpochLog], KnnIndex]:
    """Train a matching network on the corpus's train split.

    Returns the final checkpoint, the per-epoch log, and the retrieval index
    built over the train split (the same one used to pick training
    neighbors). Identical corpus, configs, and seed give bit-identical
    checkpoints in single-threaded runs. A non-finite loss writes a
    diagnostic checkpoint to `diag_path` (when given) and raises.

    Resuming restores parameters, normalizer, epoch counter, learning rate,
    and shuffle RNG state; momentum buffers restart at zero.
    """
    if extractor is None:
        extractor = DownsampleExtractor()
    index = build_index(corpus, "train", extractor)
    mean_image = corpus.mean_image("train")

    pairs = corpus_mod.gen_pairs(
        corpus,
        index,
        split="train",
        k_neighbors=min(config.k_train, len(index) - 1),
        seed=config.seed,
        balance_ratio=config.balance_ratio,
        augment=config.augment,
        mean_image=mean_image,
    )
    if not pairs:
        raise ConfigurationError("no training pairs were generated")
    raw_targets, valid = targets_matrix(pairs)

    val_split = "val" if "val" in corpus.splits and corpus.splits["val"] else "train"
    val_pairs = corpus_mod.gen_pairs(
        corpus,
        index,
        split=val_split,
        k_neighbors=min(config.k_train, len(index) - 1),
        seed=config.seed + 1,
        balance_ratio=None,
        augment=False,
        mean_image=mean_image,
    )
    raw_val_targets, val_valid = targets_matrix(val_pairs)

    if resume is None:
        normalizer = fit_normalizer(raw_targets, valid)
        params = model_mod.init_params(mcnn_config, seed=config.seed)
        start_epoch = 0
        lr = config.initial_lr
        shuffle_rng = np.random.default_rng([config.seed, 0xECB0])
    else:
        normalizer = resume.normalizer
        params = resume.params
        start_epoch = resume.epoch
        lr = resume.lr
        shuffle_rng = np.random.default_rng(0)
        shuffle_rng.bit_generator.state = resume.rng_state

    dtype = tensor.active_dtype()
    targets = normalizer.normalize(raw_targets).astype(dtype)
    valid_f = valid.astype(dtype)
    val_targets = normalizer.normalize(raw_val_targets).astype(dtype)
    val_valid_f = val_valid.astype(dtype)

    queries, regions = _net_inputs_for(pairs)
    vq, vr = _net_inputs_for(val_pairs)

    state = SgdState(
        learning_rate=lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    named = params.named_tensors()
    logs: list[EpochLog] = []
    best_val = np.inf
    bad_epochs = 0
    n = len(pairs)

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            mcnn_config=mcnn_config,
            params=params,
            normalizer=normalizer,
            epoch=epoch,
            rng_state=shuffle_rng.bit_generator.state,
            lr=state.learning_rate,
        )

    for epoch in range(start_epoch + 1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            qs, rs, t, v = _batch_arrays(pairs, idx, queries, regions, targets, valid_f)
            out, cache = model_mod.forward_batch(params, qs, rs)
            loss, grads = model_mod.backward_batch(params, cache, t, v)
            if not np.isfinite(loss):
                if diag_path is not None:
                    save_checkpoint(snapshot(epoch - 1), diag_path)
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}; diagnostics "
                    f"{'written to ' + str(diag_path) if diag_path else 'not requested'}"
                )
            sgd_step(named, grads, state)
            epoch_loss += loss * len(idx)
        train_loss = epoch_loss / n
        val_loss = _eval_loss(params, val_pairs, vq, vr, val_targets, val_valid_f)

        if val_loss < best_val - config.min_improvement:
            best_val = val_loss
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.plateau_patience:
                state.learning_rate /= config.lr_drop_factor
                bad_epochs = 0

        row = EpochLog(epoch, float(train_loss), float(val_loss), state.learning_rate)
        logs.append(row)
        if progress is not None:
            progress(row)

    return snapshot(config.max_epochs if config.max_epochs > start_epoch else start_epoch), logs, index


# ---------------------------------------------------------------------------
# Checkpoint container.
# ---------------------------------------------------------------------------


def _write_block(buf: io.BytesIO, payload: bytes) -> None:
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """Serialize a checkpoint; the layout is stable and fully deterministic."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_block = {
        "mcnn": ck.mcnn_config.to_dict(),
        "lr": ck.lr,
    }
    _write_block(buf, json.dumps(config_block, sort_keys=True).encode("utf-8"))
    buf.write(struct.pack("<I", ck.epoch))
    _write_block(buf, json.dumps(ck.rng_state, sort_keys=True).encode("utf-8"))

    named = ck.params.named_tensors()
    buf.write(struct.pack("<I", len(named)))
    for name, array in named.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype="<f4").tobytes())

    buf.write(np.asarray(ck.normalizer.mean, dtype="<f8").tobytes())
    buf.write(np.asarray(ck.normalizer.variance, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint file.

    Tensor names and shapes must match what the embedded config dictates;
    the offending tensor is named on mismatch.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config_block = json.loads(_read_exact(fh, cfg_len, "config").decode("utf-8"))
            mcnn_config = McnnConfig.from_dict(config_block["mcnn"])
            lr = float(config_block["lr"])
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"invalid checkpoint config block: {exc}") from exc
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4, "epoch"))
        (rng_len,) = struct.unpack("<I", _read_exact(fh, 4, "rng length"))
        try:
            rng_state = json.loads(_read_exact(fh, rng_len, "rng state").decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"invalid rng state block: {exc}") from exc

        params = model_mod.init_params(mcnn_config, zeros=True)
        expected = params.named_tensors()
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        if count != len(expected):
            raise CheckpointError(
                f"checkpoint holds {count} tensors, config dictates {len(expected)}"
            )
        seen: set[str] = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
            if name in seen:
                raise CheckpointError(f"duplicate tensor {name!r} in checkpoint")
            seen.add(name)
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape"))
            target = expected[name]
            if shape != target.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {shape}, config dictates {target.shape}"
                )
            data = np.frombuffer(
                _read_exact(fh, 4 * int(np.prod(shape, dtype=np.int64)), f"tensor {name}"),
                dtype="<f4",
            )
            target[...] = data.reshape(shape)
        mean = np.frombuffer(_read_exact(fh, 40, "normalizer mean"), dtype="<f8").copy()
        variance = np.frombuffer(
            _read_exact(fh, 40, "normalizer variance"), dtype="<f8"
        ).copy()
        if fh.read(1):
            raise CheckpointError(f"trailing bytes at the end of {path}")
    return Checkpoint(
        mcnn_config=mcnn_config,
        params=params,
        normalizer=OutputNormalizer(mean=mean, variance=variance),
        epoch=epoch,
        rng_state=rng_state,
        lr=lr,
    )


# ---------------------------------------------------------------------------
# Epoch log CSV.
# ---------------------------------------------------------------------------


def write_log_csv(logs: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in logs:
            writer.writerow(
                [row.epoch, f"{row.train_loss:.10g}", f"{row.val_loss:.10g}", f"{row.lr:.10g}"]
            )


def read_log_csv(path: str | Path) -> list[EpochLog]:
    logs = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            logs.append(
                EpochLog(
                    int(rec["epoch"]),
                    float(rec["train_loss"]),
                    float(rec["val_loss"]),
                    float(rec["lr"]),
                )
            )
    return logs
