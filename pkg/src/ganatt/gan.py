"""Conditional tabular GAN: training, synthesis and model persistence.

One generator/discriminator pair serves both groups. The treatment flag
enters both networks as a one-hot condition (``[1, 0]`` treated,
``[0, 1]`` control), so a single model synthesizes either group.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import ObservationalDataset
from .metrics import fidelity_report
from .numerics import AdamState, FeedforwardNet, adam_step, forward

log = logging.getLogger(__name__)

MODEL_MAGIC = b"GANATT\x00\x01"
MODEL_VERSION = 1

_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


class ModelLoadError(ValueError):
    pass


class DimensionMismatchError(ModelLoadError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    noise_dim: int = 16
    generator_hidden: tuple[int, ...] = (128, 128)
    discriminator_hidden: tuple[int, ...] = (128, 128)
    generator_lr: float = 2e-4
    discriminator_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    d_steps: int = 1
    # cap of the exponential moving average of generator weights; 0 disables it
    ema_decay: float = 0.999
    seed: int = 0
    snapshot_interval: int = 10
    snapshot_size: int = 2000
    # stop once the standardized moment distance falls below this value
    early_stop_distance: float | None = None
    restarts: int = 1
    discrete_columns: tuple[str, ...] | str = "auto"
    max_categories: int = 10

    def validate(self, n_rows: int | None = None):
        for name in ("epochs", "batch_size", "noise_dim", "d_steps", "snapshot_interval", "snapshot_size", "restarts"):
            value = getattr(self, name)
            minimum = 0 if name == "epochs" else 1
            if int(value) != value or value < minimum:
                raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
        if not self.generator_hidden or not self.discriminator_hidden:
            raise ValueError("networks need at least one hidden layer")
        if any(w < 1 for w in (*self.generator_hidden, *self.discriminator_hidden)):
            raise ValueError("layer widths must be positive")
        if self.generator_lr <= 0 or self.discriminator_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if n_rows is not None and self.batch_size > n_rows:
            raise ValueError(f"batch_size {self.batch_size} exceeds dataset size {n_rows}")


@dataclass
class ColumnSpec:
    """Encoding of one data column inside the GAN's table."""

    name: str
    kind: str  # "continuous" | "discrete"
    mean: float = 0.0
    std: float = 1.0
    categories: tuple[float, ...] = ()

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "discrete" else 1


@dataclass
class GanModel:
    generator: FeedforwardNet
    discriminator: FeedforwardNet
    noise_dim: int
    columns: list[ColumnSpec]
    column_names: tuple[str, ...]
    outcome_name: str = "y"
    treatment_name: str = "d"
    seed: int = 0

    @property
    def data_dim(self) -> int:
        """Number of original columns (covariates plus outcome)."""
        return len(self.columns)

    @property
    def encoded_dim(self) -> int:
        return sum(c.width for c in self.columns)

    @property
    def q(self) -> int:
        return len(self.column_names)

    def copy(self) -> "GanModel":
        return GanModel(
            self.generator.copy(),
            self.discriminator.copy(),
            self.noise_dim,
            list(self.columns),
            self.column_names,
            self.outcome_name,
            self.treatment_name,
            self.seed,
        )


@dataclass
class TrainingLog:
    epochs: list[int] = field(default_factory=list)
    generator_loss: list[float] = field(default_factory=list)
    discriminator_loss: list[float] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    restart_distances: list[float] = field(default_factory=list)
    chosen_restart: int = 0
    steps: int = 0

    def loss_rows(self):
        return list(zip(self.epochs, self.generator_loss, self.discriminator_loss))

    def write_csv(self, path):
        lines = ["epoch,generator_loss,discriminator_loss"]
        lines += [f"{e},{g!r},{d!r}" for e, g, d in self.loss_rows()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# encoding


def one_hot_condition(d) -> np.ndarray:
    d = np.asarray(d).reshape(-1)
    return np.column_stack([d == 1, d == 0]).astype(np.float64)


def _data_table(data: ObservationalDataset) -> np.ndarray:
    return np.column_stack([data.covariates, data.outcomes])


def _fit_columns(table, names, discrete, max_categories) -> list[ColumnSpec]:
    cols = []
    for j, name in enumerate(names):
        col = table[:, j]
        uniq = np.unique(col)
        is_discrete = name in discrete if discrete != "auto" else (
            2 <= len(uniq) <= max_categories and np.all(uniq == np.round(uniq))
        )
        # the outcome always stays continuous
        if is_discrete and j < len(names) - 1:
            cols.append(ColumnSpec(name, "discrete", categories=tuple(float(u) for u in uniq)))
            continue
        std = float(col.std())
        if not np.isfinite(std) or std <= 1e-12:
            raise TrainingError(f"column {name!r} has zero variance; cannot standardize")
        cols.append(ColumnSpec(name, "continuous", float(col.mean()), std))
    return cols


def encode(columns: list[ColumnSpec], table: np.ndarray) -> np.ndarray:
    parts = []
    for j, c in enumerate(columns):
        if c.kind == "continuous":
            parts.append(((table[:, j] - c.mean) / c.std)[:, None])
        else:
            cats = np.asarray(c.categories)
            parts.append((table[:, j][:, None] == cats[None, :]).astype(np.float64))
    return np.hstack(parts)


def decode(columns: list[ColumnSpec], encoded: np.ndarray) -> np.ndarray:
    out = np.empty((len(encoded), len(columns)))
    k = 0
    for j, c in enumerate(columns):
        if c.kind == "continuous":
            out[:, j] = encoded[:, k] * c.std + c.mean
        else:
            # hard argmax of the generated block
            block = encoded[:, k:k + c.width]
            out[:, j] = np.asarray(c.categories)[np.argmax(block, axis=1)]
        k += c.width
    return out


def _softmax_blocks(columns, raw):
    """Apply a softmax to each discrete block of the generator output."""
    out = raw.copy()
    k = 0
    for c in columns:
        if c.kind == "discrete":
            block = raw[:, k:k + c.width]
            e = np.exp(block - block.max(axis=1, keepdims=True))
            out[:, k:k + c.width] = e / e.sum(axis=1, keepdims=True)
        k += c.width
    return out


def _softmax_blocks_backward(columns, soft, grad):
    out = grad.copy()
    k = 0
    for c in columns:
        if c.kind == "discrete":
            s = soft[:, k:k + c.width]
            g = grad[:, k:k + c.width]
            out[:, k:k + c.width] = s * (g - np.sum(g * s, axis=1, keepdims=True))
        k += c.width
    return out


def _has_discrete(columns):
    return any(c.kind == "discrete" for c in columns)


# ---------------------------------------------------------------------------
# training


def _generate_encoded(model: GanModel, cond: np.ndarray, rng: np.random.Generator):
    z = rng.standard_normal((len(cond), model.noise_dim))
    gin = np.hstack([z, cond])
    raw, acts = model.generator.forward_cached(gin)
    return raw, acts


def _moment_distance(model: GanModel, real_table, real_d, rng, n=None) -> float:
    """L2 distance between standardized per-column means/stds of synthetic and real data."""
    total = 0.0
    for g in (0, 1):
        mask = real_d == g
        if not mask.any():
            continue
        real = real_table[mask]
        m = len(real) if n is None else min(n, len(real))
        synth = _synthesize_table(model, g, max(m, 2), rng)
        scale = np.array([c.std if c.kind == "continuous" else 1.0 for c in model.columns])
        dm = (synth.mean(0) - real.mean(0)) / scale
        ds = (synth.std(0) - real.std(0)) / scale
        total += float(np.sqrt(np.sum(dm * dm) + np.sum(ds * ds)))
    return total


def discriminator_loss(disc: FeedforwardNet, real: np.ndarray, fake: np.ndarray) -> float:
    """``-mean log D(real) - mean log(1 - D(fake))``."""
    return float(-np.mean(np.log(forward(disc, real) + _EPS)) - np.mean(np.log(1.0 - forward(disc, fake) + _EPS)))


def discriminator_step(disc: FeedforwardNet, opt: AdamState, real: np.ndarray, fake: np.ndarray) -> float:
    """One Adam step on the discriminator log-loss; returns the loss before the step.

    Rows already carry the condition columns.
    """
    nr = len(real)
    out, acts = disc.forward_cached(np.vstack([real, fake]))
    d_real, d_fake = out[:nr], out[nr:]
    loss = -np.mean(np.log(d_real + _EPS)) - np.mean(np.log(1.0 - d_fake + _EPS))
    # d/dD of the mean log-losses; sigmoid backprop happens inside the net
    grad = np.empty_like(out)
    grad[:nr] = -1.0 / (nr * (d_real + _EPS))
    grad[nr:] = 1.0 / (len(fake) * (1.0 - d_fake + _EPS))
    grads, _ = disc.backward_cached(acts, grad)
    adam_step(opt, disc.params, grads)
    return float(loss)


def _train_once(data: ObservationalDataset, config: TrainConfig, seed: int, columns) -> tuple[GanModel, TrainingLog]:
    rng = np.random.default_rng(seed)
    table = _data_table(data)
    enc = encode(columns, table)
    cond_all = one_hot_condition(data.treatment)
    width = enc.shape[1]
    gen = FeedforwardNet.initialize(
        [config.noise_dim + 2, *config.generator_hidden, width], rng, "relu", "linear"
    )
    disc = FeedforwardNet.initialize(
        [width + 2, *config.discriminator_hidden, 1], rng, "relu", "sigmoid"
    )
    model = GanModel(gen, disc, config.noise_dim, columns, data.column_names, data.outcome_name, data.treatment_name, seed)
    ema = gen.copy() if config.ema_decay > 0 else None
    opt_g = AdamState(config.generator_lr, config.beta1, config.beta2)
    opt_d = AdamState(config.discriminator_lr, config.beta1, config.beta2)
    tlog = TrainingLog()

    n = len(data)
    bs = config.batch_size
    steps_per_epoch = max(n // bs, 1)
    discrete = _has_discrete(columns)
    snap_rng = np.random.default_rng(seed + 7919)

    for epoch in range(1, config.epochs + 1):
        g_losses, d_losses = [], []
        for _ in range(steps_per_epoch):
            for _ in range(config.d_steps):
                idx = rng.integers(0, n, size=bs)
                cond = cond_all[idx]
                raw, _ = _generate_encoded(model, cond, rng)
                fake = _softmax_blocks(columns, raw) if discrete else raw
                d_loss = discriminator_step(disc, opt_d, np.hstack([enc[idx], cond]), np.hstack([fake, cond]))

            idx = rng.integers(0, n, size=bs)
            cond = cond_all[idx]
            raw, gacts = _generate_encoded(model, cond, rng)
            fake = _softmax_blocks(columns, raw) if discrete else raw
            out, dacts = disc.forward_cached(np.hstack([fake, cond]))
            # non-saturating generator loss: -mean log D(G(z))
            g_loss = -np.mean(np.log(out + _EPS))
            _, dinput = disc.backward_cached(dacts, -1.0 / (bs * (out + _EPS)))
            gfake = dinput[:, :width]
            if discrete:
                gfake = _softmax_blocks_backward(columns, fake, gfake)
            ggrads, _ = gen.backward_cached(gacts, gfake)
            adam_step(opt_g, gen.params, ggrads)
            if ema is not None:
                # warm-up: early on the average tracks the last ~10% of steps
                a = min(config.ema_decay, (1.0 + tlog.steps) / (10.0 + tlog.steps))
                for pe, p in zip(ema.params, gen.params):
                    pe *= a
                    pe += (1.0 - a) * p
            g_losses.append(g_loss)
            d_losses.append(d_loss)
            tlog.steps += 1

        tlog.epochs.append(epoch)
        tlog.generator_loss.append(float(np.mean(g_losses)))
        tlog.discriminator_loss.append(float(np.mean(d_losses)))
        if not (np.isfinite(tlog.generator_loss[-1]) and np.isfinite(tlog.discriminator_loss[-1])):
            raise TrainingError(f"non-finite loss at epoch {epoch}")

        if epoch % config.snapshot_interval == 0 or epoch == config.epochs:
            current = _with_generator(model, ema)
            snap = _snapshot(current, data, config.snapshot_size, snap_rng)
            snap["epoch"] = epoch
            tlog.snapshots.append(snap)
            log.debug("epoch %d: g=%.4f d=%.4f dist=%.4f", epoch, tlog.generator_loss[-1],
                      tlog.discriminator_loss[-1], snap["moment_distance"])
            if config.early_stop_distance is not None and snap["moment_distance"] <= config.early_stop_distance:
                break

    return _with_generator(model, ema), tlog


def _with_generator(model: GanModel, gen: FeedforwardNet | None) -> GanModel:
    if gen is None:
        return model
    out = model.copy()
    out.generator = gen.copy()
    return out


def _snapshot(model: GanModel, data: ObservationalDataset, size: int, rng) -> dict:
    """Fidelity of the current generator against a random slice of the data."""
    idx = rng.choice(len(data), size=min(size, len(data)), replace=False)
    part = data.subset(np.sort(idx))
    table = _data_table(part)
    snap = {"moment_distance": _moment_distance(model, table, part.treatment, rng)}
    names = [*data.column_names, data.outcome_name]
    for g in (0, 1):
        mask = part.treatment == g
        if mask.sum() < 2:
            continue
        synth = _synthesize_table(model, g, int(mask.sum()), rng)
        rep = fidelity_report(table[mask], synth, names)
        snap[f"group{g}"] = rep.as_dict()
    return snap


def train(data: ObservationalDataset, config: TrainConfig | None = None) -> tuple[GanModel, TrainingLog]:
    """Fit the conditional GAN to ``data``.

    With ``config.restarts > 1`` the training is repeated with seeds
    ``seed, seed + 1, ...`` and the run whose synthetic per-column moments are
    closest to the data is returned.
    """
    config = config or TrainConfig()
    if len(data) == 0:
        raise TrainingError("cannot train on an empty dataset")
    try:
        config.validate(len(data))
    except ValueError as exc:
        raise TrainingError(str(exc)) from exc
    names = [*data.column_names, data.outcome_name]
    table = _data_table(data)
    columns = _fit_columns(table, names, config.discrete_columns, config.max_categories)

    best = None
    distances = []
    for r in range(config.restarts):
        seed = config.seed + r
        model, tlog = _train_once(data, config, seed, columns)
        dist = _moment_distance(model, table, data.treatment, np.random.default_rng(seed + 104729))
        distances.append(dist)
        log.info("restart %d (seed %d): moment distance %.4f", r, seed, dist)
        if best is None or dist < best[0]:
            best = (dist, r, model, tlog)
    _, r, model, tlog = best
    tlog.restart_distances = distances
    tlog.chosen_restart = r
    return model, tlog


# ---------------------------------------------------------------------------
# synthesis


def _synthesize_table(model: GanModel, group: int, n: int, rng: np.random.Generator) -> np.ndarray:
    cond = one_hot_condition(np.full(n, group))
    raw, _ = _generate_encoded(model, cond, rng)
    return decode(model.columns, raw)


def synthesize(model: GanModel, group: int, n: int, seed: int = 0, chunk: int = 100_000) -> ObservationalDataset:
    """Draw ``n`` synthetic rows for treatment ``group`` on the original scale."""
    if group not in (0, 1):
        raise ValueError("group must be 0 or 1")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    rng = np.random.default_rng(seed)
    parts = []
    done = 0
    while done < n:
        m = min(chunk, n - done)
        parts.append(_synthesize_table(model, group, m, rng))
        done += m
    table = np.vstack(parts)
    if not np.isfinite(table).all():
        raise TrainingError("generator produced non-finite values")
    return ObservationalDataset(
        table[:, :-1], table[:, -1], np.full(n, group, dtype=np.int8),
        model.column_names, model.outcome_name, model.treatment_name,
    )


def moment_distance(model: GanModel, data: ObservationalDataset, seed: int = 0) -> float:
    return _moment_distance(model, _data_table(data), data.treatment, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# persistence


def _net_meta(net: FeedforwardNet) -> dict:
    return {
        "layer_dims": net.layer_dims,
        "hidden_activation": net.hidden_activation,
        "output_activation": net.output_activation,
    }


def save_model(model: GanModel, path) -> None:
    """Write ``model`` to ``path`` (format described in docs/model_format.md)."""
    header = {
        "version": MODEL_VERSION,
        "noise_dim": model.noise_dim,
        "data_dim": model.data_dim,
        "column_names": list(model.column_names),
        "outcome_name": model.outcome_name,
        "treatment_name": model.treatment_name,
        "seed": model.seed,
        "columns": [asdict(c) for c in model.columns],
        "generator": _net_meta(model.generator),
        "discriminator": _net_meta(model.discriminator),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes()
        for net in (model.generator, model.discriminator)
        for p in net.params
    )
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HI", MODEL_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
    buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def _read_net(meta, payload, offset):
    dims = [int(d) for d in meta["layer_dims"]]
    weights, biases = [], []
    for l in range(len(dims) - 1):
        for shape, dest in (((dims[l + 1], dims[l]), weights), ((dims[l + 1],), biases)):
            size = int(np.prod(shape))
            end = offset + 8 * size
            if end > len(payload):
                raise ModelLoadError("model payload is shorter than its architecture requires")
            dest.append(np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape))
            offset = end
    net = FeedforwardNet(dims, weights, biases, meta["hidden_activation"], meta["output_activation"])
    return net, offset


def load_model(path, expected_data_dim: int | None = None) -> GanModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(MODEL_MAGIC) + 6 or raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelLoadError(f"{path}: not a ganatt model file")
    pos = len(MODEL_MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, pos)
    pos += 6
    if version != MODEL_VERSION:
        raise ModelLoadError(f"{path}: unsupported model version {version} (expected {MODEL_VERSION})")
    if pos + hlen + 12 > len(raw):
        raise ModelLoadError(f"{path}: truncated model file")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"{path}: corrupt model header") from exc
    pos += hlen
    plen, crc = struct.unpack_from("<QI", raw, pos)
    pos += 12
    payload = raw[pos:]
    if len(payload) != plen:
        raise ModelLoadError(f"{path}: truncated model file ({len(payload)} of {plen} payload bytes)")
    if zlib.crc32(payload) != crc:
        raise ModelLoadError(f"{path}: payload checksum mismatch")
    try:
        columns = [ColumnSpec(c["name"], c["kind"], c["mean"], c["std"], tuple(c["categories"])) for c in header["columns"]]
        if len(columns) != header["data_dim"]:
            raise DimensionMismatchError(
                f"{path}: header data_dim {header['data_dim']} but {len(columns)} column encodings"
            )
        if expected_data_dim is not None and header["data_dim"] != expected_data_dim:
            raise DimensionMismatchError(
                f"{path}: model data_dim {header['data_dim']} != expected {expected_data_dim}"
            )
        gen, off = _read_net(header["generator"], payload, 0)
        disc, off = _read_net(header["discriminator"], payload, off)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelLoadError):
            raise
        raise ModelLoadError(f"{path}: malformed model: {exc}") from exc
    if off != len(payload):
        raise ModelLoadError(f"{path}: trailing bytes after parameters")
    width = sum(c.width for c in columns)
    if gen.input_dim != header["noise_dim"] + 2 or gen.output_dim != width:
        raise DimensionMismatchError(f"{path}: generator dims {gen.layer_dims} inconsistent with data_dim/noise_dim")
    if disc.input_dim != width + 2 or disc.output_dim != 1:
        raise DimensionMismatchError(f"{path}: discriminator dims {disc.layer_dims} inconsistent with data_dim")
    return GanModel(
        gen, disc, int(header["noise_dim"]), columns, tuple(header["column_names"]),
        header["outcome_name"], header["treatment_name"], int(header["seed"]),
    )
