"""Model variants, training harness, evaluation, and span-frequency analysis.

Three variants share components:
  pip        rollout -> per-frame + context features -> span head
  pip_no_ss  rollout -> context features -> linear head (no span module)
  baseline   input-only context features -> linear head (no rollout at all)

Training minimizes BCE on the outcome plus a weighted negated-PSNR
reconstruction term for variants that roll out frames and a weighted span
conciseness penalty for pip. The best checkpoint is chosen by validation
accuracy. Everything is deterministic in (dataset, config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import autodiff as ad
from . import blobio
from .autodiff import AdamState, Tape, Tensor, adam_step
from .dataset import Manifest, Sample, SceneCache
from .encoders import (ContextEncoder3D, EncoderConfig, FrameEncoder2D, QueryEmbedding,
                       assemble_features)
from .errors import ConfigError, DomainError, FormatError
from .microworld import EVENT_CONTACT
from .rng import SplitMix64, derive
from .simulator import SimulatorConfig, SimulatorNet, sim_loss
from .spanselect import SpanParams, SpanResult, run_span_head, select_salient_frames, threshold_profile

VARIANTS = ("pip", "pip_no_ss", "baseline")
METRICS_HEADER = ("epoch", "split", "bce", "psnr", "jsd", "accuracy")


@dataclass
class RunConfig:
    """All hyperparameters of one training run; serialized with every checkpoint."""

    m_input: int = 3
    horizon: int = 37
    spans: int = 3
    eps: float = 1e-8
    lr: float = 1e-3
    batch_size: int = 2
    epochs: int = 20
    tf_rate: float = 0.1
    alpha: float = 0.01          # weight of the reconstruction (negated PSNR) term
    lam: float = 0.1             # weight of the span conciseness penalty
    joint_backprop: bool = True  # classification gradients reach the simulator
    seed: int = 0
    image_dim: int = 64
    query_dim: int = 16
    context_dim: int = 32
    embed_dim: int = 8
    conv_width: int = 12
    time_bins: int = 4
    sim_enc_widths: tuple = (12, 16, 24, 32)
    sim_latent: int = 32
    sim_hidden: int = 16
    sim_cells: int = 3

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            else:
                out[f.name] = repr(v)
        return out

    @staticmethod
    def from_kv(kv: dict[str, str]) -> "RunConfig":
        cfg = RunConfig()
        known = {f.name: f for f in dc_fields(RunConfig)}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            cur = getattr(cfg, key)
            if isinstance(cur, bool):
                if raw.lower() not in ("true", "false", "0", "1"):
                    raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
                setattr(cfg, key, raw.lower() in ("true", "1"))
            elif isinstance(cur, int):
                setattr(cfg, key, int(raw))
            elif isinstance(cur, float):
                setattr(cfg, key, float(raw))
            elif isinstance(cur, tuple):
                setattr(cfg, key, tuple(int(x) for x in raw.split(",")))
            else:
                setattr(cfg, key, raw)
        return cfg

    def encoder_config(self, resolution: int) -> EncoderConfig:
        return EncoderConfig(resolution=resolution, image_dim=self.image_dim,
                             query_dim=self.query_dim, context_dim=self.context_dim,
                             embed_dim=self.embed_dim, conv_width=self.conv_width,
                             time_bins=self.time_bins)

    def simulator_config(self, resolution: int) -> SimulatorConfig:
        return SimulatorConfig(resolution=resolution, enc_widths=self.sim_enc_widths,
                               latent_channels=self.sim_latent, lstm_hidden=self.sim_hidden,
                               lstm_cells=self.sim_cells)


@dataclass
class ModelOutputs:
    y_hat: Tensor
    span_result: SpanResult | None = None
    generated: list[Tensor] | None = None
    targets: list[Tensor] | None = None


def _linear_head(rng: SplitMix64, n_in: int, name: str) -> tuple[Tensor, Tensor]:
    limit = np.sqrt(6.0 / (n_in + 1))
    w = Tensor(np.array(rng.uniform_values(n_in, -limit, limit)), requires_grad=True, name=f"{name}.w")
    b = Tensor(np.zeros(()), requires_grad=True, name=f"{name}.b")
    return w, b


class PipModel:
    kind = "pip"

    def __init__(self, config: RunConfig, resolution: int):
        rng = SplitMix64(derive(config.seed, 101))
        enc_cfg = config.encoder_config(resolution)
        self.config = config
        self.resolution = resolution
        self.simulator = SimulatorNet(config.simulator_config(resolution), rng.spawn(1))
        self.frame_encoder = FrameEncoder2D(enc_cfg, rng.spawn(2))
        self.context_encoder = ContextEncoder3D(enc_cfg, rng.spawn(3), config.m_input)
        self.query_embedding = QueryEmbedding(enc_cfg, rng.spawn(4))
        self.span = SpanParams(enc_cfg.feature_dim, config.spans, config.eps, rng.spawn(5))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in (self.simulator, self.frame_encoder, self.context_encoder,
                     self.query_embedding, self.span):
            out.update(part.parameters())
        return out


class PipNoSSModel:
    kind = "pip_no_ss"

    def __init__(self, config: RunConfig, resolution: int):
        rng = SplitMix64(derive(config.seed, 101))
        enc_cfg = config.encoder_config(resolution)
        self.config = config
        self.resolution = resolution
        # component streams share keys with the pip variant, so both variants
        # start from identical simulator and encoder weights at equal seeds
        self.simulator = SimulatorNet(config.simulator_config(resolution), rng.spawn(1))
        self.context_encoder = ContextEncoder3D(enc_cfg, rng.spawn(3), config.m_input)
        self.query_embedding = QueryEmbedding(enc_cfg, rng.spawn(4))
        self.head = _linear_head(rng.spawn(6), enc_cfg.query_dim + 3 * enc_cfg.context_dim, "head")

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in (self.simulator, self.context_encoder, self.query_embedding):
            out.update(part.parameters())
        out[self.head[0].name] = self.head[0]
        out[self.head[1].name] = self.head[1]
        return out


class BaselineModel:
    kind = "baseline"

    def __init__(self, config: RunConfig, resolution: int):
        rng = SplitMix64(derive(config.seed, 101))
        enc_cfg = config.encoder_config(resolution)
        self.config = config
        self.resolution = resolution
        self.context_encoder = ContextEncoder3D(enc_cfg, rng.spawn(3), config.m_input,
                                                streams=("frames", "masks"))
        self.query_embedding = QueryEmbedding(enc_cfg, rng.spawn(4))
        self.head = _linear_head(rng.spawn(6), enc_cfg.query_dim + 2 * enc_cfg.context_dim, "head")

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in (self.context_encoder, self.query_embedding):
            out.update(part.parameters())
        out[self.head[0].name] = self.head[0]
        out[self.head[1].name] = self.head[1]
        return out


def build_model(kind: str, config: RunConfig, resolution: int):
    if kind == "pip":
        return PipModel(config, resolution)
    if kind == "pip_no_ss":
        return PipNoSSModel(config, resolution)
    if kind == "baseline":
        return BaselineModel(config, resolution)
    raise DomainError(f"unknown variant {kind!r}; expected one of {VARIANTS}")


def _frame_tensors(arr: np.ndarray) -> list[Tensor]:
    return [Tensor(np.asarray(a, dtype=np.float64)) for a in arr]


def forward(model, sample: Sample, training: bool = False,
            rng: SplitMix64 | None = None) -> ModelOutputs:
    """Run one variant on one sample.

    Baseline never touches target or generated frames; the rollout variants
    only read targets through teacher forcing and the reconstruction loss.
    """
    config = model.config
    inputs = _frame_tensors(sample.input_frames)
    masks = _frame_tensors(sample.input_masks)
    query = sample.query

    if model.kind == "baseline":
        feats = ad.concat([
            model.context_encoder.encode_input_frames(inputs),
            model.context_encoder.encode_input_masks(masks),
            model.query_embedding(query),
        ], axis=0)
        logit = ad.add(ad.dot(feats, model.head[0]), model.head[1])
        return ModelOutputs(y_hat=ad.sigmoid(logit))

    targets = _frame_tensors(sample.target_frames)
    generated = model.simulator.rollout(
        inputs, config.horizon,
        ground_truth=targets if training else None,
        tf_rate=config.tf_rate if training else 0.0,
        rng=rng, training=training)
    class_frames = generated if config.joint_backprop else [g.detach() for g in generated]

    if model.kind == "pip":
        feats = assemble_features(class_frames, inputs, masks, query,
                                  model.frame_encoder, model.context_encoder,
                                  model.query_embedding)
        span_result = run_span_head(feats, model.span)
        return ModelOutputs(y_hat=span_result.y_hat, span_result=span_result,
                            generated=generated, targets=targets)

    feats = ad.concat([
        model.query_embedding(query),
        model.context_encoder.encode_input_frames(inputs),
        model.context_encoder.encode_input_masks(masks),
        model.context_encoder.encode_generated(class_frames),
    ], axis=0)
    logit = ad.add(ad.dot(feats, model.head[0]), model.head[1])
    return ModelOutputs(y_hat=ad.sigmoid(logit), generated=generated, targets=targets)


def total_loss(outputs: ModelOutputs, sample: Sample, config: RunConfig):
    """BCE plus weighted reconstruction and conciseness terms.

    Returns the scalar loss tensor and the float value of each term. With
    joint_backprop off, classification gradients stop at the generated frames
    and the simulator learns from the reconstruction term alone.
    """
    bce = ad.bce_loss(outputs.y_hat, sample.label)
    parts = {"bce": bce.item(), "psnr": float("nan"), "jsd": float("nan")}
    loss = bce
    if outputs.generated is not None:
        if outputs.targets is None:
            raise ConfigError("training a rollout variant needs ground-truth target frames")
        recon = sim_loss(outputs.generated, outputs.targets)
        parts["psnr"] = -recon.item()
        if config.alpha != 0.0:
            loss = ad.add(loss, ad.scale(recon, config.alpha))
    if outputs.span_result is not None and config.spans >= 2:
        penalty = outputs.span_result.penalty
        parts["jsd"] = penalty.item()
        if config.lam != 0.0:
            loss = ad.add(loss, ad.scale(penalty, config.lam))
    return loss, parts


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_accuracy: float
    metrics: list[tuple]
    aborted: bool = False


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def load_params(model, params: dict[str, np.ndarray]) -> None:
    own = model.parameters()
    if set(own) != set(params):
        missing = set(own) ^ set(params)
        raise FormatError(f"checkpoint parameters do not match the model: {sorted(missing)[:6]}")
    for name, arr in params.items():
        if own[name].shape != arr.shape:
            raise FormatError(f"parameter {name} has shape {arr.shape}, expected {own[name].shape}")
        own[name].data = arr.astype(np.float64).copy()


def train(kind: str, manifest: Manifest, config: RunConfig,
          stop_at_train_accuracy: float | None = None,
          log=None) -> TrainResult:
    """Epoch loop with shuffled minibatches and best-on-validation selection."""
    cache = SceneCache(manifest, config.m_input, config.horizon)
    train_samples = cache.samples_of("train")
    val_samples = cache.samples_of("val")
    if not train_samples or not val_samples:
        raise DomainError("training needs nonempty train and validation splits")
    model = build_model(kind, config, manifest.config.resolution)
    params = model.parameters()
    adam = AdamState(lr=config.lr)
    run_rng = SplitMix64(derive(config.seed, 7_001))

    best = _snapshot(params)
    best_epoch = 0
    best_val = -1.0
    metrics: list[tuple] = []
    aborted = False

    for epoch in range(1, config.epochs + 1):
        order = list(range(len(train_samples)))
        SplitMix64(derive(config.seed, 7_100, epoch)).shuffle(order)
        stats = {"bce": 0.0, "psnr": 0.0, "jsd": 0.0}
        seen = {"bce": 0, "psnr": 0, "jsd": 0}
        correct = 0
        diverged = False
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for name in params:
                params[name].zero_grad()
            for idx in batch:
                rec, oid = train_samples[idx]
                sample = cache.load_sample(rec, oid)
                with Tape():
                    outputs = forward(model, sample, training=True, rng=run_rng)
                    loss, parts = total_loss(outputs, sample, config)
                    if not np.isfinite(loss.item()):
                        diverged = True
                        break
                    loss.backward()
                correct += int((outputs.y_hat.item() >= 0.5) == sample.label)
                for key, val in parts.items():
                    if np.isfinite(val):
                        stats[key] += val
                        seen[key] += 1
            if diverged:
                break
            grads = {n: p.grad / len(batch) for n, p in params.items() if p.grad is not None}
            adam_step(params, grads, adam)
        if diverged:
            aborted = True
            if log:
                log(f"epoch {epoch}: loss diverged, keeping last good checkpoint")
            break

        train_acc = correct / len(train_samples)
        row_train = (epoch, "train",
                     stats["bce"] / max(seen["bce"], 1),
                     stats["psnr"] / max(seen["psnr"], 1) if seen["psnr"] else float("nan"),
                     stats["jsd"] / max(seen["jsd"], 1) if seen["jsd"] else float("nan"),
                     train_acc)
        val_acc, val_parts = _evaluate_detailed(model, cache, val_samples)
        row_val = (epoch, "val", val_parts["bce"], val_parts["psnr"], val_parts["jsd"], val_acc)
        metrics.extend([row_train, row_val])
        if log:
            log(f"epoch {epoch}: train acc {train_acc:.3f}, val acc {val_acc:.3f}")
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best = _snapshot(params)
        if stop_at_train_accuracy is not None:
            eval_train_acc, _ = _evaluate_detailed(model, cache, train_samples)
            if eval_train_acc >= stop_at_train_accuracy:
                break

    return TrainResult(best_params=best, final_params=_snapshot(params),
                       best_epoch=best_epoch, best_val_accuracy=best_val,
                       metrics=metrics, aborted=aborted)


def _evaluate_detailed(model, cache: SceneCache, samples) -> tuple[float, dict]:
    correct = 0
    sums = {"bce": 0.0, "psnr": 0.0, "jsd": 0.0}
    seen = {"bce": 0, "psnr": 0, "jsd": 0}
    for rec, oid in samples:
        sample = cache.load_sample(rec, oid)
        outputs = forward(model, sample, training=False)
        correct += int((outputs.y_hat.item() >= 0.5) == sample.label)
        sums["bce"] += ad.bce_loss(outputs.y_hat, sample.label).item()
        seen["bce"] += 1
        if outputs.generated is not None:
            sums["psnr"] += -sim_loss(outputs.generated, outputs.targets).item()
            seen["psnr"] += 1
        if outputs.span_result is not None and len(outputs.span_result.spans) >= 2:
            sums["jsd"] += outputs.span_result.penalty.item()
            seen["jsd"] += 1
    parts = {k: (sums[k] / seen[k] if seen[k] else float("nan")) for k in sums}
    return correct / len(samples), parts


def evaluate(model, manifest: Manifest, split: str) -> float:
    """Mean 0/1 accuracy of thresholded predictions over a split."""
    cache = SceneCache(manifest, model.config.m_input, model.config.horizon)
    samples = cache.samples_of(split)
    if not samples:
        raise DomainError(f"split {split!r} is empty")
    acc, _ = _evaluate_detailed(model, cache, samples)
    return acc


def best_epoch_index(val_accuracies: list[float]) -> int:
    """1-based epoch whose validation accuracy is best (earliest on ties)."""
    best, best_i = -1.0, 0
    for i, v in enumerate(val_accuracies, start=1):
        if v > best:
            best, best_i = v, i
    return best_i


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, params: dict[str, np.ndarray], manifest: Manifest,
                    extra: dict | None = None) -> None:
    meta = {"variant": model.kind, "config": model.config.to_kv(),
            "resolution": model.resolution, "dataset_task": manifest.task}
    meta.update(extra or {})
    blobio.write_checkpoint(path, params, meta)


def load_checkpoint(path):
    """Rebuild the model a checkpoint was saved from and restore its weights."""
    params, meta = blobio.read_checkpoint(path)
    config = RunConfig.from_kv(meta["config"])
    model = build_model(meta["variant"], config, int(meta["resolution"]))
    load_params(model, params)
    return model, meta


# ---------------------------------------------------------------------------
# span analysis


@dataclass
class SpanReportRow:
    sample_id: str
    span_idx: int
    r: np.ndarray
    selected: list[int]
    z: float


def span_frequency_histogram(model, manifest: Manifest, split: str):
    """Salient-frame counts per horizon index, per span and unioned over spans.

    Returns (per_span counts (S, N), union counts (N,), report rows).
    """
    if model.kind != "pip":
        raise DomainError(f"span analysis needs a pip model, got {model.kind!r}")
    config = model.config
    cache = SceneCache(manifest, config.m_input, config.horizon)
    samples = cache.samples_of(split)
    if not samples:
        raise DomainError(f"split {split!r} is empty")
    profile = threshold_profile(config.horizon)
    per_span = np.zeros((config.spans, config.horizon), dtype=np.int64)
    union = np.zeros(config.horizon, dtype=np.int64)
    rows: list[SpanReportRow] = []
    for rec, oid in samples:
        sample = cache.load_sample(rec, oid)
        outputs = forward(model, sample, training=False)
        union_sel: set[int] = set()
        for s, span in enumerate(outputs.span_result.spans):
            selected = select_salient_frames(span.r, profile)
            per_span[s, selected] += 1
            union_sel.update(selected)
            rows.append(SpanReportRow(sample_id=f"{rec.scene_id}:{oid}", span_idx=s,
                                      r=span.r.data.copy(), selected=selected,
                                      z=span.z.item()))
        union[sorted(union_sel)] += 1
    return per_span, union, rows


def contact_event_windows(sample: Sample, horizon: int, window: int = 3) -> list[tuple[int, int]]:
    """Horizon-index windows around ball-target contact events for this sample."""
    out = []
    for h, objs in sample.event_horizon_frames.get(EVENT_CONTACT, []):
        if sample.object_id in objs and 0 in objs:
            lo = max(0, h - window)
            hi = min(horizon - 1, h + window)
            if hi >= 0 and lo <= horizon - 1:
                out.append((lo, hi))
    return out


def event_mass(selected_sets: list[list[int]], windows_per_sample: list[list[tuple[int, int]]]) -> float:
    """Fraction of selected frames lying inside any event window."""
    hit = total = 0
    for selected, windows in zip(selected_sets, windows_per_sample):
        for t in selected:
            total += 1
            if any(lo <= t <= hi for lo, hi in windows):
                hit += 1
    return hit / total if total else 0.0


def permutation_test(selected_sets: list[list[int]], windows_per_sample,
                     horizon: int, n_shuffles: int = 1000, seed: int = 0):
    """Compare observed event mass against random equal-length contiguous spans.

    Returns (observed, permutation mean, p-value) where the p-value is the
    fraction of shuffles whose mass reaches the observed one.
    """
    observed = event_mass(selected_sets, windows_per_sample)
    rng = SplitMix64(derive(seed, 424_242))
    lengths = [len(s) for s in selected_sets]
    masses = []
    for _ in range(n_shuffles):
        placed = []
        for n in lengths:
            if n == 0 or n > horizon:
                placed.append([])
                continue
            start = rng.randint(horizon - n + 1)
            placed.append(list(range(start, start + n)))
        masses.append(event_mass(placed, windows_per_sample))
    masses = np.array(masses)
    p_value = float((1 + np.sum(masses >= observed)) / (1 + n_shuffles))
    return observed, float(masses.mean()), p_value


# ---------------------------------------------------------------------------
# simulator-only training (reconstruction objective, one rollout per scene)


def scene_frame_pairs(cache: SceneCache, split: str):
    """(input frames, target frames) once per scene in a split."""
    out = []
    for rec in cache.manifest.split_scenes(split):
        kept, _ = cache._load_scene(rec)
        out.append((kept[:cache.m_input], kept[cache.m_input:cache.m_input + cache.horizon]))
    return out


def train_simulator(manifest: Manifest, config: RunConfig, log=None):
    """Train only the frame predictor with the reconstruction loss."""
    cache = SceneCache(manifest, config.m_input, config.horizon)
    pairs = scene_frame_pairs(cache, "train")
    if not pairs:
        raise DomainError("training needs a nonempty train split")
    model = SimulatorNet(config.simulator_config(manifest.config.resolution),
                         SplitMix64(derive(config.seed, 101, 1)))
    params = model.parameters()
    adam = AdamState(lr=config.lr)
    run_rng = SplitMix64(derive(config.seed, 7_001))
    history = []
    for epoch in range(1, config.epochs + 1):
        order = list(range(len(pairs)))
        SplitMix64(derive(config.seed, 7_100, epoch)).shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for p in params.values():
                p.zero_grad()
            for idx in batch:
                inputs_arr, targets_arr = pairs[idx]
                inputs = _frame_tensors(inputs_arr)
                targets = _frame_tensors(targets_arr)
                with Tape():
                    generated = model.rollout(inputs, config.horizon, ground_truth=targets,
                                              tf_rate=config.tf_rate, rng=run_rng, training=True)
                    loss = sim_loss(generated, targets)
                    loss.backward()
                epoch_loss += loss.item()
            grads = {n: p.grad / len(batch) for n, p in params.items() if p.grad is not None}
            adam_step(params, grads, adam)
        history.append(epoch_loss / len(pairs))
        if log:
            log(f"simulator epoch {epoch}: mean loss {history[-1]:.3f}")
    return model, history


def mean_rollout_psnr(model: SimulatorNet, manifest: Manifest, split: str,
                      m_input: int, horizon: int) -> float:
    """Mean PSNR of autoregressive rollouts against the true future frames."""
    cache = SceneCache(manifest, m_input, horizon)
    pairs = scene_frame_pairs(cache, split)
    total = 0.0
    for inputs_arr, targets_arr in pairs:
        inputs = _frame_tensors(inputs_arr)
        targets = _frame_tensors(targets_arr)
        generated = model.rollout(inputs, horizon, training=False)
        total += -sim_loss(generated, targets).item()
    return total / len(pairs)


def copy_last_frame_psnr(manifest: Manifest, split: str, m_input: int, horizon: int) -> float:
    """PSNR of the predictor that repeats the last observed frame forever."""
    cache = SceneCache(manifest, m_input, horizon)
    pairs = scene_frame_pairs(cache, split)
    total = 0.0
    for inputs_arr, targets_arr in pairs:
        last = Tensor(np.asarray(inputs_arr[-1], dtype=np.float64))
        targets = _frame_tensors(targets_arr)
        total += -sim_loss([last] * len(targets), targets).item()
    return total / len(pairs)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for epoch, split, bce, psnr, jsd, acc in rows:
            writer.writerow([epoch, split, f"{bce:.6f}", f"{psnr:.6f}", f"{jsd:.6f}", f"{acc:.6f}"])


def read_metrics_csv(path) -> list[tuple]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise FormatError(f"unexpected metrics header {header}")
        for epoch, split, bce, psnr, jsd, acc in reader:
            rows.append((int(epoch), split, float(bce), float(psnr), float(jsd), float(acc)))
    return rows
