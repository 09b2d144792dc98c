"""Training regimes, triplet batching, JSD tracking and cross-validation.

Regimes
-------
``none``
    Cross-entropy on untransformed mini-batches of N instances.
``standard``
    Like ``none`` but each instance is independently swapped for a random
    transformation of itself with probability ``augment_prob``.
``bda``
    Mini-batches of N triplets (x, x1, x2), 3N network inputs, loss is the
    joint cross-entropy over the triplet.
``cl``
    As ``bda`` plus the JSD consistency term weighted by the ramped lambda.

Randomness is drawn from generators keyed on (seed, fold, epoch, stream),
so a run is a pure function of its configuration.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment, losses
from .augment import Augmenter, MaskParams, RirBank
from .autograd import no_grad
from .data import Dataset, synth_dataset
from .nn import AdamW, Model, ModelConfig, build_model, save_checkpoint
from .signal import FeatureConfig, log_mel

log = logging.getLogger(__name__)

REGIMES = ("none", "standard", "bda", "cl")
TRIPLET_REGIMES = ("bda", "cl")
METRIC_COLUMNS = ("epoch", "train_loss", "train_jsd", "val_jsd", "val_acc", "lambda", "lr")

_STREAM_TRAIN, _STREAM_JSD_TRAIN, _STREAM_JSD_VAL = 0, 1, 2


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    name: str = ""
    regime: str = "cl"
    policy: str = "combination"
    epochs: int = 30
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    ramp_epochs: int = 10
    lambda_max: float = 5.0
    lr_decay: float = 0.9
    lr_decay_every: int = 2
    augment_prob: float = 0.5
    seed: int = 0
    data_seed: int = 0
    n_classes: int = 4
    per_class: int = 40
    duration: float = 0.9
    n_folds: int = 5
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 600
    n_mels: int = 32
    channels: tuple = (8, 8, 16, 16)
    rir_bank_size: int = 500
    track_jsd: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        checks = [
            (self.regime in REGIMES, "regime", f"must be one of {REGIMES}"),
            (self.policy in augment.POLICIES, "policy", f"must be one of {augment.POLICIES}"),
            (self.epochs >= 1, "epochs", "must be at least 1"),
            (self.lr > 0, "lr", "must be positive"),
            (self.weight_decay >= 0, "weight_decay", "must be nonnegative"),
            (self.batch_size >= 1, "batch_size", "must be at least 1"),
            (self.ramp_epochs >= 0, "ramp_epochs", "must be nonnegative"),
            (self.lambda_max >= 0, "lambda_max", "must be nonnegative"),
            (0 < self.lr_decay <= 1, "lr_decay", "must lie in (0, 1]"),
            (self.lr_decay_every >= 1, "lr_decay_every", "must be at least 1"),
            (0 <= self.augment_prob <= 1, "augment_prob", "must lie in [0, 1]"),
            (self.n_classes >= 2, "n_classes", "must be at least 2"),
            (self.per_class >= 1, "per_class", "must be at least 1"),
            (self.n_folds >= 2, "n_folds", "must be at least 2"),
            (self.rir_bank_size >= 1, "rir_bank_size", "must be at least 1"),
            (len(self.channels) >= 1, "channels", "must be nonempty"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(key, f"{key}={getattr(self, key)!r} {msg}")

    @property
    def schedule(self) -> losses.LambdaSchedule:
        return losses.LambdaSchedule(self.ramp_epochs, self.lambda_max)

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(self.sample_rate, self.n_fft, self.hop, self.n_mels)

    def batch_elements(self) -> int:
        """Network inputs per optimisation step."""
        return 3 * self.batch_size if self.regime in TRIPLET_REGIMES else self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, f"unknown config key {key!r}")
        return cls(**d)


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(message)
        self.key = key


def paper_config(**overrides) -> RunConfig:
    """Hyperparameters of the full-scale ESC-50 setup (72 epochs, 120-input triplet batches)."""
    base = dict(
        name="paper", regime="cl", policy="combination", epochs=72, lr=5e-4, weight_decay=0.01,
        batch_size=40, ramp_epochs=10, lambda_max=5.0, n_classes=50, per_class=40, duration=5.0,
        sample_rate=44100, n_mels=128, channels=(64, 64, 128, 128, 256, 256, 512, 512),
    )
    base.update(overrides)
    return RunConfig(**base)


def lr_at(base_lr: float, epoch: int, decay: float = 0.9, every: int = 2) -> float:
    """Step decay: base_lr * decay ** (epoch // every)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return base_lr * decay ** (epoch // every)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_jsd: float
    val_jsd: float
    val_acc: float
    lam: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(v)) for v in
                                    (self.train_loss, self.train_jsd, self.val_jsd, self.val_acc, self.lam, self.lr)]


@dataclass
class TripletBatch:
    originals: np.ndarray  # (N, 1, mels, frames)
    variants1: np.ndarray
    variants2: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.size

    def stacked(self) -> np.ndarray:
        """All 3N inputs: originals, then first variants, then second variants."""
        return np.concatenate([self.originals, self.variants1, self.variants2])


class Experiment:
    """A dataset bound to its feature pipeline and augmenter.

    Untransformed features are computed once; transformed ones are
    recomputed on demand (they depend on the sampled transform).
    """

    def __init__(self, dataset: Dataset, features: FeatureConfig, augmenter: Augmenter | None = None,
                 policy: str = "combination"):
        self.dataset = dataset
        self.features = features
        self.augmenter = augmenter or Augmenter(features, RirBank(sample_rate=features.sample_rate))
        self.policy = policy
        self._base = [log_mel(w, features) for w in dataset.waveforms]
        self.base = np.stack([s.values for s in self._base])[:, None]
        self._memo: dict = {}

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Experiment":
        ds = synth_dataset(cfg.n_classes, cfg.per_class, cfg.duration, cfg.sample_rate,
                           np.random.default_rng(cfg.data_seed), cfg.n_folds)
        bank = RirBank(cfg.rir_bank_size, cfg.sample_rate, seed=cfg.data_seed)
        feats = cfg.features
        return cls(ds, feats, Augmenter(feats, bank), cfg.policy)

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels

    def transformed(self, i: int, t) -> np.ndarray:
        """Features of instance ``i`` under transform ``t``, shape (1, mels, frames)."""
        if t is None:
            return self.base[i]
        key = (i, t)
        hit = self._memo.get(key)
        if hit is None:
            hit = self.augmenter.features_of(self.dataset.waveforms[i], t, self._base[i])[None]
            if isinstance(t, augment.PitchShift):
                # small discrete parameter set, reused constantly
                self._memo[key] = hit
        return hit


def assemble_triplet_batch(exp: Experiment, indices, rng: np.random.Generator,
                           policy: str | None = None) -> TripletBatch:
    """For each instance draw two transforms and build (x, x1, x2) features."""
    policy = policy or exp.policy
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("need at least one instance")
    bank_size = len(exp.augmenter.bank)
    v1, v2 = [], []
    for i in indices:
        t1, t2 = augment.sample_transform_pair(policy, rng, bank_size)
        v1.append(exp.transformed(int(i), t1))
        v2.append(exp.transformed(int(i), t2))
    return TripletBatch(exp.base[indices], np.stack(v1), np.stack(v2), exp.labels[indices].copy())


def _standard_batch(exp: Experiment, indices, rng, policy, prob) -> np.ndarray:
    bank_size = len(exp.augmenter.bank)
    out = []
    for i in indices:
        t = augment.sample_transform(policy, rng, bank_size) if rng.random() < prob else None
        out.append(exp.transformed(int(i), t))
    return np.stack(out)


def _epoch_rng(cfg: RunConfig, fold: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, fold, epoch, stream])


def train_steps(model: Model, opt: AdamW, exp: Experiment, train_idx, cfg: RunConfig,
                epoch: int, fold: int = 0, on_step=None) -> float:
    """One pass over ``train_idx`` in mini-batches; returns the mean step loss."""
    rng = _epoch_rng(cfg, fold, epoch, _STREAM_TRAIN)
    lr = lr_at(cfg.lr, epoch, cfg.lr_decay, cfg.lr_decay_every)
    lam = losses.lambda_at(cfg.schedule, epoch)
    order = rng.permutation(np.asarray(train_idx))
    if order.size < cfg.batch_size:
        raise ValueError(f"batch_size={cfg.batch_size} exceeds the {order.size} training instances")
    model.train()
    step_losses = []
    # an incomplete trailing batch is dropped so every step sees exactly N (or 3N) inputs
    for start in range(0, order.size - cfg.batch_size + 1, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        if cfg.regime in TRIPLET_REGIMES:
            tb = assemble_triplet_batch(exp, idx, rng, cfg.policy)
            probs = model(tb.stacked())
            n = len(tb)
            p0, p1, p2 = probs[:n], probs[n:2 * n], probs[2 * n:]
            if cfg.regime == "bda":
                loss = losses.joint_ce([p0, p1, p2], tb.labels)
            else:
                loss = losses.combined_loss(p0, p1, p2, tb.labels, lam)
        else:
            if cfg.regime == "standard":
                x = _standard_batch(exp, idx, rng, cfg.policy, cfg.augment_prob)
            else:
                x = exp.base[idx]
            loss = losses.cross_entropy(model(x), exp.labels[idx])

        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite loss {value} at epoch {epoch}, step {start // cfg.batch_size} "
                f"(regime={cfg.regime}, lr={lr:g}, lambda={lam:g})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        step_losses.append(value)
        if on_step is not None:
            on_step(value)
    return float(np.mean(step_losses))


def track_jsd(model: Model, exp: Experiment, indices, rng: np.random.Generator,
              policy: str | None = None, chunk: int = 64) -> float:
    """Mean triplet JSD of the model's eval-mode predictions over ``indices``.

    Fresh transforms are drawn from ``rng``; no gradients are recorded.
    """
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("cannot track JSD over an empty split")
    was = model.training
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for start in range(0, indices.size, chunk):
                tb = assemble_triplet_batch(exp, indices[start:start + chunk], rng, policy)
                probs = model(tb.stacked()).data
                n = len(tb)
                per = losses.js_divergence(probs[:n], probs[n:2 * n], probs[2 * n:], reduction="none")
                total += float(per.data.sum())
    finally:
        model.training = was
    return total / indices.size


def accuracy(probs: np.ndarray, labels) -> float:
    """Percentage of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    return 100.0 * float(np.mean(np.argmax(probs, axis=1) == labels))


def evaluate(model: Model, x: np.ndarray, labels, chunk: int = 128) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    probs = np.concatenate([model.predict_proba(x[s:s + chunk]) for s in range(0, len(x), chunk)])
    return accuracy(probs, labels)


def standard_error(values) -> float:
    """Sample standard deviation over sqrt(n); NaN for fewer than two values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float("nan")
    return float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    metrics: list = field(default_factory=list)
    model: Model | None = None
    seconds: float = 0.0


def model_config_for(cfg: RunConfig, fold: int) -> ModelConfig:
    seed = int(np.random.SeedSequence([cfg.seed, fold]).generate_state(1)[0])
    return ModelConfig(channels=cfg.channels, n_mels=cfg.n_mels, n_classes=cfg.n_classes, seed=seed)


def train_fold(exp: Experiment, cfg: RunConfig, fold: int, on_epoch=None) -> FoldResult:
    """Train a fresh model with ``fold`` held out, recording metrics every epoch."""
    t0 = time.perf_counter()
    train_idx, val_idx = exp.dataset.split(fold)
    model = build_model(model_config_for(cfg, fold))
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        loss = train_steps(model, opt, exp, train_idx, cfg, epoch, fold)
        if cfg.track_jsd:
            tj = track_jsd(model, exp, train_idx, _epoch_rng(cfg, fold, epoch, _STREAM_JSD_TRAIN), cfg.policy)
            vj = track_jsd(model, exp, val_idx, _epoch_rng(cfg, fold, epoch, _STREAM_JSD_VAL), cfg.policy)
        else:
            tj = vj = float("nan")
        m = EpochMetrics(epoch, loss, tj, vj, evaluate(model, exp.base[val_idx], exp.labels[val_idx]),
                         losses.lambda_at(cfg.schedule, epoch),
                         lr_at(cfg.lr, epoch, cfg.lr_decay, cfg.lr_decay_every))
        history.append(m)
        log.info("fold %d epoch %d loss %.4f train_jsd %.4f val_jsd %.4f val_acc %.2f",
                 fold, epoch, m.train_loss, m.train_jsd, m.val_jsd, m.val_acc)
        if on_epoch is not None:
            on_epoch(m)
    return FoldResult(fold, history[-1].val_acc, history, model.eval(), time.perf_counter() - t0)


@dataclass
class CVResult:
    folds: list

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def se(self) -> float:
        return standard_error(self.accuracies)


def cross_validate(exp: Experiment, cfg: RunConfig, folds=None) -> CVResult:
    folds = exp.dataset.fold_ids if folds is None else list(folds)
    for f in folds:
        exp.dataset.split(f)  # raises on an empty fold before any training
    return CVResult([train_fold(exp, cfg, f) for f in folds])


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------

def metrics_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in history:
        w.writerow(m.row())
    return buf.getvalue()


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        rows = []
        for line in reader:
            if len(line) != len(METRIC_COLUMNS):
                raise ValueError(f"{path}: malformed row {line}")
            rows.append(EpochMetrics(int(line[0]), *map(float, line[1:])))
    return rows


def write_run(out_dir, cfg: RunConfig, result: CVResult) -> Path:
    """Write per-fold metrics and checkpoints plus the run manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in result.folds:
        fold_dir = out / f"fold{f.fold}"
        fold_dir.mkdir(exist_ok=True)
        (fold_dir / "metrics.csv").write_text(metrics_csv(f.metrics))
        if f.model is not None:
            save_checkpoint(f.model, fold_dir / "model.npz")
    manifest = {
        "config": cfg.to_dict(),
        "folds": [{"fold": f.fold, "accuracy": f.accuracy, "metrics": f"fold{f.fold}/metrics.csv",
                   "checkpoint": f"fold{f.fold}/model.npz"} for f in result.folds],
        "summary": {"mean_accuracy": result.mean, "standard_error": _json_float(result.se)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _json_float(x: float):
    return None if math.isnan(x) else x
