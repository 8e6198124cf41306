"""Alternating dual-adversarial training.

Each batch runs two steps. The G/R step freezes the embedder and head, pushes the
generator toward bounded perturbations that move embeddings while staying
classifiable, and trains the repairer to undo train-phase shifts in embedding
space. The phi/theta step freezes G and R and minimises clean + adversarial
cross-entropy plus an NT-Xent term on shifted views.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import Dataset, sample_episode
from .fewshot import EvalOptions, evaluate_episode
from .losses import cross_entropy, embed_distance, generator_terms, nt_xent, shift_batch
from .models import ModelBundle, ModelConfig
from .rng import substream
from .shifts import Phase, random_spec

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "L_ori", "L_adv", "L_self", "L_g", "L_r", "val_acc", "wall_ms")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    lambda1: float = 1.0
    lambda2: float = 1.0
    beta: float = 0.5
    eps: float | None = None
    epochs: int = 200
    patience: int = 10
    seed: int = 0
    d: int = 16
    optimizer: str = "adam"  # "adam" | "sgd"
    tau: float = 0.5
    dropout: float = 0.1
    width: int = 8
    self_source: str = "train"  # "train" | "test" (transductive, unlabeled test-split images)
    steps_per_epoch: int | None = None
    val_episodes: int = 50
    val_way: int = 5
    val_shot: int = 1
    val_query: int = 16
    val_max_shifts: int = 4
    rep_steps: int = 1  # repairer updates per G/R step, each on freshly shifted copies of the batch

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (NT-Xent needs two pairs)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("trade-off weights must be non-negative")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]")
        if self.eps is not None and self.eps < 0:
            raise ConfigError("eps must be non-negative")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")
        if self.d < 1 or self.tau <= 0:
            raise ConfigError("d must be positive and tau > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.rep_steps < 1:
            raise ConfigError("rep_steps must be >= 1")
        if self.self_source not in ("train", "test"):
            raise ConfigError(f"unknown self-supervision source {self.self_source!r}")

    def to_dict(self) -> dict:
        return asdict(self)


DESK_OVERRIDES = {"epochs": 60, "rep_steps": 16}


def desk_config(seed: int = 0, **overrides) -> TrainConfig:
    """Laptop-scale benchmark settings: 60 epochs and 16 repairer updates per G/R step,
    so R sees enough shifted batches before early stopping fires."""
    return TrainConfig(**{**DESK_OVERRIDES, "seed": seed, **overrides})


def _optimizer(bundle: ModelBundle, name: str, cfg: TrainConfig):
    opt = bundle.optim.get(name)
    if opt is None:
        params = bundle.nets()[name].params
        opt = nx.Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else nx.SGD(params, lr=cfg.lr)
        bundle.optim[name] = opt
    opt.lr = cfg.lr
    return opt


def _as_images(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def train_step_gr(bundle: ModelBundle, x, y, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """Update G with grad(L_g + L_adv) and R with grad(L_r); phi and theta are untouched."""
    x = _as_images(x)
    l_g, l_adv = generator_terms(bundle.phi, bundle.theta, bundle.gen, x, y, rng)
    g_grads = nx.backward(l_g + l_adv, bundle.gen.params)
    _optimizer(bundle, "gen", cfg).step(g_grads)

    phi_f = bundle.phi.frozen()
    z = phi_f(x).detach()
    l_r_sum = 0.0
    for _ in range(cfg.rep_steps):
        shifted = shift_batch(x, [random_spec(Phase.TRAIN, rng) for _ in range(len(x))], rng)
        l_r = nx.mean(embed_distance(phi_f(bundle.rep(shifted)), z))
        _optimizer(bundle, "rep", cfg).step(nx.backward(l_r, bundle.rep.params))
        l_r_sum += l_r.item()
    return {"L_g": l_g.item(), "L_adv_g": l_adv.item(), "L_r": l_r_sum / cfg.rep_steps}


def self_views(u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Two independent train-phase shifts (severity 1..3) per image, interleaved as
    rows 2k, 2k+1 so consecutive rows are positive pairs."""
    v1 = shift_batch(u, [random_spec(Phase.TRAIN, rng, max_severity=3) for _ in u], rng)
    v2 = shift_batch(u, [random_spec(Phase.TRAIN, rng, max_severity=3) for _ in u], rng)
    out = np.empty((2 * len(u),) + u.shape[1:])
    out[0::2], out[1::2] = v1, v2
    return out


def phi_losses(bundle: ModelBundle, x, y, cfg: TrainConfig, rng: np.random.Generator,
               unlabeled=None) -> dict[str, nx.Tensor]:
    """L_ori, L_adv, L_self as tensors on one fused embedder pass; G is frozen."""
    x = _as_images(x)
    n = len(x)
    xp = bundle.gen.frozen()(x, rng).data[:, 0]
    parts = [x, xp]
    if cfg.lambda2 > 0:
        u = x if unlabeled is None else _as_images(unlabeled)
        parts.append(self_views(u, rng))
    z_all = bundle.phi(np.concatenate(parts))
    z = nx.slice_rows(z_all, 0, n)
    zp = nx.slice_rows(z_all, n, 2 * n)
    out = {
        "L_ori": cross_entropy(bundle.theta(z), y),
        "L_adv": cross_entropy(bundle.theta(zp), y),
    }
    if cfg.lambda2 > 0:
        out["L_self"] = nt_xent(nx.slice_rows(z_all, 2 * n, z_all.shape[0]), cfg.tau)
    return out


def phi_objective(losses: dict[str, nx.Tensor], cfg: TrainConfig) -> nx.Tensor:
    total = losses["L_ori"] + nx.mul(losses["L_adv"], cfg.lambda1)
    if "L_self" in losses:
        total = total + nx.mul(losses["L_self"], cfg.lambda2)
    return total


def train_step_phi(bundle: ModelBundle, x, y, cfg: TrainConfig, rng: np.random.Generator,
                   unlabeled=None) -> dict:
    """phi <- grad(L_ori + l1 L_adv + l2 L_self), theta <- grad(L_ori + l1 L_adv).

    L_self does not depend on theta, so one backward pass over the full objective
    yields both gradient sets.
    """
    losses = phi_losses(bundle, x, y, cfg, rng, unlabeled)
    total = phi_objective(losses, cfg)
    grads = nx.backward(total, bundle.phi.params + bundle.theta.params)
    k = len(bundle.phi.params)
    _optimizer(bundle, "phi", cfg).step(grads[:k])
    _optimizer(bundle, "theta", cfg).step(grads[k:])
    return {name: t.item() for name, t in losses.items()}


def validation_accuracy(bundle: ModelBundle, episodes, beta: float) -> float:
    opts = EvalOptions(beta=beta)
    return float(np.mean([evaluate_episode(bundle, ep, opts).accuracy for ep in episodes]))


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val: float | None = None


def train(dataset: Dataset, cfg: TrainConfig, progress=None) -> TrainResult:
    """Run the alternating loop with early stopping on validation-episode accuracy.

    Returns the bundle restored to the best validation epoch. ``progress`` is an
    optional callable receiving each epoch's log record.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    train_ds = dataset.subset(Phase.TRAIN)
    if len(train_ds) < cfg.batch_size:
        raise ConfigError(f"train split has {len(train_ds)} images, fewer than one batch")
    classes = np.unique(train_ds.labels)
    y_all = np.searchsorted(classes, train_ds.labels)
    h, w = dataset.hw
    bundle = ModelBundle.init(
        ModelConfig(h=h, w=w, d=cfg.d, n_classes=len(classes), eps=cfg.eps, dropout=cfg.dropout, width=cfg.width),
        seed=cfg.seed,
    )
    result = TrainResult(bundle)
    if cfg.epochs == 0:
        return result

    val_rng = substream(cfg.seed, "val")
    val_eps = [sample_episode(dataset, cfg.val_way, cfg.val_shot, cfg.val_query, cfg.val_max_shifts,
                              Phase.VAL, val_rng) for _ in range(cfg.val_episodes)]
    unlabeled_pool = dataset.subset(Phase.TEST).images if cfg.self_source == "test" else None

    n = len(train_ds)
    n_batches = n // cfg.batch_size
    if cfg.steps_per_epoch is not None:
        n_batches = min(n_batches, cfg.steps_per_epoch)
    best, best_snap, stale, step = -np.inf, None, 0, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = substream(cfg.seed, "epoch", epoch).permutation(n)
        sums: dict[str, float] = {}
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            x = train_ds.images[idx].astype(np.float64)
            y = y_all[idx]
            rng = substream(cfg.seed, "step", step)
            unlabeled = None
            if unlabeled_pool is not None:
                unlabeled = unlabeled_pool[rng.choice(len(unlabeled_pool), len(idx), replace=False)]
            gr = train_step_gr(bundle, x, y, cfg, rng)
            ph = train_step_phi(bundle, x, y, cfg, rng, unlabeled)
            for k, v in {**gr, **ph}.items():
                sums[k] = sums.get(k, 0.0) + v
            step += 1
        val = validation_accuracy(bundle, val_eps, cfg.beta)
        rec = {
            "epoch": epoch, "step": step,
            "L_ori": sums.get("L_ori", 0.0) / n_batches, "L_adv": sums.get("L_adv", 0.0) / n_batches,
            "L_self": sums.get("L_self", 0.0) / n_batches, "L_g": sums.get("L_g", 0.0) / n_batches,
            "L_r": sums.get("L_r", 0.0) / n_batches, "val_acc": val,
            "wall_ms": round(1000 * (time.perf_counter() - t0), 1),
        }
        result.log.append(rec)
        log.info("epoch %d val_acc %.4f L_ori %.4f L_r %.4f", epoch, val, rec["L_ori"], rec["L_r"])
        if progress is not None:
            progress(rec)
        if val > best + 1e-12:
            best, best_snap, stale = val, bundle.snapshot(), 0
            result.best_epoch, result.best_val = epoch, val
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_snap is not None:
        bundle.restore(best_snap)
    return result


def log_to_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: r.get(k, "") for k in LOG_COLUMNS})
    return buf.getvalue()
