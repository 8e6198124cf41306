"""Meta-test evaluation: repair, embed, transductive normalisation, OT alignment, classify."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ot
from .data import Dataset, Episode, sample_episode
from .models import ModelBundle
from .rng import substream
from .shifts import Phase

STD_FLOOR = 1e-5


@dataclass(frozen=True)
class EvalOptions:
    use_repair: bool = True
    use_ot: bool = True
    use_tbn: bool = True
    classifier: str = "proto"  # "proto" | "matching"
    beta: float = 0.5
    repair_side: str = "both"  # "both" | "support" | "query"

    def __post_init__(self):
        if self.classifier not in ("proto", "matching"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.repair_side not in ("both", "support", "query"):
            raise ValueError(f"unknown repair side {self.repair_side!r}")


@dataclass
class EpisodeResult:
    accuracy: float
    predictions: np.ndarray
    plan_entropy: float | None = None
    plan_cost: float | None = None
    use_ot: bool = False
    use_repair: bool = False


def prototype(class_embs) -> np.ndarray:
    e = np.asarray(class_embs, dtype=np.float64)
    if e.size == 0 or len(e) == 0:
        raise ValueError("prototype of an empty class")
    return e.mean(axis=0)


def protonet_predict(protos, q) -> int:
    """Nearest prototype by squared Euclidean distance; ties go to the lowest index."""
    d = ((np.asarray(protos) - np.asarray(q)[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(d))


def protonet_predict_batch(protos, queries) -> np.ndarray:
    return np.argmin(ot.cost_matrix(queries, protos), axis=1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def matchingnet_predict(support_embs, support_labels, q) -> int:
    """Label of the most cosine-similar support item; ties go to the lowest support index."""
    return int(matchingnet_predict_batch(support_embs, support_labels, np.asarray(q)[None])[0])


def matchingnet_predict_batch(support_embs, support_labels, queries) -> np.ndarray:
    sims = _unit(np.asarray(queries, float)) @ _unit(np.asarray(support_embs, float)).T
    return np.asarray(support_labels)[np.argmax(sims, axis=1)]


def tbn_normalize(s_emb, q_emb) -> tuple[np.ndarray, np.ndarray]:
    """Standardise every dimension with the mean/std of the episode's support and query union."""
    s = np.atleast_2d(np.asarray(s_emb, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_emb, dtype=np.float64))
    both = np.concatenate([s, q])
    mu = both.mean(axis=0)
    sd = np.maximum(both.std(axis=0), STD_FLOOR)
    return (s - mu) / sd, (q - mu) / sd


def predict_episode(bundle: ModelBundle, support_images, support_labels, query_images, n_way: int,
                    opts: EvalOptions = EvalOptions()):
    """Query predictions from support images/labels and unlabeled query images."""
    s_img = np.asarray(support_images, dtype=np.float64)
    q_img = np.asarray(query_images, dtype=np.float64)
    if opts.use_repair:
        if opts.repair_side in ("both", "support"):
            s_img = bundle.rep(s_img).data[:, 0]
        if opts.repair_side in ("both", "query"):
            q_img = bundle.rep(q_img).data[:, 0]
    s_emb, q_emb = bundle.embed(s_img), bundle.embed(q_img)
    if opts.use_tbn:
        s_emb, q_emb = tbn_normalize(s_emb, q_emb)
    plan = None
    if opts.use_ot:
        c = ot.cost_matrix(s_emb, q_emb)
        plan = ot.sinkhorn(c, beta=opts.beta)
        s_emb = ot.barycentric_map(plan, q_emb)
    labels = np.asarray(support_labels)
    if opts.classifier == "proto":
        protos = np.stack([prototype(s_emb[labels == c]) for c in range(n_way)])
        preds = protonet_predict_batch(protos, q_emb)
    else:
        preds = matchingnet_predict_batch(s_emb, labels, q_emb)
    return preds, plan


def evaluate_episode(bundle: ModelBundle, episode: Episode, opts: EvalOptions = EvalOptions()) -> EpisodeResult:
    preds, plan = predict_episode(bundle, episode.support_images, episode.support_labels,
                                  episode.query_images, episode.n_way, opts)
    # query labels are read only here, after prediction
    correct = int((preds == episode.query_labels).sum())
    return EpisodeResult(
        accuracy=correct / (episode.n_way * episode.q_query),
        predictions=preds,
        plan_entropy=None if plan is None else ot.plan_entropy(plan),
        plan_cost=None if plan is None else plan.cost,
        use_ot=opts.use_ot,
        use_repair=opts.use_repair,
    )


@dataclass(frozen=True)
class EpisodeParams:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 16
    max_shifts: int = 4
    phase: Phase = Phase.TEST


@dataclass
class BenchmarkResult:
    mean_acc: float
    ci95: float
    accuracies: np.ndarray = field(repr=False)
    mean_plan_entropy: float | None = None
    mean_plan_cost: float | None = None

    def summary(self) -> dict:
        return {"mean_acc": self.mean_acc, "ci95": self.ci95, "n_episodes": int(len(self.accuracies)),
                "mean_plan_entropy": self.mean_plan_entropy, "mean_plan_cost": self.mean_plan_cost}


def ci95(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(1.96 * v.std(ddof=1) / np.sqrt(len(v)))


def _threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("RSQS_THREADS", "1"))
    return max(1, threads)


def run_benchmark(bundle: ModelBundle, dataset: Dataset, n_episodes: int,
                  params: EpisodeParams = EpisodeParams(), opts: EvalOptions = EvalOptions(),
                  seed: int = 0, threads: int | None = None) -> BenchmarkResult:
    """Mean episode accuracy with a 1.96 * standard-error interval.

    Episode i is drawn from substream(seed, "episode", i), so every option set
    evaluated with the same seed sees the same episodes.
    """
    if n_episodes < 2:
        raise ValueError("need at least two episodes for a confidence interval")

    def one(i: int) -> EpisodeResult:
        ep = sample_episode(dataset, params.n_way, params.k_shot, params.q_query, params.max_shifts,
                            params.phase, substream(seed, "episode", i))
        return evaluate_episode(bundle, ep, opts)

    n_threads = _threads(threads)
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(one, range(n_episodes)))
    else:
        results = [one(i) for i in range(n_episodes)]
    acc = np.array([r.accuracy for r in results])
    ent = [r.plan_entropy for r in results if r.plan_entropy is not None]
    cost = [r.plan_cost for r in results if r.plan_cost is not None]
    return BenchmarkResult(
        mean_acc=float(acc.mean()), ci95=ci95(acc), accuracies=acc,
        mean_plan_entropy=float(np.mean(ent)) if ent else None,
        mean_plan_cost=float(np.mean(cost)) if cost else None,
    )


def options_dict(opts: EvalOptions) -> dict:
    return asdict(opts)
