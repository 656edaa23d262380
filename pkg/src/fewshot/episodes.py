"""Episodic protocol: task sampling, meta-training, multi-seed evaluation.

An *episode* is one sampled C-way K-shot task.  Meta-training consumes
episodes in meta-batches (default 4): each optimizer step averages the
losses of one batch.  The learning rate halves every ``lr_halve_every``
episodes, and a step uses the rate at the last episode index it covers.

Evaluation follows the multi-seed protocol: for each seed an independent
stream of tasks is sampled and classified, accuracies are recorded per
task, and the report carries a pooled 95% confidence half-width plus the
best / worst / average of the per-seed means.

Random streams are derived as ``default_rng([seed, tag, ...])`` with fixed
integer tags per purpose (sampling, masks, one-shot shuffles, validation,
evaluation), so one seed determines every draw of a run and seed lists
travel across machines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .autodiff import Graph
from .errors import CapacityError, NumericError
from .optim import AdamState, adam_step

# stream tags (second entry of the rng seed vector)
TAG_INIT = 1
TAG_SAMPLING = 2
TAG_MASKS = 3
TAG_SHUFFLE = 4
TAG_VALIDATION = 5
TAG_EVAL = 6
TAG_DUMP = 7


def substream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *extra])


@dataclass(frozen=True)
class EpisodeSpec:
    """Shape of one task family: C ways, K shots, queries per class."""

    ways: int
    shots: int
    n_query: int
    split: str = "train"

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError(f"ways must be >= 2, got {self.ways}")
        if self.shots < 1 or self.n_query < 1:
            raise ValueError("shots and n_query must be >= 1")


@dataclass
class Episode:
    """One sampled task: class-major support and query batches."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: dict  # dataset class id -> episode label 0..C-1
    support_refs: list  # (dataset class id, example index) per support row
    query_refs: list
    ways: int
    shots: int

    def support_rows(self, label: int) -> list:
        k = self.shots
        return list(range(label * k, (label + 1) * k))


def sample_episode(dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw classes and disjoint support/query examples for one task."""
    need = spec.shots + spec.n_query
    ids = dataset.class_ids(spec.split)
    eligible = [c for c in ids if len(dataset.examples(c)) >= need]
    if len(eligible) < spec.ways:
        raise CapacityError(
            f"split '{spec.split}' offers {len(eligible)} classes with >= {need} "
            f"examples, but the task needs {spec.ways}"
        )
    picked = rng.choice(len(eligible), size=spec.ways, replace=False)
    chosen = [eligible[i] for i in picked]

    sup_x, sup_y, sup_r = [], [], []
    qry_x, qry_y, qry_r = [], [], []
    class_map = {}
    for label, cid in enumerate(chosen):
        class_map[cid] = label
        pool = dataset.examples(cid)
        idx = rng.choice(len(pool), size=need, replace=False)
        for j in idx[: spec.shots]:
            sup_x.append(pool[j])
            sup_y.append(label)
            sup_r.append((cid, int(j)))
        for j in idx[spec.shots :]:
            qry_x.append(pool[j])
            qry_y.append(label)
            qry_r.append((cid, int(j)))
    return Episode(
        support_x=np.stack(sup_x),
        support_y=np.asarray(sup_y),
        query_x=np.stack(qry_x),
        query_y=np.asarray(qry_y),
        class_map=class_map,
        support_refs=sup_r,
        query_refs=qry_r,
        ways=spec.ways,
        shots=spec.shots,
    )


@dataclass
class TrainConfig:
    spec: EpisodeSpec
    episodes: int
    meta_batch: int = 4
    lr: float = 0.001
    lr_halve_every: int = 20_000
    val_every: int = 1_000
    val_tasks: int = 200
    dropout_keep: float = 0.5
    aggregation: str = "attention"
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        for name in ("meta_batch", "lr_halve_every", "val_every", "val_tasks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")


def learning_rate_at(episode: int, base_lr: float, halve_every: int) -> float:
    """Learning rate in effect at a 1-indexed episode counter value."""
    return base_lr * 0.5 ** (episode // halve_every)


@dataclass
class TrainResult:
    params: M.ModelParams
    best_params: M.ModelParams
    best_val_acc: float
    state: AdamState
    log_rows: list = field(default_factory=list)  # (episode, lr, loss, val_acc | None)


def episode_accuracy(episode: Episode, preds: np.ndarray) -> float:
    return float((preds == episode.query_y).mean())


def _validate(params, model_config, dataset, train_config, episode_index) -> float:
    spec = EpisodeSpec(
        ways=train_config.spec.ways,
        shots=train_config.spec.shots,
        n_query=train_config.spec.n_query,
        split="val",
    )
    rng = substream(train_config.seed, TAG_VALIDATION, episode_index)
    accs = []
    for _ in range(train_config.val_tasks):
        ep = sample_episode(dataset, spec, rng)
        preds = M.predict_episode(ep, params, model_config, rng=rng, aggregation=train_config.aggregation)
        accs.append(episode_accuracy(ep, preds))
    return float(np.mean(accs))


def meta_train(
    params: M.ModelParams,
    model_config: M.ModelConfig,
    dataset,
    config: TrainConfig,
    progress=None,
) -> TrainResult:
    """Episode-based training with meta-batched Adam steps.

    Every task gets a freshly sampled dropout mask (when keep < 1); the
    meta-validation split is evaluated periodically and the best-scoring
    parameter snapshot is retained.  Raises NumericError if a loss stops
    being finite.
    """
    state = AdamState.for_params(params.as_dict())
    sample_rng = substream(config.seed, TAG_SAMPLING)
    mask_rng = substream(config.seed, TAG_MASKS)
    shuffle_rng = substream(config.seed, TAG_SHUFFLE)

    result = TrainResult(
        params=params, best_params=params.copy(), best_val_acc=-1.0, state=state
    )
    accum = {name: np.zeros_like(a) for name, a in params.named_arrays()}
    episode_index = 0
    while episode_index < config.episodes:
        batch = min(config.meta_batch, config.episodes - episode_index)
        for a in accum.values():
            a[...] = 0.0
        losses = []
        for _ in range(batch):
            ep = sample_episode(dataset, config.spec, sample_rng)
            mask = None
            if config.dropout_keep < 1.0:
                mask = M.sample_task_mask(mask_rng, config.dropout_keep, model_config.embed_channels)
            graph = Graph()
            watched = M.watch(params, graph)
            loss = M.episode_loss(
                ep, watched, model_config, mask=mask, rng=shuffle_rng,
                aggregation=config.aggregation,
            )
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"training diverged: loss {value} at episode {episode_index + 1}"
                )
            graph.backward(loss)
            for name, grad in M.grads_of(watched).items():
                accum[name] += grad / batch
            losses.append(value)

        first = episode_index + 1
        episode_index += batch
        lr = learning_rate_at(episode_index, config.lr, config.lr_halve_every)
        adam_step(params.as_dict(), accum, state, lr)
        mean_loss = float(np.mean(losses))

        val_at = None
        val_acc = None
        for e in range(first, episode_index + 1):
            if e % config.val_every == 0:
                val_at = e
        if val_at is not None:
            val_acc = _validate(params, model_config, dataset, config, val_at)
            if val_acc > result.best_val_acc:
                result.best_val_acc = val_acc
                result.best_params = params.copy()
        for e in range(first, episode_index + 1):
            result.log_rows.append((e, lr, mean_loss, val_acc if e == val_at else None))
        if progress is not None:
            progress(episode_index, lr, mean_loss, val_acc)

    if result.best_val_acc < 0.0:
        result.best_params = params.copy()
    return result


def confidence_interval(per_task_acc) -> tuple:
    """Mean and 1.96 * s / sqrt(T) with s the sample standard deviation."""
    accs = np.asarray(per_task_acc, dtype=np.float64)
    if accs.size < 2:
        raise ValueError("confidence interval needs at least 2 observations")
    mean = float(accs.mean())
    half = float(1.96 * accs.std(ddof=1) / np.sqrt(accs.size))
    return mean, half


@dataclass
class EvalReport:
    seeds: list
    tasks_per_seed: int
    per_seed_means: list
    per_seed_half_widths: list
    mean_accuracy: float
    half_width: float
    best: float
    worst: float
    average: float

    def to_text(self) -> str:
        lines = [
            f"tasks_per_seed: {self.tasks_per_seed}",
            f"seeds: {','.join(str(s) for s in self.seeds)}",
            f"mean_accuracy: {self.mean_accuracy!r}",
            f"ci95_half_width: {self.half_width!r}",
            f"best: {self.best!r}",
            f"worst: {self.worst!r}",
            f"average: {self.average!r}",
        ]
        return "\n".join(lines) + "\n"

    def seeds_tsv(self) -> str:
        out = ["# seed\ttasks\tmean_accuracy\tci95_half_width"]
        for s, m, h in zip(self.seeds, self.per_seed_means, self.per_seed_half_widths):
            out.append(f"{s}\t{self.tasks_per_seed}\t{m!r}\t{h!r}")
        return "\n".join(out) + "\n"


def build_report(seeds, per_seed_task_accs, tasks_per_seed: int) -> EvalReport:
    per_seed_means = [float(np.mean(a)) for a in per_seed_task_accs]
    per_seed_half = [confidence_interval(a)[1] for a in per_seed_task_accs]
    pooled = np.concatenate([np.asarray(a) for a in per_seed_task_accs])
    mean, half = confidence_interval(pooled)
    return EvalReport(
        seeds=list(seeds),
        tasks_per_seed=tasks_per_seed,
        per_seed_means=per_seed_means,
        per_seed_half_widths=per_seed_half,
        mean_accuracy=mean,
        half_width=half,
        best=max(per_seed_means),
        worst=min(per_seed_means),
        average=float(np.mean(per_seed_means)),
    )


def meta_test(
    params: M.ModelParams,
    model_config: M.ModelConfig,
    dataset,
    spec: EpisodeSpec,
    tasks_per_seed: int,
    seeds,
    aggregation: str = "attention",
    predict_fn=None,
) -> EvalReport:
    """Multi-seed evaluation over frozen parameters, no dropout anywhere.

    ``predict_fn(episode, rng) -> labels`` may replace the model's own
    predictions (used for harness self-checks).
    """
    per_seed = []
    for seed in seeds:
        rng = substream(seed, TAG_EVAL)
        accs = []
        for _ in range(tasks_per_seed):
            ep = sample_episode(dataset, spec, rng)
            if predict_fn is None:
                preds = M.predict_episode(ep, params, model_config, rng=rng, aggregation=aggregation)
            else:
                preds = predict_fn(ep, rng)
            accs.append(episode_accuracy(ep, preds))
        per_seed.append(accs)
    return build_report(list(seeds), per_seed, tasks_per_seed)
