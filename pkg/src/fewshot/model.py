"""The few-shot network: embedder, shared channel attention, distances.

The embedder turns each image into a stack of feature maps.  For every
channel index, the feature maps that different support examples produced at
that index are stacked and fed to one small shared attention network, which
scores how much each example's map should contribute to the class
representative.  Representatives are compared to query embeddings by
Euclidean distance, and class probabilities are a softmax over negative
distances.

Aggregation strategies:

* multi-shot: the stack holds the K maps of one class; weights are
  softmax-normalized (positive, sum 1).
* one-shot: the stack holds the target class's map first and the other
  C-1 classes' maps behind it in a random order; weights are raw network
  outputs (no softmax), letting the network borrow features from other
  classes with signed weights.

Batch normalization always uses the statistics of the batch at hand (there
are no running averages), so support and query batches are normalized
independently, at training and test time alike.

Per-task dropout: one channel mask is sampled per task for embedder blocks
2 and 3 and reused for every support and query example of that task; at
meta-test the network runs whole.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (
    Graph,
    Tensor,
    batchnorm_batch,
    conv2d,
    dropout_apply,
    euclidean_distance,
    linear,
    log_softmax,
    maxpool2,
    relu,
    softmax,
)
from .errors import CapacityError, ShapeError

N_EMBED_BLOCKS = 4
N_ATTN_BLOCKS = 2
DROPOUT_BLOCKS = (2, 3)  # 1-indexed embedder blocks masked during meta-training

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ConvBlock",
    "Embedding",
    "ChannelStack",
    "AggregationWeights",
    "ClassRepresentative",
    "TaskDropoutMask",
    "init_params",
    "watch",
    "grads_of",
    "sample_task_mask",
    "embed_batch",
    "embed",
    "attention_weights",
    "aggregate_kshot",
    "aggregate_oneshot",
    "aggregate_mean",
    "euclidean_distance",
    "classify",
    "probabilities_from_distances",
    "episode_distances",
    "episode_loss",
    "predict_episode",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; fixed once parameters are created."""

    in_channels: int = 1
    image_size: int = 28
    embed_channels: int = 64
    attn_channels: int = 32
    m_max: int = 5
    last_pool: bool = False
    dropout_keep: float = 0.5
    oneshot_softmax: bool = False

    @property
    def embed_side(self) -> int:
        """Spatial side of an embedding's feature maps."""
        side = self.image_size
        pools = N_EMBED_BLOCKS if self.last_pool else N_EMBED_BLOCKS - 1
        for _ in range(pools):
            if side < 2:
                raise ShapeError(
                    f"image size {self.image_size} too small for {pools} pooling stages"
                )
            side //= 2
        if side < 1:
            raise ShapeError(f"image size {self.image_size} pools down to nothing")
        return side

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "embed_channels": self.embed_channels,
            "attn_channels": self.attn_channels,
            "m_max": self.m_max,
            "last_pool": self.last_pool,
            "dropout_keep": self.dropout_keep,
            "oneshot_softmax": self.oneshot_softmax,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ConvBlock:
    kernel: object  # [Cout, Cin, 3, 3]
    bias: object  # [Cout]
    gamma: object  # [Cout]
    beta: object  # [Cout]


@dataclass
class ModelParams:
    """All trainable arrays: 4 embedder blocks, 2 attention blocks, one FC.

    Fields hold numpy arrays normally; ``watch`` produces a twin whose
    fields are graph leaves so the same forward code records gradients.
    """

    embed: list = field(default_factory=list)
    attn: list = field(default_factory=list)
    fc_weight: object = None
    fc_bias: object = None

    def named_arrays(self):
        """Deterministically ordered (name, array) pairs."""
        for i, blk in enumerate(self.embed, start=1):
            yield f"embed{i}.kernel", blk.kernel
            yield f"embed{i}.bias", blk.bias
            yield f"embed{i}.gamma", blk.gamma
            yield f"embed{i}.beta", blk.beta
        for i, blk in enumerate(self.attn, start=1):
            yield f"attn{i}.kernel", blk.kernel
            yield f"attn{i}.bias", blk.bias
            yield f"attn{i}.gamma", blk.gamma
            yield f"attn{i}.beta", blk.beta
        yield "attn.fc_weight", self.fc_weight
        yield "attn.fc_bias", self.fc_bias

    def as_dict(self) -> dict:
        return dict(self.named_arrays())

    def copy(self) -> "ModelParams":
        return ModelParams(
            embed=[ConvBlock(b.kernel.copy(), b.bias.copy(), b.gamma.copy(), b.beta.copy()) for b in self.embed],
            attn=[ConvBlock(b.kernel.copy(), b.bias.copy(), b.gamma.copy(), b.beta.copy()) for b in self.attn],
            fc_weight=self.fc_weight.copy(),
            fc_bias=self.fc_bias.copy(),
        )

    def attention_array_names(self) -> list:
        return [n for n, _ in self.named_arrays() if n.startswith("attn")]


@dataclass
class Embedding:
    """Feature-map stack of one example."""

    maps: np.ndarray  # [n, l, l]
    class_id: int = -1
    example_id: int = -1


@dataclass
class ChannelStack:
    """Feature maps of several examples at one channel index."""

    stack: np.ndarray  # [m, l, l]
    ordering: list = field(default_factory=list)  # (class_id, example_id) pairs


@dataclass
class AggregationWeights:
    w: np.ndarray  # [m] (or [B, m] for a batch of stacks)
    normalized: bool = False


@dataclass
class ClassRepresentative:
    maps: np.ndarray  # [n, l, l]
    class_id: int = -1


@dataclass
class TaskDropoutMask:
    """Per-block channel keep masks, sampled once per task."""

    masks: dict  # block index -> float64 array of 0.0/1.0, shape [embed_channels]
    keep: float


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in-scaled normal weights (rectifier gain), zero biases, unit BN."""

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def block(cout, cin):
        return ConvBlock(
            kernel=he((cout, cin, 3, 3), cin * 9),
            bias=np.zeros(cout),
            gamma=np.ones(cout),
            beta=np.zeros(cout),
        )

    n = config.embed_channels
    a = config.attn_channels
    l = config.embed_side
    embed_blocks = [block(n, config.in_channels)] + [block(n, n) for _ in range(3)]
    attn_blocks = [block(a, config.m_max), block(a, a)]
    fc_in = a * l * l
    return ModelParams(
        embed=embed_blocks,
        attn=attn_blocks,
        fc_weight=he((config.m_max, fc_in), fc_in),
        fc_bias=np.zeros(config.m_max),
    )


def watch(params: ModelParams, graph: Graph) -> ModelParams:
    """Wrap every parameter array as a leaf on ``graph`` (shares storage)."""
    return ModelParams(
        embed=[ConvBlock(*(graph.leaf(x) for x in (b.kernel, b.bias, b.gamma, b.beta))) for b in params.embed],
        attn=[ConvBlock(*(graph.leaf(x) for x in (b.kernel, b.bias, b.gamma, b.beta))) for b in params.attn],
        fc_weight=graph.leaf(params.fc_weight),
        fc_bias=graph.leaf(params.fc_bias),
    )


def grads_of(watched: ModelParams) -> dict:
    """Gradient arrays of a watched parameter set, keyed like named_arrays."""
    return {name: leaf.grad for name, leaf in watched.named_arrays()}


def sample_task_mask(
    rng: np.random.Generator, keep: float, channels: int = 64
) -> TaskDropoutMask:
    """Draw one channel keep/drop mask per dropout-enabled block."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep}")
    masks = {
        blk: (rng.random(channels) < keep).astype(np.float64) for blk in DROPOUT_BLOCKS
    }
    return TaskDropoutMask(masks=masks, keep=keep)


def embed_batch(images, params: ModelParams, config: ModelConfig, mask=None) -> Tensor:
    """Run one batch through the four conv blocks; returns [N, n, l, l].

    The whole batch shares BN statistics, so support and query sets must be
    embedded by separate calls.
    """
    x = images
    for i in range(1, N_EMBED_BLOCKS + 1):
        blk = params.embed[i - 1]
        x = conv2d(x, blk.kernel, blk.bias)
        x = batchnorm_batch(x, blk.gamma, blk.beta)
        x = relu(x)
        if mask is not None and i in DROPOUT_BLOCKS:
            x = dropout_apply(x, mask.masks[i], mask.keep)
        if i < N_EMBED_BLOCKS or config.last_pool:
            x = maxpool2(x)
    return x


def embed(images, params: ModelParams, config: ModelConfig, mask=None):
    """Embed a batch and split it into per-example ``Embedding`` values."""
    out = embed_batch(np.asarray(images, dtype=np.float64), params, config, mask)
    return [Embedding(maps=out.data[i], example_id=i) for i in range(out.data.shape[0])]


def _attention_forward(stacks, params: ModelParams, config: ModelConfig, normalize: bool):
    """Weights for a batch of channel stacks: [B, m, l, l] -> [B, m]."""
    m = stacks.shape[1]
    if m > config.m_max:
        raise CapacityError(f"stack of {m} maps exceeds attention capacity {config.m_max}")
    side = stacks.shape[2]
    if side != config.embed_side or stacks.shape[3] != side:
        raise ShapeError(
            f"stack maps are {stacks.shape[2]}x{stacks.shape[3]}, "
            f"model expects {config.embed_side}x{config.embed_side}"
        )
    blk1, blk2 = params.attn
    k1 = blk1.kernel if m == config.m_max else ad.narrow(blk1.kernel, 1, 0, m)
    x = relu(batchnorm_batch(conv2d(stacks, k1, blk1.bias), blk1.gamma, blk1.beta))
    x = relu(batchnorm_batch(conv2d(x, blk2.kernel, blk2.bias), blk2.gamma, blk2.beta))
    x = ad.reshape(x, (stacks.shape[0], config.attn_channels * side * side))
    logits = linear(x, params.fc_weight, params.fc_bias)
    if m < config.m_max:
        logits = ad.narrow(logits, 1, 0, m)
    if normalize:
        return softmax(logits)
    return logits


def attention_weights(
    stack, params: ModelParams, config: ModelConfig, normalize: bool
) -> AggregationWeights:
    """Aggregation weights for one channel stack (or a batch of them).

    A single [m, l, l] stack is treated as one m-channel image, i.e. a
    batch of one; BN statistics then come from that item alone.  Pass a
    [B, m, l, l] batch to reproduce the batching the aggregation ops use
    internally (all channel stacks of one class share BN statistics).
    """
    arr = stack.stack if isinstance(stack, ChannelStack) else stack
    if not isinstance(arr, Tensor):
        arr = Tensor(arr)
    single = len(arr.shape) == 3
    if single:
        arr = ad.reshape(arr, (1,) + tuple(arr.shape))
    w = _attention_forward(arr, params, config, normalize)
    return AggregationWeights(w=w.data[0] if single else w.data, normalized=normalize)


def _aggregate_stack_batch(stacks, params, config, normalize):
    """stacks [n, m, l, l] -> representative maps [n, l, l]."""
    weights = _attention_forward(stacks, params, config, normalize)
    return ad.weighted_sum_maps(stacks, weights)


def _stack_class_maps(embs):
    """[m embeddings] -> [n_channels, m, l, l] with numpy inputs."""
    arr = np.stack([np.asarray(e.maps, dtype=np.float64) for e in embs])  # [m, n, l, l]
    return arr.swapaxes(0, 1)


def aggregate_kshot(class_embs, params: ModelParams, config: ModelConfig) -> ClassRepresentative:
    """Weighted aggregation of the K embeddings of one class.

    Weights are softmax-normalized per channel; the same attention
    parameters serve every channel.
    """
    class_embs = list(class_embs)
    if not class_embs:
        raise CapacityError("cannot aggregate an empty class")
    cid = class_embs[0].class_id
    if any(e.class_id != cid for e in class_embs):
        raise ValueError("aggregate_kshot requires embeddings of a single class")
    stacks = _stack_class_maps(class_embs)
    rep = _aggregate_stack_batch(stacks, params, config, normalize=True)
    return ClassRepresentative(maps=rep.data, class_id=cid)


def aggregate_oneshot(
    all_embs,
    target_class: int,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator,
) -> ClassRepresentative:
    """Aggregate across classes for a 1-shot task.

    The target class's map sits in the first stack position; the other
    C-1 classes follow in one random order shared by all channels.
    Weights stay unnormalized unless the model was configured otherwise.
    """
    all_embs = list(all_embs)
    by_class = {e.class_id: e for e in all_embs}
    if len(by_class) != len(all_embs):
        raise ValueError("aggregate_oneshot requires exactly one embedding per class")
    if target_class not in by_class:
        raise ValueError(f"no embedding for target class {target_class}")
    others = [e for e in all_embs if e.class_id != target_class]
    order = rng.permutation(len(others))
    ordered = [by_class[target_class]] + [others[i] for i in order]
    stacks = _stack_class_maps(ordered)
    rep = _aggregate_stack_batch(stacks, params, config, normalize=config.oneshot_softmax)
    return ClassRepresentative(maps=rep.data, class_id=target_class)


def aggregate_mean(class_embs) -> ClassRepresentative:
    """Plain per-channel mean of a class's embeddings (baseline)."""
    class_embs = list(class_embs)
    if not class_embs:
        raise CapacityError("cannot aggregate an empty class")
    arr = np.stack([np.asarray(e.maps, dtype=np.float64) for e in class_embs])
    return ClassRepresentative(maps=arr.mean(axis=0), class_id=class_embs[0].class_id)


def probabilities_from_distances(distances) -> np.ndarray:
    """Softmax over negative distances along the last axis."""
    d = distances.data if isinstance(distances, Tensor) else np.asarray(distances, dtype=np.float64)
    return softmax(ad.neg(Tensor(d))).data


def classify(query, reps) -> np.ndarray:
    """Class probabilities for one query against C representatives."""
    reps = list(reps)
    if len(reps) < 2:
        raise ValueError("classification needs at least 2 class representatives")
    qmaps = query.maps if isinstance(query, Embedding) else query
    qmaps = np.asarray(qmaps, dtype=np.float64)
    dists = np.array(
        [euclidean_distance(qmaps, np.asarray(r.maps, dtype=np.float64)).item() for r in reps]
    )
    return probabilities_from_distances(dists)


def _episode_representatives(sup_emb, episode, params, config, rng, aggregation):
    """Representative tensors, one per episode class, from support embeddings."""
    ways, shots = episode.ways, episode.shots
    reps = []
    for c in range(ways):
        if aggregation == "mean":
            rows = ad.index_select(sup_emb, episode.support_rows(c))
            reps.append(ad.mean_axis0(rows))
            continue
        if shots == 1:
            others = [k for k in range(ways) if k != c]
            order = rng.permutation(len(others))
            idx = [episode.support_rows(c)[0]] + [episode.support_rows(others[i])[0] for i in order]
            normalize = config.oneshot_softmax
        else:
            idx = episode.support_rows(c)
            normalize = True
        stack = ad.swap_axes(ad.index_select(sup_emb, idx), 0, 1)  # [n, m, l, l]
        reps.append(_aggregate_stack_batch(stack, params, config, normalize))
    return reps


def episode_distances(episode, params, config, mask=None, rng=None, aggregation="attention"):
    """Distance matrix [num_queries, ways] for one episode.

    Support and query batches are embedded separately (each normalizes by
    its own statistics) but under the same task dropout mask.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    sup_emb = embed_batch(episode.support_x, params, config, mask)
    q_emb = embed_batch(episode.query_x, params, config, mask)
    reps = _episode_representatives(sup_emb, episode, params, config, rng, aggregation)
    n, l = config.embed_channels, config.embed_side
    dim = n * l * l
    rep_mat = ad.stack0([ad.reshape(r, (dim,)) for r in reps])
    q_mat = ad.reshape(q_emb, (q_emb.shape[0], dim))
    return ad.pairwise_distance(q_mat, rep_mat)


def episode_loss(
    episode,
    params: ModelParams,
    config: ModelConfig,
    mask: TaskDropoutMask | None = None,
    rng: np.random.Generator | None = None,
    aggregation: str = "attention",
) -> Tensor:
    """Mean negative log-likelihood of the true class over the queries."""
    d = episode_distances(episode, params, config, mask, rng, aggregation)
    logp = log_softmax(ad.neg(d))
    picked = ad.pick(logp, episode.query_y)
    return ad.neg(ad.mean_all(picked))


def predict_episode(episode, params, config, rng=None, aggregation="attention") -> np.ndarray:
    """Predicted class index per query (nearest representative)."""
    d = episode_distances(episode, params, config, None, rng, aggregation)
    return d.data.argmin(axis=1)
