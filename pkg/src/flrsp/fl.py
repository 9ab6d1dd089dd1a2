"""Federated training with randomly selected shared parameters (FLRSP).

Every client zeroes each scalar of its shared update independently with
probability ``R`` before sending. The server averages each scalar over the
clients that actually sent it (the mask count), not over all ``N``
clients, and leaves a scalar untouched when nobody sent it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import loss_and_grad
from .config import ExperimentConfig
from .data import Dataset, load_dataset, partition
from .metrics import accuracy
from .models import MlpSpec, VitSpec, build_model, predict
from .params import ParamSet
from .privacy import POSITIONAL_EMBEDDING, DpConfig, dp_noise, fixed_position_filter

# stream tags keep mask, noise and batch randomness on separate seed streams
STREAM_MASK = 1
STREAM_NOISE = 2
STREAM_BATCH = 3
STREAM_INIT = 4

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(FloatingPointError):
    def __init__(self, round_index: int, loss: float):
        super().__init__(f"training diverged at round {round_index} (loss={loss})")
        self.round_index = round_index
        self.loss = loss


def stream_rng(root: int, stream: int, *key: int) -> np.random.Generator:
    """Generator for (root seed, stream, key...) -- regeneratable, never stored."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(int(stream), *(int(k) for k in key)))
    return np.random.default_rng(ss)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


@dataclass
class Mask:
    bits: dict[str, np.ndarray]   # bool arrays; False = withheld
    zero_prob: float
    seed: int
    client: int
    round: int

    def __post_init__(self):
        self.bits = {k: np.asarray(v, dtype=bool) for k, v in self.bits.items()}

    @property
    def size(self) -> int:
        return int(sum(b.size for b in self.bits.values()))

    @property
    def zero_fraction(self) -> float:
        zeros = sum(int(b.size - np.count_nonzero(b)) for b in self.bits.values())
        return zeros / self.size if self.size else 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.bits.values()])

    @classmethod
    def full(cls, shapes, client=0, round=0) -> Mask:
        return cls({k: np.ones(s, dtype=bool) for k, s in shapes.items()}, 0.0, 0, client, round)


def sample_mask(R: float, param_shapes, client: int, round: int, seed: int) -> Mask:
    """Draw bits with P(bit = 0) = R, independently per scalar."""
    if not 0.0 <= R <= 1.0:
        raise ValueError(f"zero probability R must lie in [0, 1], got {R}")
    rng = stream_rng(seed, STREAM_MASK, client, round)
    shapes = param_shapes.shapes if isinstance(param_shapes, ParamSet) else param_shapes
    bits = {name: rng.random(size=shape) >= R for name, shape in shapes.items()}
    return Mask(bits, float(R), int(seed), int(client), int(round))


def mask_update(update: ParamSet, mask: Mask) -> ParamSet:
    out = {}
    for name, value in update.items():
        bits = mask.bits.get(name)
        if bits is None or bits.shape != value.shape:
            raise ValueError(f"mask does not cover {name!r} with shape {value.shape}")
        out[name] = np.where(bits, value, 0.0)
    if set(mask.bits) != set(update):
        raise ValueError("mask and update name different tensors")
    return ParamSet(out, copy=False)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass
class ClientUpdate:
    client: int
    payload: ParamSet          # masked gradients (FedSGD) or parameters (FedAvg)
    mask: Mask | None = None   # None: everything was sent
    loss: float = float("nan")

    def bits(self, name: str) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.payload[name].shape, dtype=bool)
        return self.mask.bits[name]


def _masked_sums(updates):
    if not updates:
        raise ValueError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client)
    layout = ordered[0].payload
    sums, counts = {}, {}
    for name in layout:
        s = np.zeros(layout[name].shape)
        c = np.zeros(layout[name].shape, dtype=np.int64)
        for u in ordered:
            layout.check_layout(u.payload)
            s = s + u.payload[name]
            c = c + u.bits(name)
        sums[name], counts[name] = s, c
    return sums, counts


def aggregate_fedsgd(w: ParamSet, updates, lr: float, *, return_counts=False):
    """``w - lr * sum(masked grads) / sum(bits)`` per scalar; stalls where no bits."""
    sums, counts = _masked_sums(updates)
    w.check_layout(ParamSet({k: v for k, v in sums.items()}, copy=False))
    out = {}
    for name, value in w.items():
        c = counts[name]
        sent = c > 0
        step = np.divide(sums[name], c, out=np.zeros_like(value), where=sent)
        out[name] = np.where(sent, value - lr * step, value)
    new = ParamSet(out, copy=False)
    return (new, counts) if return_counts else new


def aggregate_fedavg(updates, prev: ParamSet, *, return_counts=False):
    """Mask-count mean of shared parameters; keeps ``prev`` where nobody sent."""
    sums, counts = _masked_sums(updates)
    out = {}
    for name, value in prev.items():
        c = counts[name]
        sent = c > 0
        mean = np.divide(sums[name], c, out=np.zeros_like(value), where=sent)
        out[name] = np.where(sent, mean, value)
    new = ParamSet(out, copy=False)
    return (new, counts) if return_counts else new


def fedsgd_reference(w: ParamSet, grads, lr: float) -> ParamSet:
    """Plain FedSGD: ``w - lr * mean(grads)`` over all clients, in client order."""
    total = None
    for g in grads:
        total = g.flat() if total is None else total + g.flat()
    return w.with_flat(w.flat() - lr * (total / len(grads)))


# ---------------------------------------------------------------------------
# defenses as client-side stages
# ---------------------------------------------------------------------------


def shield(payload: ParamSet, defense: dict, *, client: int, round: int, root_seed: int,
           model_spec=None) -> tuple[ParamSet, Mask | None]:
    """Apply the configured defense to a client's outgoing payload."""
    kind = defense.get("type", "none")
    if kind == "none":
        return payload, None
    if kind == "flrsp":
        mask = sample_mask(float(defense["R"]), payload, client, round, root_seed)
        return mask_update(payload, mask), mask
    if kind == "dp":
        cfg = DpConfig(float(defense["epsilon"]), float(defense.get("delta", 0.5)),
                       float(defense.get("sensitivity", 0.5)))
        return dp_noise(payload, cfg, rng=stream_rng(root_seed, STREAM_NOISE, client, round)), None
    if kind == "fixed_position":
        return fixed_position_filter(payload, model_spec), None
    raise ValueError(f"unknown defense {kind!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    epoch: int
    client_losses: list[float]
    accuracy: float
    masked_fraction: float

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.client_losses))


@dataclass
class RoundHistory:
    initial: ParamSet
    final: ParamSet | None = None
    records: list[RoundRecord] = field(default_factory=list)
    update_counts: dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: dict[int, ParamSet] = field(default_factory=dict)
    intercepted: ParamSet | None = None
    intercept_round: int | None = None
    rounds_per_epoch: int = 1

    def accuracy_by_epoch(self) -> list[float]:
        """Accuracy after the last round of each epoch."""
        out = {}
        for r in self.records:
            if not math.isnan(r.accuracy):
                out[r.epoch] = r.accuracy
        return [out[e] for e in sorted(out)]

    def count_histogram(self, horizon: int) -> np.ndarray:
        counts = np.concatenate([c.ravel() for c in self.update_counts.values()])
        return np.bincount(counts, minlength=horizon + 1)


class _BatchStream:
    """Endless seeded mini-batches over one client's shard."""

    def __init__(self, indices, batch_size, rng):
        self.indices = np.asarray(indices)
        self.batch_size = batch_size
        self.rng = rng
        self.order = self.rng.permutation(self.indices)
        self.pos = 0

    def next(self):
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(self.indices)
            self.pos = 0
        batch = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return batch

    def epoch(self):
        return [self.order[i : i + self.batch_size] for i in range(0, len(self.order), self.batch_size)]


def model_spec_from_config(config: ExperimentConfig, train: Dataset):
    m = config.model
    shape = train.image_shape
    if m["type"] == "mlp":
        return MlpSpec(int(np.prod(shape)), tuple(m.get("hidden", [32])), train.num_classes,
                       input_bias=m.get("input_bias", True), input_shape=shape)
    return VitSpec(shape, int(m.get("patch_size", 4)), int(m.get("embed_dim", 16)),
                   int(m.get("mlp_dim", 16)), train.num_classes)


def run_training(config: ExperimentConfig, train: Dataset | None = None,
                 test: Dataset | None = None, *, shards=None, keep_snapshots=False,
                 init_params: ParamSet | None = None) -> RoundHistory:
    """Simulate federated training; one aggregation per batch (FedSGD) or epoch (FedAvg)."""
    if train is None or test is None:
        train, test = load_dataset(config.dataset, config.seeds["data"])
    if shards is None:
        shards = partition(train, config.clients, config.partition["scheme"],
                           seed=config.seeds["data"], alpha=config.partition.get("alpha", 0.1))
    if len(shards) != config.clients:
        raise ValueError(f"expected {config.clients} shards, got {len(shards)}")
    root = int(config.seeds["root"])
    spec = model_spec_from_config(config, train)
    graph, w = build_model(spec, seed=int(stream_rng(root, STREAM_INIT).integers(2**31)))
    if init_params is not None:
        w.check_layout(init_params)
        w = init_params.copy()
    graphs = [graph.clone() for _ in range(config.clients)]
    streams = [_BatchStream(s, config.batch_size, stream_rng(root, STREAM_BATCH, n))
               for n, s in enumerate(shards)]
    opts = config.attack_options()
    history = RoundHistory(initial=w.copy())
    history.update_counts = {k: np.zeros(v.shape, dtype=np.int64) for k, v in w.items()}
    if config.aggregation == "fedsgd":
        history.rounds_per_epoch = max(math.ceil(len(s) / config.batch_size) for s in shards)
    intercept = (opts["intercept_epoch"], opts["intercept_round"])

    round_index = 0
    for epoch in range(config.epochs):
        n_rounds = history.rounds_per_epoch if config.aggregation == "fedsgd" else 1
        for r in range(n_rounds):
            if (epoch, r) == intercept:
                history.intercepted = w.copy()
                history.intercept_round = round_index
            updates = []
            for n in range(config.clients):
                if config.aggregation == "fedsgd":
                    idx = streams[n].next()
                    loss, grads = _client_loss_grad(graphs[n], w, train.images[idx],
                                                    train.labels[idx], round_index)
                    payload, mask = shield(grads, config.defense, client=n, round=round_index,
                                           root_seed=root, model_spec=spec)
                else:
                    loss, local = _local_training(graphs[n], w, train, streams[n], config,
                                                  round_index)
                    payload, mask = _shield_parameters(local, w, config, n, round_index, root, spec)
                updates.append(ClientUpdate(n, payload, mask, loss))
            if config.aggregation == "fedsgd":
                w, counts = aggregate_fedsgd(w, updates, config.lr, return_counts=True)
            else:
                w, counts = aggregate_fedavg(updates, w, return_counts=True)
            for name, c in counts.items():
                history.update_counts[name] += c > 0
            masks = [u.mask for u in updates if u.mask is not None]
            masked = float(np.mean([m.zero_fraction for m in masks])) if masks else 0.0
            last_of_epoch = r == n_rounds - 1
            acc = float("nan")
            if last_of_epoch or (config.eval_every and round_index % config.eval_every == 0):
                acc = accuracy(predict(graph, w, test.images), test.labels)
            history.records.append(
                RoundRecord(round_index, epoch, [u.loss for u in updates], acc, masked))
            if keep_snapshots or (config.snapshot_every and round_index % config.snapshot_every == 0):
                history.snapshots[round_index] = w.copy()
            round_index += 1
    history.final = w
    return history


def _client_loss_grad(graph, w, xb, yb, round_index):
    try:
        loss, grads = loss_and_grad(graph, w, xb, yb)
    except FloatingPointError as exc:
        raise TrainingDiverged(round_index, float("nan")) from exc
    if not loss < DIVERGENCE_LIMIT:
        raise TrainingDiverged(round_index, loss)
    if not np.isfinite(grads.flat()).all():
        raise TrainingDiverged(round_index, loss)
    return loss, grads


def _local_training(graph, w, train, stream, config, round_index):
    local = w.copy()
    losses = []
    for _ in range(config.local_epochs):
        for idx in stream.epoch():
            loss, g = _client_loss_grad(graph, local, train.images[idx], train.labels[idx],
                                        round_index)
            local = local.with_flat(local.flat() - config.lr * g.flat())
            losses.append(loss)
        stream.order = stream.rng.permutation(stream.indices)
    return float(np.mean(losses)), local


def _shield_parameters(local: ParamSet, w: ParamSet, config, client, round_index, root, spec):
    """Run the defense on a FedAvg payload.

    FLRSP and DP act on the shared parameters themselves. Under the
    fixed-position filter the client withholds E_pos entirely, so the
    server's zero-count fallback keeps the global value bit-for-bit
    (averaging N identical copies would not be exact).
    """
    kind = config.defense.get("type", "none")
    if kind == "fixed_position":
        delta = local.with_flat(local.flat() - w.flat())
        delta, _ = shield(delta, config.defense, client=client, round=round_index,
                          root_seed=root, model_spec=spec)
        payload = w.with_flat(w.flat() + delta.flat())
        bits = {k: np.ones(v.shape, dtype=bool) for k, v in payload.items()}
        bits[POSITIONAL_EMBEDDING] = np.zeros(payload[POSITIONAL_EMBEDDING].shape, dtype=bool)
        payload[POSITIONAL_EMBEDDING] = np.zeros_like(payload[POSITIONAL_EMBEDDING])
        return payload, Mask(bits, 0.0, root, client, round_index)
    return shield(local, config.defense, client=client, round=round_index, root_seed=root,
                  model_spec=spec)


# ---------------------------------------------------------------------------
# update-ratio analysis
# ---------------------------------------------------------------------------


def effective_lr(lr: float, R: float, N: int) -> float:
    """Expected per-coordinate step scale ``lr * (1 - R**N)``."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    return lr * (1.0 - R**N)


def update_ratio(M: int, N: int, R: float, f: int) -> float:
    """Fraction of scalars updated exactly ``f`` of ``M`` aggregations.

    Binomial in M trials with success probability ``1 - R**N`` (a scalar
    stalls only when all N clients withhold it).
    """
    if not 0 <= f <= M:
        raise ValueError(f"f must lie in [0, {M}]")
    stall = R**N
    return math.comb(M, f) * (1.0 - stall) ** f * stall ** (M - f)


def frozen_weights_ratio(M: int, N: int, R: float, f: int) -> float:
    """Same as :func:`update_ratio` when one fixed mask is shared by all
    clients and epochs: a scalar is updated always or never."""
    if not 0 <= f <= M:
        raise ValueError(f"f must lie in [0, {M}]")
    if M == 0:
        return 1.0
    if f == 0:
        return float(R)
    if f == M:
        return 1.0 - R
    return 0.0


def simulate_update_counts(M: int, N: int, R: float, num_params: int, seed: int = 0,
                           frozen: bool = False) -> np.ndarray:
    """Monte-Carlo update counts per scalar using :func:`sample_mask`."""
    shapes = {"p": (num_params,)}
    counts = np.zeros(num_params, dtype=np.int64)
    for m in range(M):
        sent = np.zeros(num_params, dtype=np.int64)
        for n in range(N):
            if frozen:
                bits = sample_mask(R, shapes, 0, 0, seed).bits["p"]
            else:
                bits = sample_mask(R, shapes, n, m, seed).bits["p"]
            sent += bits
        counts += sent > 0
    return counts
