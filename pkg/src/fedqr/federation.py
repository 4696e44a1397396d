"""Round orchestration for federated low-rank fine-tuning.

Protocol summary per round: sample clients, broadcast the latest global state
(personalized factor slices, plus global controls for the control-variate
variant), run local epochs of mini-batch AdamW, upload adapters, aggregate on
the server per the configured method, and record diagnostics.

Conventions that keep the whole loop coherent:

* The global model is anchored at the shared frozen base: every round it is
  rebuilt as ``base + global_scale * aggregate`` from the clients' current
  adapters, which carry the cumulative update under replace-semantics.
* Broadcast payloads are in true weight units (sample weights and adapter
  scaling folded in during aggregation), so installed adapters use scaling 1.
  The configured LoRA scaling therefore shapes the first round only.
* Both protocol variants run the identical per-batch arithmetic; the plain
  variant simply never updates any control variate away from zero. This makes
  their first rounds bit-identical by construction.
* Per-client RNG streams are derived from (train_seed, client id at init) and
  travel with the client state, so results do not depend on execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapter import BaseWeight, LoraAdapter, effective_weight, factor_gradients
from .aggregation import (
    AggregationResult,
    ClientUpdate,
    baseline_factor_average,
    baseline_full_stack,
    baseline_zero_pad,
    concat_reconstruct,
    apply_global,
    personalize,
    qr_compress,
)
from .data import Dataset, PartitionPlan, dirichlet_partition
from .linalg import thin_qr
from .model import head_accuracy, head_loss_and_grads, model_features
from .optim import (
    AdamWState,
    ControlVariates,
    adamw_step,
    corrected_gradient,
    fresh_adamw_state,
    local_control_update,
    pad_delta,
    server_control_aggregate,
    slice_controls,
    zero_controls,
)

METHODS = ("ilora", "ilora_s", "fedit_avg", "zero_pad", "full_stack")
QR_METHODS = ("ilora", "ilora_s")

BYTES_PER_FLOAT = 8

# stream tags keeping the derived RNGs of one train_seed disjoint
_TAG_THETA0 = 11
_TAG_HIDDEN = 12
_TAG_SAMPLING = 13
_TAG_SHUFFLE = 14


class ConfigError(ValueError):
    """A federation configuration violates one of its invariants."""


class RoundAbortedError(RuntimeError):
    """Training produced a nonfinite loss; carries round and client context."""

    def __init__(self, round_index: int, client_id: int, message: str):
        super().__init__(f"round {round_index}, client {client_id}: {message}")
        self.round_index = round_index
        self.client_id = client_id


@dataclass
class FederationConfig:
    """Experiment parameters for one federation run."""

    n_clients: int = 8
    client_ranks: tuple[int, ...] = (4, 4, 4, 4, 4, 4, 4, 4)
    server_rank: int = 4
    method: str = "ilora"
    participation: float = 1.0
    local_epochs: int = 1
    batch_size: int = 64
    rounds: int = 5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lora_alpha: float = 16.0
    lora_scaling: float | None = None  # None -> lora_alpha / client rank
    global_scale: float = 1.0
    dirichlet_alpha: float = 0.3
    hidden_dim: int | None = None  # None -> plain softmax regression
    data_seed: int = 0
    partition_seed: int = 1
    train_seed: int = 2

    def __post_init__(self):
        self.client_ranks = tuple(int(r) for r in self.client_ranks)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if len(self.client_ranks) != self.n_clients:
            raise ConfigError(
                f"{len(self.client_ranks)} client ranks for {self.n_clients} clients"
            )
        if any(r < 1 for r in self.client_ranks) or self.server_rank < 1:
            raise ConfigError("ranks must be positive")
        if any(r > self.server_rank for r in self.client_ranks):
            raise ConfigError(
                f"client ranks {self.client_ranks} must not exceed server rank {self.server_rank}"
            )
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError(f"participation must be in (0, 1], got {self.participation}")
        if sampled_count(self.n_clients, self.participation) < 1:
            raise ConfigError("participation too small: no client would be sampled")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must be >= 1")
        if self.method == "fedit_avg" and len(set(self.client_ranks)) > 1:
            raise ConfigError("fedit_avg requires homogeneous client ranks")

    def scaling_for(self, rank: int) -> float:
        if self.lora_scaling is not None:
            return self.lora_scaling
        return self.lora_alpha / rank


@dataclass
class ClientState:
    client_id: int
    features: np.ndarray  # shard features, already through the frozen hidden map
    labels: np.ndarray
    base: BaseWeight
    adapter: LoraAdapter
    bias: np.ndarray
    bias_state: AdamWState
    state_a: AdamWState
    state_b: AdamWState
    controls: ControlVariates  # stored at this client's rank
    shuffle_key: tuple[int, int]  # travels with the state, not with the id

    @property
    def rank(self) -> int:
        return self.adapter.rank

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def effective_weight(self) -> np.ndarray:
        return effective_weight(self.base, self.adapter)


@dataclass
class ServerState:
    theta0: np.ndarray
    base_frozen: np.ndarray
    global_model: np.ndarray
    global_bias: np.ndarray
    global_controls: ControlVariates
    last_result: AggregationResult | None = None
    broadcast_factors: tuple[np.ndarray, np.ndarray] | None = None
    heldout: tuple[np.ndarray, np.ndarray] | None = None
    round_index: int = 0


@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    train_accuracy: float
    heldout_accuracy: float
    truncation_error: float
    drift: float
    grad_heterogeneity: float
    bytes_down: int
    bytes_up: int

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "heldout_accuracy": self.heldout_accuracy,
            "truncation_error": self.truncation_error,
            "drift": self.drift,
            "grad_heterogeneity": self.grad_heterogeneity,
            "bytes_down": self.bytes_down,
            "bytes_up": self.bytes_up,
        }


@dataclass
class RoundContext:
    """What the communication model needs to price one round."""

    sampled_ranks: tuple[int, ...]
    d: int
    k: int
    first_round: bool = False


def sampled_count(n_clients: int, participation: float) -> int:
    # guard against 0.7 * 10 = 6.999... style float droop before flooring
    return int(math.floor(participation * n_clients + 1e-9))


def account_communication(config: FederationConfig, ctx: RoundContext) -> tuple[int, int]:
    """Exact analytic byte counts (8-byte floats) for one round.

    Per sampled client of rank r: factor slices cost r*(d+k) floats each way.
    The control-variate variant adds a global control broadcast of r_s*(d+k)
    and a delta upload of r*(d+k). Zero padding ships averages padded to the
    federation's max rank; the full stack ships the whole concatenation to
    every client (priced from the current sample, which matches the simulator
    under full participation). The first round always ships the initial
    per-client slices since no aggregate exists yet. Base weights and the
    tiny bias vector are not part of the adapter-traffic model.
    """
    span = ctx.d + ctx.k
    r_s = config.server_rank
    down = 0
    up = 0
    for r in ctx.sampled_ranks:
        up += r * span
        if config.method == "ilora_s":
            up += r * span  # control delta at the client rank
        if ctx.first_round or config.method in ("ilora", "fedit_avg"):
            down += r * span
        elif config.method == "ilora_s":
            down += r * span
        elif config.method == "zero_pad":
            down += max(config.client_ranks) * span
        elif config.method == "full_stack":
            down += sum(ctx.sampled_ranks) * span
        if config.method == "ilora_s":
            down += r_s * span  # global controls, stored at the server rank
    return down * BYTES_PER_FLOAT, up * BYTES_PER_FLOAT


def _pretrained_weight(d: int, k: int, train_seed: int) -> np.ndarray:
    rng = np.random.default_rng([train_seed, _TAG_THETA0])
    return rng.standard_normal((d, k)) / np.sqrt(d)


def _hidden_weight(d_in: int, hidden_dim: int, train_seed: int) -> np.ndarray:
    rng = np.random.default_rng([train_seed, _TAG_HIDDEN])
    return rng.standard_normal((d_in, hidden_dim)) / np.sqrt(d_in)


def init_federation(
    config: FederationConfig,
    dataset: Dataset,
    plan: PartitionPlan | None = None,
    eval_dataset: Dataset | None = None,
) -> tuple[ServerState, list[ClientState]]:
    """Build server and client states from a (partitioned) dataset.

    The server factorizes the pre-trained weight once and distributes slices;
    under the deterministic QR sign convention this is bit-identical to each
    client factorizing locally. All controls start at zero, optimizer states
    are fresh, and the reconstructed global model equals the pre-trained
    weight up to factorization roundoff.
    """
    if plan is None:
        plan = dirichlet_partition(
            dataset, config.n_clients, config.dirichlet_alpha, config.partition_seed
        )
    if plan.n_clients != config.n_clients:
        raise ConfigError(
            f"partition has {plan.n_clients} clients, config says {config.n_clients}"
        )
    hidden = None
    if config.hidden_dim is not None:
        hidden = _hidden_weight(dataset.features.shape[1], config.hidden_dim, config.train_seed)
    all_features = model_features(dataset.features, hidden)
    d = all_features.shape[1]
    k = dataset.n_classes
    if config.server_rank > min(d, k):
        raise ConfigError(f"server rank {config.server_rank} exceeds min{(d, k)}")

    theta0 = _pretrained_weight(d, k, config.train_seed)
    q0, r0 = thin_qr(theta0)
    top = q0[:, : config.server_rank] @ r0[: config.server_rank, :]
    frozen = theta0 - top
    clients: list[ClientState] = []
    for cid in range(config.n_clients):
        rank = config.client_ranks[cid]
        adapter = LoraAdapter(
            q0[:, :rank].copy(), r0[:rank, :].copy(), rank, config.scaling_for(rank)
        )
        idx = plan.client_indices(cid)
        clients.append(
            ClientState(
                client_id=cid,
                features=all_features[idx],
                labels=dataset.labels[idx],
                base=BaseWeight(frozen=frozen.copy(), origin=theta0.copy()),
                adapter=adapter,
                bias=np.zeros((1, k)),
                bias_state=_fresh_state(config, (1, k)),
                state_a=_fresh_state(config, (rank, k)),
                state_b=_fresh_state(config, (d, rank)),
                controls=zero_controls(d, k, rank),
                shuffle_key=(config.train_seed, cid),
            )
        )

    server = ServerState(
        theta0=theta0,
        base_frozen=frozen.copy(),
        global_model=frozen + top,
        global_bias=np.zeros((1, k)),
        global_controls=zero_controls(d, k, config.server_rank),
    )
    if eval_dataset is not None:
        server.heldout = (model_features(eval_dataset.features, hidden), eval_dataset.labels)
    return server, clients


def _fresh_state(config: FederationConfig, shape: tuple[int, int]) -> AdamWState:
    return fresh_adamw_state(
        shape,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def _broadcast_adapter(server: ServerState, config: FederationConfig, rank: int) -> LoraAdapter:
    """Adapter a client installs at round start (true weight units, scaling 1).

    QR methods slice the latest aggregation result; the full stack method is
    numerically identical because the client's local QR of the shipped stack
    product reproduces the same deterministic factors. Averaging baselines
    install (slices of) the averaged factors.
    """
    if config.method in ("ilora", "ilora_s", "full_stack"):
        assert server.last_result is not None
        return personalize(server.last_result, rank)
    assert server.broadcast_factors is not None
    b_mean, a_mean = server.broadcast_factors
    return LoraAdapter(
        b_mean[:, :rank].copy(), a_mean[:rank, :].copy(), rank, scaling=1.0
    )


def _shard_batches(client: ClientState, config: FederationConfig, round_index: int):
    rng = np.random.default_rng(
        [client.shuffle_key[0], client.shuffle_key[1], _TAG_SHUFFLE, round_index]
    )
    for _ in range(config.local_epochs):
        order = rng.permutation(client.n_samples)
        batches = [
            order[i : i + config.batch_size]
            for i in range(0, client.n_samples, config.batch_size)
        ]
        yield batches


def _train_client(
    client: ClientState,
    server: ServerState,
    config: FederationConfig,
    round_index: int,
) -> ClientUpdate:
    """Local epochs of (optionally drift-corrected) AdamW on one shard."""
    global_ca, global_cb = slice_controls(server.global_controls, client.rank)
    track_controls = config.method == "ilora_s"
    round_delta_a = np.zeros_like(client.controls.c_a)
    round_delta_b = np.zeros_like(client.controls.c_b)

    for batches in _shard_batches(client, config, round_index):
        sum_ga = np.zeros_like(client.controls.c_a)
        sum_gb = np.zeros_like(client.controls.c_b)
        for idx in batches:
            weight = client.effective_weight()
            loss, wgrad, bgrad = head_loss_and_grads(
                weight, client.bias, client.features[idx], client.labels[idx]
            )
            if not np.isfinite(loss):
                raise RoundAbortedError(round_index, client.client_id, f"loss={loss}")
            grad_b, grad_a = factor_gradients(client.adapter, wgrad)
            sum_ga += grad_a
            sum_gb += grad_b
            tilde_a = corrected_gradient(grad_a, global_ca, client.controls.c_a)
            tilde_b = corrected_gradient(grad_b, global_cb, client.controls.c_b)
            new_a, client.state_a = adamw_step(client.adapter.a_factor, tilde_a, client.state_a)
            new_b, client.state_b = adamw_step(client.adapter.b_factor, tilde_b, client.state_b)
            client.adapter = LoraAdapter(new_b, new_a, client.rank, client.adapter.scaling)
            client.bias, client.bias_state = adamw_step(client.bias, bgrad, client.bias_state)
        if track_controls:
            # control refresh per epoch, using the epoch-mean raw gradient
            mean_ga = sum_ga / len(batches)
            mean_gb = sum_gb / len(batches)
            delta_a, client.controls.c_a = local_control_update(mean_ga, client.controls.c_a)
            delta_b, client.controls.c_b = local_control_update(mean_gb, client.controls.c_b)
            round_delta_a += delta_a
            round_delta_b += delta_b

    deltas = (round_delta_a, round_delta_b) if track_controls else None
    return ClientUpdate(
        client_id=client.client_id,
        adapter=client.adapter.copy(),
        sample_count=client.n_samples,
        control_deltas=deltas,
    )


def run_round(
    server: ServerState,
    clients: list[ClientState],
    config: FederationConfig,
    rng: np.random.Generator | None = None,
) -> tuple[ServerState, RoundMetrics]:
    """Execute one communication round; mutates client states in place."""
    t = server.round_index + 1
    if rng is None:
        rng = np.random.default_rng([config.train_seed, _TAG_SAMPLING, t])
    n_sampled = sampled_count(config.n_clients, config.participation)
    if n_sampled >= config.n_clients:
        sampled_ids = list(range(config.n_clients))
    else:
        sampled_ids = sorted(
            int(i) for i in rng.choice(config.n_clients, size=n_sampled, replace=False)
        )
    sampled = [clients[i] for i in sampled_ids]
    first_round = server.round_index == 0
    ctx = RoundContext(
        sampled_ranks=tuple(c.rank for c in sampled),
        d=server.theta0.shape[0],
        k=server.theta0.shape[1],
        first_round=first_round,
    )

    bytes_down = 0
    for client in sampled:
        if first_round:
            # clients already hold the init slices the server distributed
            payload = (client.adapter.b_factor, client.adapter.a_factor)
        else:
            client.adapter = _broadcast_adapter(server, config, client.rank)
            client.bias = server.global_bias.copy()
            if config.method in ("zero_pad", "full_stack"):
                # padded averages / the whole stack ship; clients slice locally
                payload = server.broadcast_factors
            else:
                payload = (client.adapter.b_factor, client.adapter.a_factor)
        bytes_down += sum(p.size for p in payload) * BYTES_PER_FLOAT
        if config.method == "ilora_s":
            bytes_down += (
                server.global_controls.c_a.size + server.global_controls.c_b.size
            ) * BYTES_PER_FLOAT

    grad_het = _gradient_heterogeneity(sampled)

    updates: list[ClientUpdate] = []
    bytes_up = 0
    for client in sampled:
        update = _train_client(client, server, config, t)
        updates.append(update)
        bytes_up += (
            update.adapter.b_factor.size + update.adapter.a_factor.size
        ) * BYTES_PER_FLOAT
        if update.control_deltas is not None:
            bytes_up += sum(d.size for d in update.control_deltas) * BYTES_PER_FLOAT

    truncation_error = _aggregate(server, config, updates)

    weights = np.array([u.sample_count for u in updates], dtype=np.float64)
    weights /= weights.sum()
    server.global_bias = sum(w * c.bias for c, w in zip(sampled, weights))

    drift = float(
        np.mean(
            [
                np.linalg.norm(c.effective_weight() - server.global_model)
                for c in sampled
            ]
        )
    )
    train_loss, train_acc = _global_train_metrics(server, clients)
    if server.heldout is not None:
        heldout_acc = head_accuracy(
            server.global_model, server.global_bias, server.heldout[0], server.heldout[1]
        )
    else:
        heldout_acc = train_acc

    server.round_index = t
    metrics = RoundMetrics(
        round=t,
        train_loss=train_loss,
        train_accuracy=train_acc,
        heldout_accuracy=heldout_acc,
        truncation_error=truncation_error,
        drift=drift,
        grad_heterogeneity=grad_het,
        bytes_down=bytes_down,
        bytes_up=bytes_up,
    )
    return server, metrics


def _gradient_heterogeneity(sampled: list[ClientState]) -> float:
    """Mean distance of per-client full-shard gradients from their weighted mean."""
    grads = []
    counts = []
    for client in sampled:
        _, wgrad, _ = head_loss_and_grads(
            client.effective_weight(), client.bias, client.features, client.labels
        )
        grads.append(wgrad)
        counts.append(client.n_samples)
    weights = np.asarray(counts, dtype=np.float64)
    weights /= weights.sum()
    mean_grad = sum(w * g for w, g in zip(weights, grads))
    return float(np.mean([np.linalg.norm(g - mean_grad) for g in grads]))


def _aggregate(server: ServerState, config: FederationConfig, updates: list[ClientUpdate]) -> float:
    """Server fusion step; returns the truncation error actually incurred."""
    if config.method in QR_METHODS:
        delta = concat_reconstruct(updates)
        result = qr_compress(delta, config.server_rank)
        server.last_result = result
        server.broadcast_factors = None
        server.global_model = apply_global(server.base_frozen, result, config.global_scale)
        if config.method == "ilora_s":
            _fold_control_deltas(server, config, updates)
        return result.truncation_error
    if config.method == "fedit_avg":
        delta = baseline_factor_average(updates)
        server.broadcast_factors = _factor_means(updates)
        server.last_result = None
    elif config.method == "zero_pad":
        # pad to the federation-wide max rank so any later-sampled client fits
        target = max(config.client_ranks)
        delta = baseline_zero_pad(updates, target)
        server.broadcast_factors = _factor_means(updates, pad_to=target)
        server.last_result = None
    elif config.method == "full_stack":
        b_stack, a_stack = baseline_full_stack(updates)
        delta = b_stack @ a_stack
        server.broadcast_factors = (b_stack, a_stack)
        # clients re-derive personalized slices from the stack; the server-side
        # QR below is numerically identical to that client-side computation
        server.last_result = qr_compress(delta, config.server_rank)
    server.global_model = server.base_frozen + config.global_scale * delta
    return 0.0  # baseline global updates are applied without QR truncation


def _factor_means(updates: list[ClientUpdate], pad_to: int | None = None):
    ordered = sorted(updates, key=lambda u: u.client_id)
    counts = np.array([u.sample_count for u in ordered], dtype=np.float64)
    weights = counts / counts.sum()
    d, k = ordered[0].adapter.shape
    rank = pad_to if pad_to is not None else ordered[0].adapter.rank
    b_mean = np.zeros((d, rank))
    a_mean = np.zeros((rank, k))
    for u, w in zip(ordered, weights):
        r = u.adapter.rank
        b_mean[:, :r] += w * u.adapter.b_factor
        a_mean[:r, :] += w * u.adapter.scaling * u.adapter.a_factor
    return b_mean, a_mean


def _fold_control_deltas(server, config, updates):
    padded_a = [pad_delta(u.control_deltas[0], config.server_rank, axis=0) for u in updates]
    padded_b = [pad_delta(u.control_deltas[1], config.server_rank, axis=1) for u in updates]
    server.global_controls = ControlVariates(
        c_a=server_control_aggregate(server.global_controls.c_a, padded_a),
        c_b=server_control_aggregate(server.global_controls.c_b, padded_b),
        r_ref=config.server_rank,
    )


def _global_train_metrics(server: ServerState, clients: list[ClientState]):
    features = np.vstack([c.features for c in clients])
    labels = np.concatenate([c.labels for c in clients])
    loss, _, _ = head_loss_and_grads(server.global_model, server.global_bias, features, labels)
    acc = head_accuracy(server.global_model, server.global_bias, features, labels)
    return loss, acc


def run_federation(
    config: FederationConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
) -> list[RoundMetrics]:
    """Run a full federation; fully deterministic given the config seeds."""
    plan = dirichlet_partition(
        dataset, config.n_clients, config.dirichlet_alpha, config.partition_seed
    )
    server, clients = init_federation(config, dataset, plan, eval_dataset)
    metrics = []
    for _ in range(config.rounds):
        server, round_metrics = run_round(server, clients, config)
        metrics.append(round_metrics)
    return metrics
