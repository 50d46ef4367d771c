"""Federated round orchestration for FedTP and the Transformer baselines.

Each round samples a cohort, hands every sampled client its starting
parameters, runs local SGD, then reduces results at a barrier in client-id
order. Strategies differ only in which parameters a client keeps to itself
and where those come from:

=====================  ========================  ==========================
strategy               personalized parameters   source at round start
=====================  ========================  ==========================
fedtp                  attention projections     hypernetwork h(phi; z_i)
vanilla_personalized   attention projections     client-resident cache
fedper_head            classifier head           client-resident cache
local_only             everything                client-resident cache
fedavg / fedprox       nothing                   server
=====================  ========================  ==========================
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import hypernet as hn
from .checkpoint import load_arrays, save_arrays
from .datagen import LabeledDataset
from .models import HEAD_PARAMS, ModelConfig, init_model, loss_fn, param_shapes, predict
from .partition import PartitionManifest

STRATEGIES = ("fedtp", "vanilla_personalized", "fedavg", "fedprox", "local_only", "fedper_head")

# stream tags that keep the derived RNG streams disjoint
_SAMPLER, _ORDER, _FINETUNE = 1, 2, 3


class FederationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StrategySpec:
    name: str = "fedtp"
    mu: float = 0.0
    literal_paper_sign: bool = False
    personalize_out_proj: bool = False
    freeze_embeddings: bool = False
    literal_global_mass: bool = False

    def validate(self) -> "StrategySpec":
        if self.name not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.name!r}")
        if self.mu < 0:
            raise ValueError(f"fedprox mu must be >= 0, got {self.mu}")
        if self.mu and self.name != "fedprox":
            raise ValueError(f"mu is only used by fedprox, got mu={self.mu} for {self.name}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 10
    local_epochs: int = 5
    lr: float = 0.01
    server_lr: float = 0.01
    batch_size: int = 64
    sample_rate: float = 1.0
    seed: int = 0
    workers: int = 1
    embed_dim: int = 32
    hyper_hidden: int = 150
    hyper_layers: int = 4
    eval_every: int = 1
    finetune_lr: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.sample_rate <= 1:
            raise ValueError(f"sample_rate must lie in (0, 1], got {self.sample_rate}")
        if self.lr < 0 or self.server_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self


@dataclass
class ClientState:
    id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    cache: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.train_x)

    @property
    def test_count(self) -> int:
        return int(np.size(self.test_y))


@dataclass
class ServerState:
    round: int
    shared: dict[str, np.ndarray]
    phi: dict[str, np.ndarray] = field(default_factory=dict)
    embeddings: list[np.ndarray] = field(default_factory=list)


@dataclass
class RoundReport:
    round: int
    sampled: list[int]
    train_loss: dict[int, float]
    test_acc: dict[int, float]
    correct: dict[int, int]
    test_count: dict[int, int]
    weighted_acc: float
    shared_update_norm: float
    grad_phi_norm: float
    grad_z_norm: dict[int, float]
    wall_clock: float

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("train_loss", "test_acc", "correct", "test_count", "grad_z_norm"):
            d[k] = {str(i): v for i, v in d[k].items()}
        return d


def make_clients(ds: LabeledDataset, manifest: PartitionManifest) -> list[ClientState]:
    clients = []
    for i in range(manifest.num_clients):
        tr, te = manifest.train[i], manifest.test[i]
        if len(tr) == 0:
            raise FederationError(f"client {i} has an empty training set")
        clients.append(ClientState(i, ds.inputs[tr], ds.targets_for(tr), ds.inputs[te], ds.targets_for(te)))
    return clients


def epoch_order(seed: int, client_id: int, round_: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle for one local epoch; depends only on its coordinates."""
    return np.random.default_rng([seed, _ORDER, client_id, round_, epoch]).permutation(n)


def sample_clients(seed: int, round_: int, num_clients: int, sample_rate: float) -> list[int]:
    """``ceil(rate * N)`` distinct clients, uniformly, sorted by id."""
    k = max(1, math.ceil(sample_rate * num_clients - 1e-12))
    rng = np.random.default_rng([seed, _SAMPLER, round_])
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


def _norm(d: Mapping[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.vdot(v, v)) for v in d.values())))


def local_train(
    client: ClientState,
    theta: Mapping[str, np.ndarray],
    config: ModelConfig,
    epochs: int,
    lr: float,
    batch_size: int,
    strategy: StrategySpec,
    seed: int = 0,
    round_: int = 0,
):
    """K epochs of mini-batch SGD on one client's training split.

    Returns ``(theta_K, delta_w, mean_loss)`` where ``delta_w`` is
    ``W^K - W^0`` over the attention projections. FedProx adds
    ``mu * (theta - theta_0)`` to every gradient, i.e. the gradient of the
    proximal term ``mu/2 ||theta - theta_0||^2``; the reported loss is the
    plain cross-entropy.
    """
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    if client.m == 0:
        raise FederationError(f"client {client.id} has no training data")
    theta0 = dict(theta)
    cur = dict(theta)
    losses = []
    for epoch in range(epochs):
        order = epoch_order(seed, client.id, round_, epoch, client.m)
        for start in range(0, client.m, batch_size):
            idx = order[start:start + batch_size]
            leaves = ad.parameters(cur)
            with ad.Tape() as tape:
                loss = loss_fn(leaves, client.train_x[idx], client.train_y[idx], config)
            grads = tape.backward(loss)
            losses.append(float(loss.data))
            if strategy.name == "fedprox" and strategy.mu:
                grads = {k: g + strategy.mu * (cur[k] - theta0[k]) for k, g in grads.items()}
            if lr > 0:
                cur = ad.sgd_step(cur, grads, lr)
    delta = {k: cur[k] - theta0[k] for k in config.attention_names()}
    return cur, delta, float(np.mean(losses))


def aggregate_shared(
    updates: Sequence[tuple[Mapping[str, np.ndarray], float]], total_mass: float | None = None
) -> dict[str, np.ndarray]:
    """Weighted mean ``sum_i (m_i / M) xi_i``.

    ``M`` defaults to the mass of the given updates; pass ``total_mass`` to
    weight against a larger population instead.
    """
    if not updates:
        raise ValueError("aggregate_shared needs at least one update")
    keys = list(updates[0][0])
    M = float(sum(m for _, m in updates)) if total_mass is None else float(total_mass)
    if M <= 0:
        raise ValueError("total sample mass must be positive")
    out = {}
    for k in keys:
        shape = np.shape(updates[0][0][k])
        acc = None
        for xi, m in updates:
            if k not in xi or np.shape(xi[k]) != shape:
                raise ad.ShapeError(f"aggregate_shared: parameter {k!r} missing or mis-shaped in an update")
            term = (m / M) * np.asarray(xi[k])
            acc = term if acc is None else acc + term
        out[k] = acc
    for xi, _ in updates:
        if set(xi) != set(keys):
            raise KeyError("aggregate_shared: updates carry different parameter sets")
    return out


def count_correct(params: Mapping, x: np.ndarray, y: np.ndarray, config: ModelConfig, chunk: int = 256) -> int:
    correct = 0
    for s in range(0, len(x), chunk):
        correct += int((predict(params, x[s:s + chunk], config) == y[s:s + chunk]).sum())
    return correct


def evaluate(clients: Sequence[ClientState], params_for: Sequence[Mapping], config: ModelConfig):
    """Per-client top-1 accuracy on own test split and the pooled accuracy.

    Returns ``(acc, correct, counts, weighted)`` where ``weighted`` is
    ``sum(correct) / sum(counts)``.
    """
    acc, correct, counts = {}, {}, {}
    for c, p in zip(clients, params_for):
        if c.test_count == 0:
            raise FederationError(f"client {c.id} has an empty test split")
        correct[c.id] = count_correct(p, c.test_x, c.test_y, config)
        counts[c.id] = c.test_count
        acc[c.id] = correct[c.id] / counts[c.id]
    weighted = sum(correct.values()) / sum(counts.values())
    return acc, correct, counts, weighted


class Simulation:
    """Server, clients and configuration for one federated experiment."""

    def __init__(
        self,
        model_config: ModelConfig,
        strategy: StrategySpec,
        train_config: TrainConfig,
        clients: list[ClientState],
    ):
        if strategy.personalize_out_proj != model_config.personalize_out_proj:
            model_config = replace(model_config, personalize_out_proj=strategy.personalize_out_proj)
        self.model_config = model_config.validate()
        self.strategy = strategy.validate()
        self.train_config = train_config.validate()
        self.clients = clients
        self.num_clients = len(clients)
        if not clients:
            raise FederationError("no clients")
        seed = train_config.seed
        part = init_model(self.model_config, seed)
        self.init_params = part.merged()
        self.personal_names = self._personal_names()
        shared = {k: v for k, v in self.init_params.items() if k not in self.personal_names}
        if strategy.name == "local_only":
            shared = dict(part.shared)
        self.hyper_config = None
        phi, emb = {}, []
        if strategy.name == "fedtp":
            self.hyper_config = hn.HyperNetConfig.for_model(
                self.model_config, train_config.embed_dim, train_config.hyper_hidden, train_config.hyper_layers
            )
            phi = hn.init_hypernet(self.hyper_config, seed + 1)
            emb = hn.init_embeddings(self.num_clients, train_config.embed_dim, seed + 2)
        self.server = ServerState(0, shared, phi, emb)
        self.reports: list[RoundReport] = []

    # ------------------------------------------------------------ parameters

    def _personal_names(self) -> set[str]:
        name = self.strategy.name
        if name in ("fedtp", "vanilla_personalized"):
            return set(self.model_config.attention_names())
        if name == "fedper_head":
            return set(HEAD_PARAMS)
        if name == "local_only":
            return set(param_shapes(self.model_config))
        return set()

    def generated_attention(self, client_id: int, z: np.ndarray | None = None) -> dict[str, np.ndarray]:
        z = self.server.embeddings[client_id] if z is None else z
        out = hn.hypernet_forward(self.server.phi, z, self.hyper_config)
        dtype = np.dtype(self.model_config.dtype)
        return {k: v.astype(dtype, copy=False) for k, v in out.items()}

    def client_params(self, client: ClientState) -> dict[str, np.ndarray]:
        """Parameters client ``i`` starts a round with (and is evaluated with)."""
        name = self.strategy.name
        if name == "fedtp":
            return {**self.server.shared, **self.generated_attention(client.id)}
        if name == "local_only":
            return dict(client.cache) if client.cache else dict(self.init_params)
        personal = client.cache or {k: self.init_params[k] for k in self.personal_names}
        return {**self.server.shared, **personal}

    # ------------------------------------------------------------ rounds

    def _train_one(self, client: ClientState, round_: int):
        tc = self.train_config
        theta0 = self.client_params(client)
        return local_train(
            client, theta0, self.model_config, tc.local_epochs, tc.lr, tc.batch_size,
            self.strategy, seed=tc.seed, round_=round_,
        )

    def run_round(self, evaluate_now: bool | None = None) -> RoundReport:
        t0 = time.perf_counter()
        tc = self.train_config
        srv = self.server
        rnd = srv.round + 1
        sampled = sample_clients(tc.seed, rnd, self.num_clients, tc.sample_rate)
        cohort = [self.clients[i] for i in sampled]
        if tc.workers > 1 and len(cohort) > 1:
            with ThreadPoolExecutor(max_workers=tc.workers) as pool:
                results = list(pool.map(lambda c: self._train_one(c, rnd), cohort))
        else:
            results = [self._train_one(c, rnd) for c in cohort]

        # barrier: reductions run in client-id order
        name = self.strategy.name
        mass = float(sum(c.m for c in self.clients)) if self.strategy.literal_global_mass else None
        cohort_mass = mass if mass is not None else float(sum(c.m for c in cohort))
        old_shared = srv.shared
        if name != "local_only" and srv.shared:
            updates = [({k: th[k] for k in srv.shared}, c.m) for c, (th, _, _) in zip(cohort, results)]
            new_shared = aggregate_shared(updates, total_mass=mass)
        else:
            new_shared = srv.shared
        shared_norm = _norm({k: new_shared[k] - old_shared[k] for k in old_shared})

        grad_phi_norm = 0.0
        grad_z_norm: dict[int, float] = {}
        if name == "fedtp":
            grad_phi_total = None
            new_emb = list(srv.embeddings)
            for c, (_, delta, _) in zip(cohort, results):
                w = c.m / cohort_mass
                cot = hn.server_cotangent(delta, self.strategy.literal_paper_sign)
                g_phi, g_z = hn.hypernet_grads(srv.phi, srv.embeddings[c.id], cot, self.hyper_config)
                scaled = {k: w * g for k, g in g_phi.items()}
                grad_phi_total = scaled if grad_phi_total is None else {
                    k: grad_phi_total[k] + scaled[k] for k in scaled
                }
                grad_z_norm[c.id] = float(np.linalg.norm(w * g_z))
                if not self.strategy.freeze_embeddings:
                    _, new_emb[c.id] = hn.apply_server_update({}, srv.embeddings[c.id], {}, w * g_z, tc.server_lr)
            new_phi, _ = hn.apply_server_update(srv.phi, None, grad_phi_total, None, tc.server_lr)
            grad_phi_norm = _norm(grad_phi_total)
            srv.phi = new_phi
            srv.embeddings = new_emb
        elif name in ("vanilla_personalized", "fedper_head"):
            for c, (th, _, _) in zip(cohort, results):
                c.cache = {k: th[k] for k in self.personal_names}
        elif name == "local_only":
            for c, (th, _, _) in zip(cohort, results):
                c.cache = dict(th)
        srv.shared = new_shared
        srv.round = rnd

        if evaluate_now is None:
            evaluate_now = rnd % tc.eval_every == 0 or rnd == tc.rounds
        acc, correct, counts, weighted = {}, {}, {}, float("nan")
        if evaluate_now:
            acc, correct, counts, weighted = self.evaluate()
        report = RoundReport(
            round=rnd,
            sampled=sampled,
            train_loss={c.id: r[2] for c, r in zip(cohort, results)},
            test_acc=acc,
            correct=correct,
            test_count=counts,
            weighted_acc=weighted,
            shared_update_norm=shared_norm,
            grad_phi_norm=grad_phi_norm,
            grad_z_norm=grad_z_norm,
            wall_clock=time.perf_counter() - t0,
        )
        self.reports.append(report)
        return report

    def run(self, rounds: int | None = None, callback=None) -> list[RoundReport]:
        for _ in range(self.train_config.rounds if rounds is None else rounds):
            report = self.run_round()
            if callback is not None:
                callback(self, report)
        return self.reports

    def evaluate(self):
        return evaluate(self.clients, [self.client_params(c) for c in self.clients], self.model_config)

    # ------------------------------------------------------------ novel clients

    def finetune_novel_client(self, novel: ClientState, epochs: int = 1, lr: float | None = None):
        """Adapt only a fresh embedding for an unseen client.

        The embedding starts at the mean of the trained embeddings; phi and
        the shared parameters stay frozen. Returns
        ``(acc_before, acc_after, z)``.
        """
        if self.strategy.name != "fedtp":
            raise FederationError(f"novel-client fine-tuning needs client embeddings; strategy is {self.strategy.name}")
        lr = self.train_config.finetune_lr if lr is None else lr
        cfg, tc = self.model_config, self.train_config
        z = np.mean(np.stack(self.server.embeddings), axis=0)

        def accuracy(z_):
            params = {**self.server.shared, **self.generated_attention(novel.id, z_)}
            return count_correct(params, novel.test_x, novel.test_y, cfg) / novel.test_count

        before = accuracy(z)
        for epoch in range(epochs):
            order = np.random.default_rng([tc.seed, _FINETUNE, novel.id, epoch]).permutation(novel.m)
            for start in range(0, novel.m, tc.batch_size):
                idx = order[start:start + tc.batch_size]
                zt = ad.Tensor(z, requires_grad=True, name="z")
                with ad.Tape() as tape:
                    W = hn.generate(self.server.phi, zt, self.hyper_config)
                    loss = loss_fn({**self.server.shared, **W}, novel.train_x[idx], novel.train_y[idx], cfg)
                g = tape.backward(loss)["z"]
                if not np.all(np.isfinite(g)):
                    raise ad.NonFiniteError("non-finite embedding gradient during fine-tuning")
                z = z - lr * g
        after = before if epochs == 0 else accuracy(z)
        return before, after, z

    # ------------------------------------------------------------ checkpoints

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"shared/{k}": v for k, v in self.server.shared.items()}
        arrays.update({f"phi/{k}": v for k, v in self.server.phi.items()})
        arrays.update({f"embed/{i}": z for i, z in enumerate(self.server.embeddings)})
        for c in self.clients:
            arrays.update({f"cache/{c.id}/{k}": v for k, v in c.cache.items()})
        return arrays

    def save(self, path, config_echo: dict | None = None) -> None:
        meta = {"round": self.server.round, "strategy": asdict(self.strategy), "experiment": config_echo or {}}
        save_arrays(path, self.state_arrays(), meta)

    def load(self, path) -> dict:
        arrays, meta = load_arrays(path)
        srv = self.server
        srv.round = int(meta["round"])
        srv.shared = {k[7:]: v for k, v in arrays.items() if k.startswith("shared/")}
        srv.phi = {k[4:]: v for k, v in arrays.items() if k.startswith("phi/")}
        emb = {int(k[6:]): v for k, v in arrays.items() if k.startswith("embed/")}
        srv.embeddings = [emb[i] for i in sorted(emb)]
        for c in self.clients:
            prefix = f"cache/{c.id}/"
            c.cache = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        return meta
