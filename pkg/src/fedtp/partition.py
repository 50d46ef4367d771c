"""Non-IID client partitioners and reproducible partition manifests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import LabeledDataset

TEST_FRACTION = 0.2
PATHOLOGICAL_MAX_ATTEMPTS = 1000
DIRICHLET_MAX_ATTEMPTS = 1000


class PartitionError(ValueError):
    pass


@dataclass
class PartitionManifest:
    scheme: str
    params: dict
    seed: int
    fingerprint: str
    train: list[np.ndarray]
    test: list[np.ndarray]
    extra: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.train)

    def client_indices(self, i: int) -> np.ndarray:
        return np.concatenate([self.train[i], self.test[i]])

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme,
            "params": self.params,
            "seed": self.seed,
            "dataset_fingerprint": self.fingerprint,
            "clients": [
                {"train": tr.tolist(), "test": te.tolist()} for tr, te in zip(self.train, self.test)
            ],
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PartitionManifest":
        try:
            return cls(
                scheme=doc["scheme"],
                params=dict(doc["params"]),
                seed=int(doc["seed"]),
                fingerprint=doc["dataset_fingerprint"],
                train=[np.asarray(c["train"], dtype=np.int64) for c in doc["clients"]],
                test=[np.asarray(c["test"], dtype=np.int64) for c in doc["clients"]],
                extra=dict(doc.get("extra", {})),
            )
        except (KeyError, TypeError) as err:
            raise PartitionError(f"malformed manifest: {err}") from err

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PartitionManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights``.

    Leftover units go to the largest fractional parts, ties to the lower index.
    """
    weights = np.asarray(weights, dtype=float)
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def stratified_split(indices: np.ndarray, labels: np.ndarray, rng: np.random.Generator, test_fraction: float = TEST_FRACTION):
    """Split one client's indices so every class keeps the same train/test ratio.

    Per class, ``round(test_fraction * n_c)`` samples go to test. A client that
    would end up with no test sample gives one from its largest class.
    """
    indices = np.asarray(indices, dtype=np.int64)
    train, test = [], []
    for c in np.unique(labels[indices]):
        members = indices[labels[indices] == c]
        members = members[rng.permutation(len(members))]
        k = int(math.floor(test_fraction * len(members) + 0.5))
        test.append(members[:k])
        train.append(members[k:])
    train_idx = np.concatenate(train) if train else np.empty(0, np.int64)
    test_idx = np.concatenate(test) if test else np.empty(0, np.int64)
    if len(test_idx) == 0 and len(train_idx) >= 2:
        test_idx, train_idx = train_idx[:1], train_idx[1:]
    return np.sort(train_idx), np.sort(test_idx)


def _finish(scheme, params, seed, ds, assignment, rng, split_labels=None, extra=None) -> PartitionManifest:
    labels = ds.labels if split_labels is None else split_labels
    train, test = [], []
    for idx in assignment:
        tr, te = stratified_split(idx, labels, rng)
        train.append(tr)
        test.append(te)
    return PartitionManifest(scheme, params, seed, ds.fingerprint(), train, test, extra or {})


def _split_class(members: np.ndarray, counts: np.ndarray, holders, assignment) -> None:
    start = 0
    for client, k in zip(holders, counts):
        assignment[client].append(members[start:start + k])
        start += k


def partition_pathological(ds: LabeledDataset, num_clients: int, classes_per_client: int, seed: int) -> PartitionManifest:
    """Each client holds ``classes_per_client`` classes with randomized shares.

    Class assignments are redrawn until every class has a holder. A class's
    samples are split among its holders in proportion to ``a_ic / sum_j a_jc``
    with ``a_ic ~ U(0.4, 0.6)``.
    """
    C = ds.num_classes
    if classes_per_client > C:
        raise PartitionError(f"classes_per_client {classes_per_client} exceeds class count {C}")
    if num_clients * classes_per_client < C:
        raise PartitionError(
            f"infeasible: {num_clients} clients x {classes_per_client} classes cannot cover {C} classes"
        )
    rng = np.random.default_rng(seed)
    for _ in range(PATHOLOGICAL_MAX_ATTEMPTS):
        chosen = [rng.choice(C, classes_per_client, replace=False) for _ in range(num_clients)]
        if len(set(np.concatenate(chosen).tolist())) == C:
            break
    else:
        raise PartitionError(f"no full class coverage after {PATHOLOGICAL_MAX_ATTEMPTS} attempts")
    rates = rng.uniform(0.4, 0.6, (num_clients, C))
    assignment: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(C):
        holders = [i for i in range(num_clients) if c in chosen[i]]
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(len(members))]
        share = rates[holders, c] / rates[holders, c].sum()
        _split_class(members, largest_remainder(len(members), share), holders, assignment)
    flat = [np.concatenate(a) if a else np.empty(0, np.int64) for a in assignment]
    params = {"num_clients": num_clients, "classes_per_client": classes_per_client}
    extra = {"client_classes": [sorted(int(c) for c in ch) for ch in chosen]}
    return _finish("pathological", params, seed, ds, flat, rng, extra=extra)


def partition_dirichlet(
    ds: LabeledDataset, num_clients: int, alpha: float, seed: int, min_samples: int = 2
) -> PartitionManifest:
    """Per class, a ``Dirichlet(alpha * 1_N)`` draw allocates its samples.

    Counts are rounded with largest remainder. The whole allocation is redrawn
    while any client holds fewer than ``min_samples`` samples.
    """
    if alpha <= 0:
        raise PartitionError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for _ in range(DIRICHLET_MAX_ATTEMPTS):
        assignment: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for members in by_class:
            members = members[rng.permutation(len(members))]
            p = rng.dirichlet(np.full(num_clients, alpha))
            _split_class(members, largest_remainder(len(members), p), range(num_clients), assignment)
        flat = [np.concatenate(a) if a else np.empty(0, np.int64) for a in assignment]
        if min(len(f) for f in flat) >= min_samples:
            break
    else:
        raise PartitionError(
            f"a client received fewer than {min_samples} samples in all {DIRICHLET_MAX_ATTEMPTS} draws"
        )
    return _finish("dirichlet", {"num_clients": num_clients, "alpha": alpha}, seed, ds, flat, rng)


def partition_pachinko(
    ds: LabeledDataset, num_clients: int, alpha: float, beta: float, seed: int
) -> PartitionManifest:
    """Two-stage Dirichlet allocation over coarse then fine labels.

    Every client gets a quota of ``floor(n / N)`` samples. For each sample a
    coarse label is drawn from the client's ``Dirichlet(alpha)`` mixture and a
    fine label from that group's ``Dirichlet(beta)`` mixture, both renormalized
    over labels that still have supply.
    """
    if ds.coarse_labels is None:
        raise PartitionError("pachinko partitioning requires coarse labels")
    if alpha <= 0 or beta <= 0:
        raise PartitionError("alpha and beta must be positive")
    rng = np.random.default_rng(seed)
    quota = len(ds) // num_clients
    groups = {
        g: sorted(set(ds.labels[ds.coarse_labels == g].tolist())) for g in range(ds.num_coarse)
    }
    groups = {g: f for g, f in groups.items() if f}
    supply = {}
    for f in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == f)
        supply[f] = list(members[rng.permutation(len(members))])
    coarse_ids = sorted(groups)
    assignment = []
    for i in range(num_clients):
        p_coarse = rng.dirichlet(np.full(len(coarse_ids), alpha))
        p_fine = {g: rng.dirichlet(np.full(len(groups[g]), beta)) for g in coarse_ids}
        taken = []
        for _ in range(quota):
            live_c = np.array([any(supply[f] for f in groups[g]) for g in coarse_ids])
            if not live_c.any():
                raise PartitionError(
                    f"supply exhausted: client {i} got {len(taken)} of {quota} samples"
                )
            pc = p_coarse * live_c
            # a mixture can put all its mass on exhausted groups; fall back to uniform over live ones
            pc = pc / pc.sum() if pc.sum() > 0 else live_c / live_c.sum()
            g = coarse_ids[rng.choice(len(coarse_ids), p=pc)]
            live_f = np.array([bool(supply[f]) for f in groups[g]])
            pf = p_fine[g] * live_f
            pf = pf / pf.sum() if pf.sum() > 0 else live_f / live_f.sum()
            f = groups[g][rng.choice(len(groups[g]), p=pf)]
            taken.append(supply[f].pop())
        assignment.append(np.asarray(taken, dtype=np.int64))
    params = {"num_clients": num_clients, "alpha": alpha, "beta": beta, "quota": quota}
    return _finish("pachinko", params, seed, ds, assignment, rng)


def check_manifest(manifest: PartitionManifest, ds: LabeledDataset, exhaustive: bool | None = None) -> None:
    """Raise :class:`PartitionError` unless the manifest is a valid split of ``ds``.

    Checks pairwise disjointness, exhaustiveness (pathological/Dirichlet) or
    exact quotas (Pachinko), and that per client and class the test count is
    within one sample of the test fraction of that class.
    """
    if manifest.fingerprint != ds.fingerprint():
        raise PartitionError("manifest was built from a different dataset")
    all_idx = np.concatenate([manifest.client_indices(i) for i in range(manifest.num_clients)])
    if len(np.unique(all_idx)) != len(all_idx):
        raise PartitionError("client index sets overlap")
    if all_idx.size and (all_idx.min() < 0 or all_idx.max() >= len(ds)):
        raise PartitionError("index outside the dataset")
    if exhaustive is None:
        exhaustive = manifest.scheme in ("pathological", "dirichlet")
    if exhaustive and len(all_idx) != len(ds):
        raise PartitionError(f"{len(ds) - len(all_idx)} samples unassigned")
    if manifest.scheme == "pachinko":
        quota = manifest.params["quota"]
        sizes = [len(manifest.client_indices(i)) for i in range(manifest.num_clients)]
        if any(s != quota for s in sizes):
            raise PartitionError(f"client sizes {sizes} differ from quota {quota}")
    for i in range(manifest.num_clients):
        tr, te = ds.labels[manifest.train[i]], ds.labels[manifest.test[i]]
        for c in np.union1d(tr, te):
            n_tr, n_te = int((tr == c).sum()), int((te == c).sum())
            if abs(n_te - TEST_FRACTION * (n_tr + n_te)) > 1.0:
                raise PartitionError(f"client {i} class {c}: {n_tr} train vs {n_te} test")


def noise_sigmas(num_clients: int, sigma_max: float) -> np.ndarray:
    """``sigma_i = sigma_max / (N - 1) * i`` for ``i = 0 .. N-1``."""
    if num_clients < 2:
        raise PartitionError("the noise ladder needs at least two clients")
    if sigma_max < 0:
        raise PartitionError("sigma_max must be non-negative")
    return sigma_max / (num_clients - 1) * np.arange(num_clients)


def apply_noise_ladder(
    manifest: PartitionManifest, ds: LabeledDataset, sigma_max: float, seed: int = 0, unit: float = 1.0,
    clip: bool = True,
) -> LabeledDataset:
    """Copy of ``ds`` whose client ``i`` samples carry Gaussian noise of std ``sigma_i * unit``.

    Clients hold disjoint indices, so one perturbed copy serves every client's
    train and test split. ``unit`` rescales the ladder, e.g. ``1/255`` to read
    sigma in 8-bit pixel steps. Values are clipped to [0, 1] unless ``clip``
    is false; unassigned samples are left untouched.
    """
    sigmas = noise_sigmas(manifest.num_clients, sigma_max) * unit
    out = np.array(ds.inputs, dtype=float, copy=True)
    for i, s in enumerate(sigmas):
        if s == 0:
            continue
        idx = manifest.client_indices(i)
        rng = np.random.default_rng([seed, i])
        noisy = out[idx] + rng.normal(0.0, s, out[idx].shape)
        out[idx] = np.clip(noisy, 0.0, 1.0) if clip else noisy
    return LabeledDataset(out, ds.labels, ds.num_classes, ds.coarse_labels, ds.num_coarse, ds.targets)
