"""Synthetic query-grouped CTR data.

Each query belongs to one user drawn from a latent cluster; the user's click
propensity for an item is ``sigmoid(<pref_c, item> / tau)`` where ``pref_c``
is a random per-cluster preference vector unrelated to the cluster's
centroid. Ranking items inside a query therefore requires recovering the
cluster from the (noisy) user embedding, which is a memorization problem.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..numerics import ContractError


@dataclass
class DataConfig:
    n_queries: int = 10_000
    items_per_query: int = 10
    n_clusters: int = 256
    d_user: int = 16
    d_item: int = 8
    d_cross: int = 8
    user_noise: float = 0.25
    pref_scale: float = 3.0
    tau: float = 1.0
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ContractError("n_clusters must be >= 2")
        if self.n_queries < 1 or self.items_per_query < 1:
            raise ContractError("n_queries and items_per_query must be positive")
        if min(self.d_user, self.d_item) < 1 or self.d_cross < 0:
            raise ContractError("feature dims must be positive (d_cross may be 0)")
        if self.tau < 0 or self.user_noise < 0:
            raise ContractError("tau and user_noise must be non-negative")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ContractError("eval_fraction must be in [0, 1)")

    @property
    def d_in(self) -> int:
        return self.d_user + self.d_item + self.d_cross

    @property
    def n_samples(self) -> int:
        return self.n_queries * self.items_per_query


@dataclass
class SyntheticDataset:
    query_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray
    config: DataConfig

    def __len__(self):
        return self.labels.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def n_clusters(self) -> int:
        return self.config.n_clusters

    @property
    def seed(self) -> int:
        return self.config.seed

    def subset(self, mask) -> "SyntheticDataset":
        return SyntheticDataset(self.query_ids[mask], self.features[mask], self.labels[mask],
                                self.clusters[mask], self.config)

    def split(self):
        """Deterministic ``(train, eval)`` split by query id."""
        n_eval = int(round(self.config.n_queries * self.config.eval_fraction))
        rng = np.random.default_rng([self.config.seed, 1])
        eval_q = rng.permutation(self.config.n_queries)[:n_eval]
        is_eval = np.isin(self.query_ids, eval_q)
        return self.subset(~is_eval), self.subset(is_eval)


def generate_dataset(cfg: DataConfig) -> SyntheticDataset:
    """Draw a dataset; the same config (including seed) always gives identical arrays."""
    rng = np.random.default_rng(cfg.seed)
    centroids = rng.standard_normal((cfg.n_clusters, cfg.d_user))
    prefs = rng.standard_normal((cfg.n_clusters, cfg.d_item)) * (cfg.pref_scale / np.sqrt(cfg.d_item))

    Q, m = cfg.n_queries, cfg.items_per_query
    cluster_q = rng.integers(0, cfg.n_clusters, size=Q)
    users = centroids[cluster_q] + cfg.user_noise * rng.standard_normal((Q, cfg.d_user))
    items = rng.standard_normal((Q, m, cfg.d_item))
    cross = rng.standard_normal((Q, m, cfg.d_cross))
    affinity = np.einsum("qd,qmd->qm", prefs[cluster_q], items)
    u = rng.random((Q, m))
    if cfg.tau == 0:
        p_click = np.where(affinity > 0, 1.0, np.where(affinity < 0, 0.0, 0.5))
    else:
        p_click = 0.5 * (1.0 + np.tanh(0.5 * affinity / cfg.tau))
    labels = (u < p_click).astype(np.int64)

    features = np.concatenate(
        [np.broadcast_to(users[:, None, :], (Q, m, cfg.d_user)), items, cross], axis=2
    ).reshape(Q * m, cfg.d_in)
    query_ids = np.repeat(np.arange(Q), m)
    return SyntheticDataset(query_ids, features, labels.reshape(-1), np.repeat(cluster_q, m), cfg)


def export_dataset(ds: SyntheticDataset, csv_path) -> Path:
    """Write ``query_id,label,f0..f{d-1}`` CSV plus a ``.json`` sidecar with the generator config."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "label"] + [f"f{i}" for i in range(ds.d_in)])
        for qid, y, row in zip(ds.query_ids, ds.labels, ds.features):
            w.writerow([int(qid), int(y)] + [repr(float(v)) for v in row])
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(json.dumps({"seed": ds.config.seed, "generator": asdict(ds.config)}, indent=2))
    return sidecar


def import_dataset(csv_path) -> SyntheticDataset:
    """Read back an exported CSV. Cluster ids are not stored and come back as -1."""
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    cfg = DataConfig(**meta["generator"])
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["query_id", "label"]:
            raise ValueError(f"{csv_path}: unexpected header {header[:2]}")
        rows = [[float(v) for v in r] for r in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return SyntheticDataset(
        query_ids=arr[:, 0].astype(np.int64),
        features=arr[:, 2:],
        labels=arr[:, 1].astype(np.int64),
        clusters=np.full(arr.shape[0], -1, dtype=np.int64),
        config=cfg,
    )
