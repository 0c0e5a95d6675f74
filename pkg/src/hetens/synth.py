"""Planted synthetic heterogeneous graphs for experiments and acceptance runs.

Three node types: targets "a" and two auxiliary types "b", "c". Each target
draws a fixed number of edges to each auxiliary type; with the per-class
signal probability the endpoint is drawn from same-class auxiliary nodes,
otherwise uniformly. The two relations (a-b-a and a-c-a) therefore carry
class-assortative structure with independently tunable strength per class,
so they hold complementary information: the default leaves one class nearly
unreadable through "b" and a different class nearly unreadable through "c".
Features are class centroids plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hetgraph import EdgeType, HeterogeneousGraph
from .rng import substream


@dataclass
class SynthConfig:
    n_targets: int = 300
    num_classes: int = 3
    n_aux_b: int = 150
    n_aux_c: int = 150
    signal_b: tuple[float, ...] = (0.9, 0.9, 0.05)
    signal_c: tuple[float, ...] = (0.05, 0.9, 0.9)
    feature_noise: float = 2.0
    feature_dim: int = 16
    edges_per_node: int = 6
    train_frac: float = 0.6
    val_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        # configs arrive from JSON as lists; normalize so equality works
        self.signal_b = tuple(float(s) for s in self.signal_b)
        self.signal_c = tuple(float(s) for s in self.signal_c)
        if len(self.signal_b) != self.num_classes or len(self.signal_c) != self.num_classes:
            raise ValueError("signal vectors need one probability per class")
        for s in (*self.signal_b, *self.signal_c):
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"signal strength {s} outside [0, 1]")
        if not 0.0 < self.train_frac + self.val_frac < 1.0:
            raise ValueError("train_frac + val_frac must leave room for a test split")

    def to_dict(self) -> dict:
        return {
            "n_targets": self.n_targets,
            "num_classes": self.num_classes,
            "n_aux_b": self.n_aux_b,
            "n_aux_c": self.n_aux_c,
            "signal_b": list(self.signal_b),
            "signal_c": list(self.signal_c),
            "feature_noise": self.feature_noise,
            "feature_dim": self.feature_dim,
            "edges_per_node": self.edges_per_node,
            "train_frac": self.train_frac,
            "val_frac": self.val_frac,
            "seed": self.seed,
        }


def _balanced_classes(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    base = np.arange(n, dtype=np.int64) % c
    return base[rng.permutation(n)]


def _class_features(classes: np.ndarray, centroids: np.ndarray, noise: float,
                    rng: np.random.Generator) -> np.ndarray:
    out = centroids[classes]
    if noise > 0:
        out = out + noise * rng.normal(size=out.shape)
    return out


def _assortative_edges(target_classes: np.ndarray, aux_classes: np.ndarray,
                       signal: tuple[float, ...], per_node: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Edges (target, aux): same-class endpoint with prob signal[class], else uniform."""
    n_aux = aux_classes.shape[0]
    pools = [np.flatnonzero(aux_classes == k) for k in range(len(signal))]
    rows = []
    for a, k in enumerate(target_classes):
        hit = rng.random(per_node) < signal[k]
        for use_pool in hit:
            pool = pools[k] if use_pool and pools[k].size else None
            b = pool[rng.integers(pool.size)] if pool is not None else rng.integers(n_aux)
            rows.append((a, int(b)))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def generate(cfg: SynthConfig) -> HeterogeneousGraph:
    """Deterministic in cfg.seed: identical configs give identical graphs."""
    rng = substream(cfg.seed, "synth")
    c = cfg.num_classes
    labels = _balanced_classes(cfg.n_targets, c, rng)
    latent_b = _balanced_classes(cfg.n_aux_b, c, rng)
    latent_c = _balanced_classes(cfg.n_aux_c, c, rng)

    cents = rng.normal(size=(3, c, cfg.feature_dim))
    cents = cents / np.linalg.norm(cents, axis=2, keepdims=True)
    feats_a = _class_features(labels, cents[0], cfg.feature_noise, rng)
    feats_b = _class_features(latent_b, cents[1], cfg.feature_noise, rng)
    feats_c = _class_features(latent_c, cents[2], cfg.feature_noise, rng)

    edges_ab = _assortative_edges(labels, latent_b, cfg.signal_b,
                                  cfg.edges_per_node, rng)
    edges_ac = _assortative_edges(labels, latent_c, cfg.signal_c,
                                  cfg.edges_per_node, rng)

    perm = rng.permutation(cfg.n_targets)
    n_train = int(round(cfg.train_frac * cfg.n_targets))
    n_val = int(round(cfg.val_frac * cfg.n_targets))
    splits = np.full(cfg.n_targets, 2, dtype=np.int8)
    splits[perm[:n_train]] = 0
    splits[perm[n_train:n_train + n_val]] = 1

    return HeterogeneousGraph(
        node_type_names=["a", "b", "c"],
        node_counts=[cfg.n_targets, cfg.n_aux_b, cfg.n_aux_c],
        edge_types=[
            EdgeType("ab", 0, 1, undirected=False),
            EdgeType("ac", 0, 2, undirected=False),
        ],
        features=[feats_a, feats_b, feats_c],
        edges=[edges_ab, edges_ac],
        target_type=0,
        num_classes=c,
        labels=labels,
        splits=splits,
    )


def default_train_config(seed: int = 0) -> dict:
    """Ready-to-train config for generated datasets (written next to them)."""
    return {
        "hidden_dim": 32,
        "attn_dim": 16,
        "num_layers": 2,
        "dropout": 0.1,
        "fanout": 10,
        "batch_sizes": [64, 128],
        "relations": {
            "via_b": [["ab", "fwd"], ["ab", "rev"]],
            "via_c": [["ac", "fwd"], ["ac", "rev"]],
        },
        "groups": {
            "g_b": ["via_b"],
            "g_c": ["via_c"],
        },
        "reg_lambda": 1e-3,
        "learning_rate": 1e-3,
        "weight_decay": 5e-4,
        "max_epochs": 300,
        "patience": 30,
        "seed": seed,
    }


def scaled_config(target_edges: int, seed: int = 0) -> SynthConfig:
    """Size a generator config so total edge count is about target_edges."""
    if target_edges < 1000:
        raise ValueError("target_edges too small for a meaningful graph")
    per_target = 2 * 6  # two edge types, edges_per_node each
    n_targets = max(60, int(round(target_edges / per_target)))
    return SynthConfig(
        n_targets=n_targets,
        n_aux_b=max(30, n_targets // 2),
        n_aux_c=max(30, n_targets // 2),
        seed=seed,
    )
