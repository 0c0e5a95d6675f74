"""Model assembly and the optimization loop, plus experiment runners.

A trained model is a parameter dict keyed by purpose:

* ``input/{type}``: per-node-type feature projection (only for types that can
  appear in a view's deepest layer).
* ``rel/{relation}/l{i}``: per-relation propagation weight at layer ``i``,
  shared across every group that uses the relation.
* ``att1/{group}/b{size}``, ``att1/{group}/score``: first fusion stage, one
  projection per batch size plus the per-group score weight.
* ``att2/{group}``, ``att2/score``: second stage, one projection per group and
  a single shared score weight.
* ``mlp/W1``, ``mlp/b1``, ``mlp/W2``, ``mlp/b2``: classification head.

One optimizer step consumes the full view set of an epoch (every group, every
batch size, every batch). Runs are bitwise reproducible for a fixed seed:
sampling, dropout, and initialization all come from named substreams, and the
reverse sweep accumulates in a fixed order.
"""

from __future__ import annotations

import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import assemble_views, encode_view
from .fusion import fuse_views, normalize_scores, raw_attention
from .gradients import DegenerateAttentionError, Node, Tape, backward, finite_diff_check
from .hetgraph import (
    HeterogeneousGraph,
    Relation,
    RelationStep,
    gen_relation_adjacency,
    relation_endpoints,
)
from .objective import LossBreakdown, accuracy, diversity_matrix, mlp_predict, total_loss
from .rng import fold64, substream
from .sampling import BatchView, FanoutConfig, ResolvedRelation, ViewKey, expand_neighborhood, make_plan

GRID_HIDDEN = (32, 64, 128)
GRID_LAYERS = (2, 3)
GRID_DROPOUT = (0.0, 0.1, 0.2)
GRID_FANOUT = (10, 15, 20)

ATTENTION_KINDS = ("minmax", "softmax")
FUSION_KINDS = ("attention", "naive")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending breakdown."""

    def __init__(self, message: str, breakdown: LossBreakdown | None = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    relations: dict[str, list]    # name -> [[edge type, "fwd"|"rev"], ...]
    groups: dict[str, list[str]]  # group name -> relation names
    hidden_dim: int = 32
    attn_dim: int = 16
    num_layers: int = 2
    dropout: float = 0.1
    fanout: int = 10
    batch_sizes: tuple[int, ...] = (64, 128)
    reg_lambda: float = 1e-3
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 300
    patience: int = 30
    seed: int = 0
    attention: str = "minmax"
    regularizer: bool = True
    fusion: str = "attention"
    activation: str = "relu"
    exclude_diag: bool = False
    unsafe_hparams: bool = False
    threads: int = 1

    def validate(self) -> None:
        if not self.relations:
            raise ValueError("config defines no relations")
        if not self.groups:
            raise ValueError("config defines no relation groups")
        for gname, names in self.groups.items():
            if not names:
                raise ValueError(f"relation group {gname!r} is empty")
            for n in names:
                if n not in self.relations:
                    raise ValueError(
                        f"group {gname!r} references undefined relation {n!r}"
                    )
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"attention must be one of {ATTENTION_KINDS}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.hidden_dim < 1 or self.attn_dim < 1:
            raise ValueError("hidden_dim and attn_dim must be positive")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.fanout < 0:
            raise ValueError("fanout must be >= 0 (0 disables the cap)")
        sizes = tuple(int(b) for b in self.batch_sizes)
        if not sizes or any(b < 1 for b in sizes):
            raise ValueError("batch_sizes must be positive")
        if len(set(sizes)) != len(sizes):
            raise ValueError("batch_sizes must be distinct")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.unsafe_hparams:
            checks = (
                ("hidden_dim", self.hidden_dim, GRID_HIDDEN),
                ("num_layers", self.num_layers, GRID_LAYERS),
                ("dropout", self.dropout, GRID_DROPOUT),
                ("fanout", self.fanout, GRID_FANOUT),
            )
            for name, value, allowed in checks:
                if value not in allowed:
                    raise ValueError(
                        f"{name}={value!r} is outside the supported grid "
                        f"{allowed}; set unsafe_hparams to override"
                    )

    def to_dict(self) -> dict:
        return {
            "relations": {k: [list(s) for s in v] for k, v in self.relations.items()},
            "groups": {k: list(v) for k, v in self.groups.items()},
            "hidden_dim": self.hidden_dim,
            "attn_dim": self.attn_dim,
            "num_layers": self.num_layers,
            "dropout": self.dropout,
            "fanout": self.fanout,
            "batch_sizes": list(self.batch_sizes),
            "reg_lambda": self.reg_lambda,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "attention": self.attention,
            "regularizer": self.regularizer,
            "fusion": self.fusion,
            "activation": self.activation,
            "exclude_diag": self.exclude_diag,
            "unsafe_hparams": self.unsafe_hparams,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "relations" not in raw or "groups" not in raw:
            raise ValueError("config must define 'relations' and 'groups'")
        data = dict(raw)
        data["batch_sizes"] = tuple(int(b) for b in data.get("batch_sizes", (64, 128)))
        return cls(**data)


@dataclass
class ResolvedModel:
    graph: HeterogeneousGraph
    config: TrainConfig
    group_names: list[str]
    group_relations: list[list[ResolvedRelation]]
    relation_names: list[str]      # unique, in first-use order; weight keys
    input_types: list[int]         # node types needing an input weight


def resolve_model(graph: HeterogeneousGraph, config: TrainConfig) -> ResolvedModel:
    """Validate the config against the graph and precompute relation adjacencies."""
    config.validate()
    target = graph.target_type
    resolved: dict[str, ResolvedRelation] = {}
    for name, steps in config.relations.items():
        parsed = []
        for s in steps:
            if len(s) != 2 or s[1] not in ("fwd", "rev"):
                raise ValueError(
                    f"relation {name!r}: each step must be [edge type, 'fwd'|'rev'], got {s!r}"
                )
            parsed.append(RelationStep(graph.edge_type_id(s[0]), reverse=s[1] == "rev"))
        rel = Relation(name, tuple(parsed))
        src, dst = relation_endpoints(graph, rel)
        if dst != target:
            raise ValueError(
                f"relation {name!r} ends at node type "
                f"{graph.node_type_names[dst]!r}, not the target type "
                f"{graph.node_type_names[target]!r}"
            )
        if config.num_layers >= 2 and src != target:
            raise ValueError(
                f"relation {name!r} starts at {graph.node_type_names[src]!r}; "
                f"num_layers={config.num_layers} requires target-to-target "
                f"relations"
            )
        resolved[name] = ResolvedRelation(
            name=name, src_type=src, adjacency=gen_relation_adjacency(graph, rel)
        )

    group_names = list(config.groups)
    group_relations = [[resolved[n] for n in config.groups[g]] for g in group_names]

    used: list[str] = []
    for rels in group_relations:
        for rel in rels:
            if rel.name not in used:
                used.append(rel.name)
    if config.num_layers >= 2:
        input_types = [target]
    else:
        input_types = sorted({resolved[n].src_type for n in used})
    return ResolvedModel(
        graph=graph,
        config=config,
        group_names=group_names,
        group_relations=group_relations,
        relation_names=used,
        input_types=input_types,
    )


# ---------------------------------------------------------------------------
# Parameters

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def param_shapes(model: ResolvedModel) -> dict[str, tuple[int, ...]]:
    g = model.graph
    cfg = model.config
    h, a = cfg.hidden_dim, cfg.attn_dim
    m = len(cfg.batch_sizes)
    c = len(model.group_names)
    shapes: dict[str, tuple[int, ...]] = {}
    for t in model.input_types:
        shapes[f"input/{g.node_type_names[t]}"] = (g.features[t].shape[1], h)
    for name in model.relation_names:
        for layer in range(cfg.num_layers):
            shapes[f"rel/{name}/l{layer}"] = (h, h)
    for gname in model.group_names:
        for b in cfg.batch_sizes:
            shapes[f"att1/{gname}/b{b}"] = (h, a)
        shapes[f"att1/{gname}/score"] = (m * a, m)
        shapes[f"att2/{gname}"] = (h, a)
    shapes["att2/score"] = (c * a, c)
    shapes["mlp/W1"] = (h, h)
    shapes["mlp/b1"] = (h,)
    shapes["mlp/W2"] = (h, g.num_classes)
    shapes["mlp/b2"] = (g.num_classes,)
    return shapes


def init_params(model: ResolvedModel) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases; each tensor gets its own substream."""
    seed = model.config.seed
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(model).items():
        if len(shape) == 1:
            out[name] = np.zeros(shape)
            continue
        rng = substream(seed, "init", name)
        out[name] = _xavier(rng, shape[0], shape[1], shape)
    return out


# ---------------------------------------------------------------------------
# Forward composition over one epoch's views

def build_epoch_views(model: ResolvedModel, epoch_seed: int,
                      threads: int = 1) -> dict[tuple[int, int], list[BatchView]]:
    """All views of one epoch, keyed by (group index, batch size).

    Sampling decisions are stateless in their keys, so the thread pool only
    changes wall time, never the views.
    """
    cfg = model.config
    plan = make_plan(model.graph.n_targets, cfg.batch_sizes, epoch_seed)
    fanout = FanoutConfig(max_neighbors=cfg.fanout, num_hops=cfg.num_layers)
    tasks = []
    for gi in range(len(model.group_names)):
        for b in cfg.batch_sizes:
            for k, chunk in enumerate(plan.batches[b]):
                tasks.append((gi, b, k, chunk))

    def build(task):
        gi, b, k, chunk = task
        return expand_neighborhood(
            model.graph, model.group_relations[gi], chunk, fanout,
            ViewKey(group=gi, batch_size=b, batch_index=k), epoch_seed,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build, tasks))
    else:
        built = [build(t) for t in tasks]

    views: dict[tuple[int, int], list[BatchView]] = {}
    for (gi, b, _, _), view in zip(tasks, built):
        views.setdefault((gi, b), []).append(view)
    return views


def forward_pass(tape: Tape, model: ResolvedModel, params: dict[str, Node],
                 views: dict[tuple[int, int], list[BatchView]],
                 epoch_seed: int, dropout: float):
    """Full forward: per-view encoding, two fusion stages, classification.

    Returns (logits, aligned view embeddings in group-major and
    batch-size-minor order, raw/normalized score records per stage).
    """
    cfg = model.config
    n = model.graph.n_targets
    aligned: list[Node] = []
    group_embs: list[Node] = []
    records: dict[str, dict[str, np.ndarray]] = {}

    for gi, gname in enumerate(model.group_names):
        per_bs: list[Node] = []
        for b in cfg.batch_sizes:
            pairs = [
                (view, encode_view(tape, view, model.graph,
                                   model.group_relations[gi], params,
                                   cfg.hidden_dim, dropout, epoch_seed,
                                   cfg.activation))
                for view in views[(gi, b)]
            ]
            per_bs.append(assemble_views(tape, pairs, n))
        aligned.extend(per_bs)
        if cfg.fusion == "naive":
            group_embs.append(fuse_views(tape, None, per_bs))
            continue
        theta = raw_attention(
            tape, per_bs,
            [params[f"att1/{gname}/b{b}"] for b in cfg.batch_sizes],
            params[f"att1/{gname}/score"],
        )
        tnorm = normalize_scores(tape, theta, cfg.attention)
        records[f"stage1/{gname}"] = {"raw": theta.value, "normalized": tnorm.value}
        group_embs.append(fuse_views(tape, tnorm, per_bs))

    if cfg.fusion == "naive":
        fused = fuse_views(tape, None, group_embs)
    else:
        theta2 = raw_attention(
            tape, group_embs,
            [params[f"att2/{g}"] for g in model.group_names],
            params["att2/score"],
        )
        tnorm2 = normalize_scores(tape, theta2, cfg.attention)
        records["stage2"] = {"raw": theta2.value, "normalized": tnorm2.value}
        fused = fuse_views(tape, tnorm2, group_embs)

    logits = mlp_predict(tape, fused, params)
    return logits, aligned, records


def epoch_loss(tape: Tape, model: ResolvedModel, params: dict[str, Node],
               views: dict[tuple[int, int], list[BatchView]],
               epoch_seed: int, dropout: float):
    """Objective over one epoch's views; diversity is always measured, the
    regularizer only contributes when enabled."""
    cfg = model.config
    logits, aligned, records = forward_pass(tape, model, params, views,
                                            epoch_seed, dropout)
    similarity, _ = diversity_matrix(tape, aligned)
    reg = cfg.reg_lambda if cfg.regularizer else 0.0
    loss, breakdown = total_loss(
        tape, logits, model.graph.labels, model.graph.split_ids("train"),
        similarity, reg, cfg.exclude_diag,
    )
    return loss, breakdown, logits, records


def attention_margin(records: dict[str, dict[str, np.ndarray]]) -> float:
    """Smallest gap protecting any score column's extreme indices.

    Per column the relevant gaps are (second smallest - smallest) and
    (largest - second largest): if either closes, the normalizer's extreme
    switches and its derivative jumps.
    """
    margin = np.inf
    for rec in records.values():
        raw = rec["raw"]
        for j in range(raw.shape[1]):
            col = np.sort(raw[:, j])
            if col.shape[0] < 2:
                continue
            margin = min(margin, float(col[1] - col[0]), float(col[-1] - col[-2]))
    return margin


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One update, in place. Weight decay is decoupled: it scales the
    parameter directly instead of entering the moment estimates."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in sorted(params):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay > 0.0:
            update = update + weight_decay * params[name]
        params[name] -= lr * update


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: list[dict]
    best_epoch: int
    best_val_acc: float
    test_acc: float
    epochs_run: int


def model_logits(model: ResolvedModel, params: dict[str, np.ndarray],
                 views: dict[tuple[int, int], list[BatchView]],
                 epoch_seed: int) -> np.ndarray:
    """Inference forward (no dropout, no gradient bookkeeping)."""
    tape = Tape()
    nodes = {k: tape.constant(v, tag=k) for k, v in params.items()}
    logits, _, _ = forward_pass(tape, model, nodes, views, epoch_seed, 0.0)
    return logits.value


def eval_seed_for(config: TrainConfig) -> int:
    return int(fold64(config.seed, "eval"))


def train(model: ResolvedModel,
          params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Optimize until patience epochs pass without a validation improvement.

    Validation uses a fixed held-aside view sample (dropout off) so the
    early-stopping signal is not confounded by per-epoch sampling noise. The
    returned parameters are the snapshot from the best validation epoch
    (earliest epoch wins ties).
    """
    cfg = model.config
    graph = model.graph
    if params is None:
        params = init_params(model)
    state = adam_init(params)
    es_eval = eval_seed_for(cfg)
    eval_views = build_epoch_views(model, es_eval, cfg.threads)
    labels = graph.labels
    val_rows = graph.split_ids("val")
    test_rows = graph.split_ids("test")

    metrics: list[dict] = []
    best_val = -1.0
    best_epoch = -1
    best_test = 0.0
    best_snapshot: dict[str, np.ndarray] | None = None

    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        epochs_run = epoch + 1
        es = int(fold64(cfg.seed, "epoch", epoch))
        views = build_epoch_views(model, es, cfg.threads)
        tape = Tape()
        nodes = {k: tape.leaf(v, tag=k) for k, v in params.items()}
        loss, breakdown, _, _ = epoch_loss(tape, model, nodes, views, es,
                                           cfg.dropout)
        if not np.isfinite(breakdown.total):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}: "
                f"cross_entropy={breakdown.cross_entropy!r} "
                f"diversity={breakdown.diversity!r}",
                breakdown,
            )
        grads = backward(loss, tape, nodes)
        # free this epoch's tape before eval and the next epoch's views;
        # otherwise two epochs of dense intermediates coexist at peak
        del tape, nodes, loss, views
        adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)

        logits = model_logits(model, params, eval_views, es_eval)
        val_acc = accuracy(logits, labels, val_rows)
        test_acc = accuracy(logits, labels, test_rows)
        metrics.append({
            "epoch": epoch,
            "train_loss": breakdown.total,
            "cross_entropy": breakdown.cross_entropy,
            "diversity": breakdown.diversity,
            "val_acc": val_acc,
            "test_acc": test_acc,
        })
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_test = test_acc
            best_snapshot = {k: v.copy() for k, v in params.items()}
        elif epoch - best_epoch >= cfg.patience:
            break

    assert best_snapshot is not None
    return TrainResult(
        params=best_snapshot,
        metrics=metrics,
        best_epoch=best_epoch,
        best_val_acc=best_val,
        test_acc=best_test,
        epochs_run=epochs_run,
    )


def evaluate_model(model: ResolvedModel,
                   params: dict[str, np.ndarray]) -> dict[str, float]:
    """Split accuracies under the model's fixed evaluation views."""
    es_eval = eval_seed_for(model.config)
    views = build_epoch_views(model, es_eval, model.config.threads)
    logits = model_logits(model, params, views, es_eval)
    labels = model.graph.labels
    return {
        split: accuracy(logits, labels, model.graph.split_ids(split))
        for split in ("train", "val", "test")
    }


# ---------------------------------------------------------------------------
# Parameter persistence

_MAGIC = b"LHGE"
_FORMAT_VERSION = 1


def save_params(params: dict[str, np.ndarray], path: str | Path) -> None:
    """Little-endian binary: magic, version, count, then length-prefixed
    named float64 tensors in sorted name order."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _FORMAT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ValueError(f"truncated parameter file {path}: reading {what}")
        out = blob[offset:offset + n]
        offset += n
        return out

    offset = 0
    if take(4, "magic") != _MAGIC:
        raise ValueError(f"{path} is not a parameter file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = take(8 * size, f"tensor {name!r}")
        params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    if offset != len(blob):
        raise ValueError(f"{path} has {len(blob) - offset} trailing bytes")
    return params


# ---------------------------------------------------------------------------
# Run directory output

_METRIC_COLUMNS = ("epoch", "train_loss", "cross_entropy", "diversity",
                   "val_acc", "test_acc")


def write_metrics_csv(metrics: list[dict], path: str | Path) -> None:
    """Floats are written with repr, so equal runs produce equal bytes."""
    lines = [",".join(_METRIC_COLUMNS)]
    for row in metrics:
        cells = []
        for col in _METRIC_COLUMNS:
            v = row[col]
            cells.append(str(v) if isinstance(v, int) else repr(float(v)))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def run_to_dir(graph: HeterogeneousGraph, config: TrainConfig,
               out_dir: str | Path) -> dict:
    """Train once and persist config echo, metrics, best parameters, report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = resolve_model(graph, config)
    result = train(model)

    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    write_metrics_csv(result.metrics, out / "metrics.csv")
    (out / "metrics.json").write_text(
        json.dumps(result.metrics, indent=2) + "\n")
    save_params(result.params, out / "best_model.bin")
    report = {
        "best_epoch": result.best_epoch,
        "best_val_acc": result.best_val_acc,
        "test_acc": result.test_acc,
        "epochs_run": result.epochs_run,
        "n_parameters": int(sum(v.size for v in result.params.values())),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# Ablations and hyperparameter grid

def ablation_modes(config: TrainConfig) -> list[str]:
    modes = ["full", "softmax", "minmax_noreg", "naive_weighting"]
    modes += [f"single_group:{g}" for g in config.groups]
    modes += [f"single_batchsize:{b}" for b in config.batch_sizes]
    return modes


def ablation_config(base: TrainConfig, mode: str) -> TrainConfig:
    """Each mode changes exactly one factor, so differences are attributable."""
    if mode == "full":
        return base
    if mode == "softmax":
        return replace(base, attention="softmax")
    if mode == "minmax_noreg":
        return replace(base, regularizer=False)
    if mode == "naive_weighting":
        return replace(base, fusion="naive")
    if mode.startswith("single_group:"):
        name = mode.split(":", 1)[1]
        if name not in base.groups:
            raise ValueError(f"unknown relation group {name!r}")
        return replace(base, groups={name: list(base.groups[name])})
    if mode.startswith("single_batchsize:"):
        b = int(mode.split(":", 1)[1])
        if b not in base.batch_sizes:
            raise ValueError(f"batch size {b} is not in {base.batch_sizes}")
        return replace(base, batch_sizes=(b,))
    raise ValueError(f"unknown ablation mode {mode!r}")


def run_ablation(graph: HeterogeneousGraph, base: TrainConfig,
                 modes: list[str] | None = None,
                 seeds: tuple[int, ...] = (0, 1, 2)) -> dict:
    """Paired comparison: every mode trains on the same seed list."""
    if modes is None:
        modes = ablation_modes(base)
    per_mode: dict[str, list[dict]] = {m: [] for m in modes}
    for seed in seeds:
        for mode in modes:
            cfg = replace(ablation_config(base, mode), seed=seed)
            result = train(resolve_model(graph, cfg))
            per_mode[mode].append({
                "seed": seed,
                "best_epoch": result.best_epoch,
                "val_acc": result.best_val_acc,
                "test_acc": result.test_acc,
            })
    summary = {
        mode: {
            "mean_val_acc": float(np.mean([r["val_acc"] for r in rows])),
            "mean_test_acc": float(np.mean([r["test_acc"] for r in rows])),
        }
        for mode, rows in per_mode.items()
    }
    return {"seeds": list(seeds), "modes": modes, "runs": per_mode,
            "summary": summary}


def run_grid(graph: HeterogeneousGraph, base: TrainConfig,
             hidden: tuple[int, ...] = GRID_HIDDEN,
             layers: tuple[int, ...] = (2,),
             dropouts: tuple[float, ...] = (0.0, 0.1)) -> dict:
    """Small validation-accuracy sweep; returns every point plus the winner."""
    points = []
    for h in hidden:
        for nl in layers:
            for p in dropouts:
                cfg = replace(base, hidden_dim=h, num_layers=nl, dropout=p)
                result = train(resolve_model(graph, cfg))
                points.append({
                    "hidden_dim": h, "num_layers": nl, "dropout": p,
                    "val_acc": result.best_val_acc,
                    "test_acc": result.test_acc,
                    "best_epoch": result.best_epoch,
                })
    best = max(points, key=lambda r: r["val_acc"])
    return {"points": points, "best": best}


# ---------------------------------------------------------------------------
# Gradient verification harness

def gradcheck_bundle(seed: int = 7):
    """A tiny end-to-end model with frozen views and dropout, sized so a full
    finite-difference sweep stays fast.

    Returns (loss_and_grads, params, meta). ``loss_and_grads(p, need)``
    rebuilds the identical loss (same views, same masks) from parameter dict
    ``p``. Columns whose extreme scores sit closer than the safety margin
    raise DegenerateAttentionError: differencing across an extreme switch
    would be meaningless, so such seeds must be rejected, not averaged over.
    """
    from .synth import SynthConfig, generate

    data_cfg = SynthConfig(
        n_targets=36, num_classes=3, n_aux_b=18, n_aux_c=18,
        signal_b=(0.9, 0.9, 0.05), signal_c=(0.05, 0.9, 0.9),
        feature_noise=1.0, feature_dim=8, edges_per_node=3, seed=seed,
    )
    graph = generate(data_cfg)
    config = TrainConfig(
        relations={
            "via_b": [["ab", "fwd"], ["ab", "rev"]],
            "via_c": [["ac", "fwd"], ["ac", "rev"]],
        },
        groups={"g_b": ["via_b"], "g_c": ["via_c"]},
        hidden_dim=6, attn_dim=4, num_layers=2, dropout=0.1, fanout=3,
        batch_sizes=(16, 36), reg_lambda=1e-2, seed=seed,
        unsafe_hparams=True,
    )
    model = resolve_model(graph, config)
    epoch_seed = int(fold64(seed, "gradcheck"))
    views = build_epoch_views(model, epoch_seed)
    params = init_params(model)

    def loss_and_grads(p: dict[str, np.ndarray], need_grads: bool):
        tape = Tape()
        nodes = {
            k: (tape.leaf(v, tag=k) if need_grads else tape.constant(v, tag=k))
            for k, v in p.items()
        }
        loss, _, _, records = epoch_loss(tape, model, nodes, views, epoch_seed,
                                         config.dropout)
        if need_grads:
            margin = attention_margin(records)
            if margin < 1e-3:
                raise DegenerateAttentionError(
                    f"extreme-score margin {margin:.2e} is too small for "
                    f"finite differencing; rerun with a different seed"
                )
            return float(loss.value), backward(loss, tape, nodes)
        return float(loss.value), None

    meta = {
        "seed": seed,
        "epoch_seed": epoch_seed,
        "n_views": int(sum(len(v) for v in views.values())),
        "n_parameters": int(sum(v.size for v in params.values())),
    }
    return loss_and_grads, params, meta


def run_gradcheck(seed: int = 7, eps: float = 1e-5, tol: float = 1e-4):
    loss_and_grads, params, meta = gradcheck_bundle(seed)
    report = finite_diff_check(loss_and_grads, params, eps=eps, tol=tol)
    return report, meta


# ---------------------------------------------------------------------------
# Epoch timing (for the scaling study)

def timed_epochs(graph: HeterogeneousGraph, config: TrainConfig,
                 n_epochs: int = 3, warmup: int = 1) -> dict:
    """Wall time of full optimizer epochs after a warmup pass."""
    model = resolve_model(graph, config)
    params = init_params(model)
    state = adam_init(params)
    times = []
    for epoch in range(warmup + n_epochs):
        start = time.perf_counter()
        es = int(fold64(config.seed, "epoch", epoch))
        views = build_epoch_views(model, es, config.threads)
        tape = Tape()
        nodes = {k: tape.leaf(v, tag=k) for k, v in params.items()}
        loss, _, _, _ = epoch_loss(tape, model, nodes, views, es, config.dropout)
        grads = backward(loss, tape, nodes)
        del tape, nodes, loss, views
        adam_step(params, grads, state, config.learning_rate,
                  config.weight_decay)
        elapsed = time.perf_counter() - start
        if epoch >= warmup:
            times.append(elapsed)
    return {
        "epoch_seconds": times,
        "mean_seconds": float(np.mean(times)),
        "n_edges": int(sum(e.shape[0] for e in graph.edges)),
        "n_nodes": int(sum(graph.node_counts)),
    }
