"""Per-task training loop, SGD, evaluation, and the SGD/L2 baselines.

Task flow at task T: every batch scores new-class queries against online
new-class prototypes (plus stored previous-task prototypes in the
incremental-class setting, variance-weighted), adds one replay term per
previous task over the stored exemplars, and takes one SGD step. At task
end the new-class prototypes are recomputed from the full task data, the
old-class prototypes are recomputed from stored exemplars, and both are
stored under task T; exemplars are then stored and rebalanced to budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import memory as mem
from . import proto
from .analysis import AccuracyMatrix
from .autodiff import Tensor
from .data import Dataset, Image, ProtocolSchedule, task_test_images, task_train_images
from .encoder import (EncoderParams, baseline_head, encode_batch, grow_head,
                      init_encoder)
from .proto import (SamplingConfig, VariationalEmbedding, VariationalPrototype,
                    logvar_match_loss, mixed_classification_loss, replay_loss)

REPLAY_ORDERS = ("forward", "backward", "current_only")
RECALL_MODES = ("mean_and_var", "mean_only", "var_only")


@dataclass
class TrainerConfig:
    sampling: SamplingConfig
    learning_rate: float = 0.05
    epochs_per_task: int = 20
    batch_per_class: int = 10
    support_fraction: float = 0.5
    replay_weight: float = 1.0
    seed: int = 0
    per_class_quota: int = 1
    budget_elements: Optional[int] = None
    unweighted_distance: bool = False
    replay_order: str = "forward"
    recall: str = "mean_and_var"
    old_proto_source: str = "prev_task"   # prev_task | latest_all
    weighted_eval: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError("support_fraction must lie in (0, 1)")
        if self.replay_weight < 0:
            raise ValueError("replay weight must be non-negative")
        if self.replay_order not in REPLAY_ORDERS:
            raise ValueError(f"replay_order must be one of {REPLAY_ORDERS}")
        if self.recall not in RECALL_MODES:
            raise ValueError(f"recall must be one of {RECALL_MODES}")

    def effective_sampling(self) -> SamplingConfig:
        weighted = self.sampling.weighted and not self.unweighted_distance \
            and self.recall != "mean_only"
        return replace(self.sampling, weighted=weighted)


@dataclass
class TrainingState:
    encoder: EncoderParams
    memory: mem.EpisodicMemory
    rng: np.random.Generator
    noise: np.random.Generator
    current_task: int = 0
    classes_seen: Dict[int, int] = field(default_factory=dict)  # class -> intro task


def make_state(encoder: EncoderParams, cfg: TrainerConfig) -> TrainingState:
    return TrainingState(
        encoder=encoder,
        memory=mem.EpisodicMemory(budget_elements=cfg.budget_elements),
        rng=np.random.default_rng([cfg.seed, 1]),
        noise=np.random.default_rng([cfg.seed, 2]),
    )


def split_support_query(class_batch: List[Image], support_fraction: float,
                        rng) -> Tuple[List[Image], List[Image]]:
    """Disjoint covering partition; floor on the support size, at least one
    image on each side."""
    n = len(class_batch)
    if n < 2:
        raise ValueError("need at least 2 images per class to split; "
                         "use stored prototypes for singleton batches")
    n_support = min(max(1, int(n * support_fraction)), n - 1)
    order = rng.permutation(n)
    support = [class_batch[i] for i in order[:n_support]]
    query = [class_batch[i] for i in order[n_support:]]
    return support, query


def sgd_step(params: EncoderParams, learning_rate: float):
    """w <- w - lr * grad on every parameter, then clear gradients."""
    tensors = params.parameters()
    for t in tensors:
        if t.grad is None:
            raise ValueError("sgd_step: parameter has no gradient; run backward first")
    for t in tensors:
        t.data -= learning_rate * t.grad
        t.grad = None


def _row_embeddings(mean: Tensor, logvar: Tensor) -> List[VariationalEmbedding]:
    return [VariationalEmbedding(ad.reshape(ad.narrow(mean, 0, i, 1), (-1,)),
                                 ad.reshape(ad.narrow(logvar, 0, i, 1), (-1,)))
            for i in range(mean.shape[0])]


def _encode_images(params: EncoderParams, images: List[Image]):
    pixels = np.stack([img.pixels for img in images])
    return encode_batch(params, pixels)


def _batch_prototype(params: EncoderParams, images: List[Image],
                     task_id: int, class_id: int) -> VariationalPrototype:
    mean, logvar = _encode_images(params, images)
    return VariationalPrototype(task_id, class_id,
                                ad.mean_over_axis(mean, axis=0),
                                ad.mean_over_axis(logvar, axis=0))


def _detached_prototype(params: EncoderParams, images: List[Image],
                        task_id: int, class_id: int) -> VariationalPrototype:
    p = _batch_prototype(params, images, task_id, class_id)
    return VariationalPrototype(task_id, class_id,
                                Tensor(p.mean.data.copy()),
                                Tensor(p.logvar.data.copy()))


def _replay_task_order(previous_tasks: List[int], order: str) -> List[int]:
    if order == "forward":
        return sorted(previous_tasks)
    if order == "backward":
        return sorted(previous_tasks, reverse=True)
    return [max(previous_tasks)]


def _zeroed_logvars(protos: List[VariationalPrototype]) -> List[VariationalPrototype]:
    return [VariationalPrototype(p.task_id, p.class_id, Tensor(p.mean.data.copy()),
                                 Tensor(np.zeros_like(p.logvar.data)))
            for p in protos]


def train_task(state: TrainingState, task_id: int, task_images: List[Image],
               cfg: TrainerConfig, protocol: str = "incremental_class") -> TrainingState:
    by_class: Dict[int, List[Image]] = {}
    for img in task_images:
        by_class.setdefault(img.label, []).append(img)
    new_classes = sorted(by_class)
    if protocol == "incremental_class":
        repeated = [c for c in new_classes if c in state.classes_seen]
        if repeated:
            raise ValueError(
                f"incremental-class protocol: classes {repeated} repeat at task {task_id}")
    state.current_task = task_id
    scfg = cfg.effective_sampling()
    previous_tasks = sorted({t for (t, _) in state.memory.prototype_history})

    old_protos: List[VariationalPrototype] = []
    if protocol == "incremental_class" and previous_tasks:
        if cfg.old_proto_source == "prev_task":
            cands = state.memory.task_prototypes(task_id - 1)
        else:
            cands = list(state.memory.latest_prototypes().values())
        old_protos = [p for p in cands if p.class_id not in by_class]
        if cfg.recall == "mean_only":
            old_protos = _zeroed_logvars(old_protos)

    for _ in range(cfg.epochs_per_task):
        chunks: Dict[int, List[List[Image]]] = {}
        n_batches = 0
        for c in new_classes:
            imgs = by_class[c]
            order = state.rng.permutation(len(imgs))
            shuffled = [imgs[i] for i in order]
            chunks[c] = [shuffled[i:i + cfg.batch_per_class]
                         for i in range(0, len(shuffled), cfg.batch_per_class)]
            n_batches = max(n_batches, len(chunks[c]))

        for b in range(n_batches):
            new_protos = []
            queries = []
            for c in new_classes:
                if b >= len(chunks[c]) or len(chunks[c][b]) < 2:
                    continue
                support, query = split_support_query(
                    chunks[c][b], cfg.support_fraction, state.rng)
                new_protos.append(_batch_prototype(state.encoder, support, task_id, c))
                qm, qlv = _encode_images(state.encoder, query)
                queries.extend((e, c) for e in _row_embeddings(qm, qlv))
            if not queries:
                continue

            loss = mixed_classification_loss(queries, new_protos, old_protos,
                                             scfg, state.noise)
            if previous_tasks and cfg.replay_weight > 0:
                replay_sum = None
                for t in _replay_task_order(previous_tasks, cfg.replay_order):
                    stored = state.memory.task_prototypes(t)
                    stored_ids = {p.class_id for p in stored}
                    exemplars = []
                    for c in sorted(stored_ids):
                        for img in state.memory.exemplars.get(c, []):
                            # In the permuted-domain setting an exemplar only
                            # matches the prototypes of its own task (its
                            # pixels carry that task's permutation).
                            if protocol == "incremental_domain" and img.task != t:
                                continue
                            exemplars.append(img)
                    if not exemplars:
                        continue
                    em, elv = _encode_images(state.encoder, exemplars)
                    embs = list(zip(_row_embeddings(em, elv),
                                    [img.label for img in exemplars]))
                    if cfg.recall == "var_only":
                        term = logvar_match_loss(embs, stored)
                    else:
                        targets = _zeroed_logvars(stored) if cfg.recall == "mean_only" \
                            else stored
                        term = replay_loss(embs, targets, scfg, state.noise)
                    replay_sum = term if replay_sum is None else ad.add(replay_sum, term)
                if replay_sum is not None:
                    loss = ad.add(loss, ad.scale(replay_sum, cfg.replay_weight))

            for p in state.encoder.parameters():
                p.grad = np.zeros_like(p.data)
            loss.backward()
            sgd_step(state.encoder, cfg.learning_rate)

    # end of task: freeze prototypes and update the episodic memory
    protos = [_detached_prototype(state.encoder, by_class[c], task_id, c)
              for c in new_classes]
    if protocol == "incremental_class" and cfg.replay_weight > 0:
        # Old-class prototypes are refreshed from the replayed exemplars;
        # with replay disabled those images never pass through the network,
        # so the stored prototypes stay at their last coordinates.
        for c in sorted(state.memory.exemplars):
            if c in by_class:
                continue
            protos.append(_detached_prototype(
                state.encoder, state.memory.exemplars[c], task_id, c))
    mem.store_prototypes(state.memory, task_id, protos)
    if protocol == "incremental_domain" and cfg.replay_weight > 0:
        # Refresh each previous task's prototypes from its own replayed
        # exemplars (class ids repeat across tasks here, so the (task, class)
        # entry is replaced in place rather than re-stored under task_id).
        for t in previous_tasks:
            by_tc: Dict[int, List[Image]] = {}
            for c, imgs in state.memory.exemplars.items():
                kept = [img for img in imgs if img.task == t]
                if kept:
                    by_tc[c] = kept
            for c, imgs in sorted(by_tc.items()):
                state.memory.prototype_history[(t, c)] = _detached_prototype(
                    state.encoder, imgs, t, c)

    classes_after = set(state.classes_seen) | set(new_classes)
    if cfg.budget_elements is not None:
        elements = task_images[0].elements
        quota = max(1, cfg.budget_elements // (len(classes_after) * elements))
    else:
        quota = cfg.per_class_quota
    mem.store_exemplars(state.memory, task_id, by_class, quota, state.rng)
    mem.rebalance(state.memory, len(classes_after), state.rng)

    for c in new_classes:
        state.classes_seen.setdefault(c, task_id)
    return state


def evaluate(state: TrainingState, test_images: List[Image],
             cfg: TrainerConfig,
             prototype_scope: str = "latest") -> Tuple[float, Dict[int, float]]:
    """Deterministic nearest-prototype rule on mean vectors; ties go to the
    lowest class id. ``prototype_scope`` selects the candidate set: "latest"
    uses the most recent stored prototype per class; "history" uses every
    stored (task, class) prototype and predicts the class of the nearest one
    (the permuted-domain rule, where each task keeps its own coordinates).
    With ``cfg.weighted_eval`` the old-class distances are weighted by the
    stored log-variance (off by default: the weighting systematically
    shrinks distances for high-variance classes at test time)."""
    if prototype_scope not in ("latest", "history"):
        raise ValueError(f"unknown prototype_scope {prototype_scope!r}")
    if prototype_scope == "latest":
        latest = state.memory.latest_prototypes()
        protos = [latest[c] for c in sorted(latest)]
    else:
        protos = [state.memory.prototype_history[key]
                  for key in sorted(state.memory.prototype_history)]
    classes = sorted({p.class_id for p in protos})
    for img in test_images:
        if img.label not in classes:
            raise ValueError(f"test label {img.label} has no stored prototype")
    scfg = cfg.effective_sampling()
    means = np.stack([p.mean.data for p in protos])
    labels = [p.class_id for p in protos]
    weights = np.ones_like(means)
    if cfg.weighted_eval and scfg.weighted:
        for i, p in enumerate(protos):
            c = p.class_id
            if state.classes_seen.get(c, state.current_task) < state.current_task:
                weights[i] = np.exp(-0.5 * p.logvar.data)

    mean, _ = _encode_images(state.encoder, test_images)
    emb = mean.data
    hits: Dict[int, int] = {c: 0 for c in classes}
    totals: Dict[int, int] = {c: 0 for c in classes}
    correct = 0
    for i, img in enumerate(test_images):
        dists = np.linalg.norm(weights * (emb[i][None, :] - means), axis=1)
        pred = labels[int(np.argmin(dists))]
        totals[img.label] += 1
        if pred == img.label:
            hits[img.label] += 1
            correct += 1
    per_class = {c: hits[c] / totals[c] for c in classes if totals[c]}
    return correct / len(test_images), per_class


def run_continual(dataset: Dataset, schedule: ProtocolSchedule,
                  layers, latent_dim: int, cfg: TrainerConfig
                  ) -> Tuple[AccuracyMatrix, TrainingState]:
    """Train the full task sequence and fill the accuracy matrix."""
    encoder = init_encoder(layers, latent_dim, seed=cfg.seed)
    state = make_state(encoder, cfg)
    matrix = AccuracyMatrix()
    scope = "history" if schedule.kind == "incremental_domain" else "latest"
    for spec in schedule.tasks:
        train_task(state, spec.task_id, task_train_images(dataset, spec), cfg,
                   protocol=schedule.kind)
        row = []
        for past in schedule.tasks[:spec.task_id]:
            acc, _ = evaluate(state, task_test_images(dataset, past), cfg,
                              prototype_scope=scope)
            row.append(acc)
        matrix.add_row(row)
    return matrix, state


# ---------------------------------------------------------------------------
# baselines

def _softmax_ce_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    lse = ad.logsumexp(logits, axis=-1)
    true = ad.take_class(logits, labels)
    return ad.tmean(ad.sub(lse, true))


def _baseline_eval(params: EncoderParams, test_images: List[Image]) -> float:
    from .encoder import forward
    pixels = np.stack([img.pixels for img in test_images])
    logits = forward(params, Tensor(pixels)).data
    preds = logits.argmax(axis=1)
    labels = np.array([img.label for img in test_images])
    return float((preds == labels).mean())


def train_baseline(kind: str, dataset: Dataset, schedule: ProtocolSchedule,
                   encoder_layers, cfg: TrainerConfig,
                   l2_weight: float = 0.0) -> AccuracyMatrix:
    """SGD fine-tuning baselines over the same task stream.

    kind "sgd_naive": plain softmax cross-entropy per task. kind "l2": adds
    l2_weight * ||theta - theta_prev_task||^2 over parameters shared with the
    previous task (the head's newly added class columns are unconstrained).
    """
    if kind not in ("sgd_naive", "l2"):
        raise ValueError(f"unknown baseline {kind!r}")
    rng = np.random.default_rng([cfg.seed, 3])
    if schedule.kind == "incremental_class":
        num_classes = len(schedule.tasks[0].class_ids)
    else:
        num_classes = len(schedule.tasks[0].class_ids)
    layers = baseline_head(encoder_layers, num_classes)
    params = init_encoder(layers, latent_dim=0, seed=cfg.seed)
    prev_snapshot = None
    matrix = AccuracyMatrix()
    from .encoder import forward

    for spec in schedule.tasks:
        if schedule.kind == "incremental_class":
            needed = max(max(spec.class_ids) + 1, num_classes)
            if needed > num_classes:
                num_classes = needed
                params = grow_head(params, num_classes, seed=cfg.seed + spec.task_id)
        images = task_train_images(dataset, spec)
        batch = cfg.batch_per_class * len(spec.class_ids)
        for _ in range(cfg.epochs_per_task):
            order = rng.permutation(len(images))
            for start in range(0, len(images), batch):
                chunk = [images[i] for i in order[start:start + batch]]
                pixels = np.stack([img.pixels for img in chunk])
                labels = np.array([img.label for img in chunk])
                logits = forward(params, Tensor(pixels))
                loss = _softmax_ce_logits(logits, labels)
                if kind == "l2" and prev_snapshot is not None and l2_weight > 0:
                    penalty = None
                    for wb, prev_wb in zip(params.weights, prev_snapshot):
                        if wb is None or prev_wb is None:
                            continue
                        for t, prev in zip(wb, prev_wb):
                            cur = t
                            for axis, (n_now, n_old) in enumerate(
                                    zip(t.data.shape, prev.shape)):
                                if n_now != n_old:
                                    cur = ad.narrow(cur, axis, 0, n_old)
                            term = ad.tsum(ad.square(ad.sub(cur, Tensor(prev))))
                            penalty = term if penalty is None else ad.add(penalty, term)
                    loss = ad.add(loss, ad.scale(penalty, l2_weight))
                for p in params.parameters():
                    p.grad = np.zeros_like(p.data)
                loss.backward()
                sgd_step(params, cfg.learning_rate)
        prev_snapshot = [None if wb is None else tuple(t.data.copy() for t in wb)
                         for wb in params.weights]
        row = [_baseline_eval(params, task_test_images(dataset, past))
               for past in schedule.tasks[:spec.task_id]]
        matrix.add_row(row)
    return matrix
