"""Variational prototype math: averaging, latent sampling, distances, losses.

Every image is encoded as a latent Gaussian (mean, log-variance). A class
prototype is the elementwise average of its members' means and log-variances.
Classification samples latents from queries and prototypes by
reparameterization and takes a softmax over (optionally variance-weighted)
L2 distances; replay regresses re-encoded stored exemplars onto prototypes
frozen at earlier tasks.

Noise-draw order is part of the contract so results are reproducible from a
seeded generator: each loss first draws prototype noise of shape (Z, C, D)
with classes in ascending class_id order, then query noise of shape (Q, Z, D)
with queries in the order given.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SamplingConfig:
    Z: int = 50
    tau: float = 1.0
    D: int = 500
    weighted: bool = True

    def __post_init__(self):
        if self.Z < 1:
            raise ValueError(f"sample count Z must be >= 1, got {self.Z}")
        if self.tau <= 0:
            raise ValueError(f"temperature tau must be positive, got {self.tau}")
        if self.D < 1:
            raise ValueError(f"latent dimension D must be >= 1, got {self.D}")


@dataclass
class VariationalEmbedding:
    """Per-image latent Gaussian: mean and log-variance vectors of length D."""
    mean: Tensor
    logvar: Tensor


@dataclass
class VariationalPrototype:
    """Per-(task, class) latent Gaussian obtained by averaging embeddings."""
    task_id: int
    class_id: int
    mean: Tensor
    logvar: Tensor


@dataclass
class LatentSample:
    values: Tensor
    source: tuple = field(default=None)


def _as_tensor(x) -> Tensor:
    if isinstance(x, LatentSample):
        return x.values
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def compute_prototype(embeddings: Sequence[VariationalEmbedding],
                      task_id: int, class_id: int) -> VariationalPrototype:
    """Average member means and log-variances elementwise (differentiable)."""
    if not embeddings:
        raise ValueError("compute_prototype: empty embedding list")
    mean = ad.mean_over_axis(ad.stack([e.mean for e in embeddings]), axis=0)
    logvar = ad.mean_over_axis(ad.stack([e.logvar for e in embeddings]), axis=0)
    return VariationalPrototype(task_id, class_id, mean, logvar)


def sample_latent(e, noise, source: tuple = None) -> LatentSample:
    """Reparameterized draw: mean + exp(0.5 * logvar) * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != e.mean.data.shape:
        raise ad.ShapeError(
            f"sample_latent: noise shape {noise.shape} vs mean shape {e.mean.shape}")
    std = ad.exp(ad.scale(e.logvar, 0.5))
    values = ad.add(e.mean, ad.mul(std, Tensor(noise)))
    return LatentSample(values, source)


def weighted_distance(s1, s2, logvar=None) -> Tensor:
    """L2 norm of exp(-0.5 * logvar) * (s1 - s2); plain L2 when logvar is None/0."""
    a, b = _as_tensor(s1), _as_tensor(s2)
    diff = ad.sub(a, b)
    if logvar is not None:
        w = np.exp(-0.5 * np.asarray(
            logvar.data if isinstance(logvar, Tensor) else logvar, dtype=np.float64))
        diff = ad.mul(diff, Tensor(w))
    return ad.sqrt(ad.tsum(ad.square(diff)))


def class_posterior(query_samples: Sequence[LatentSample],
                    proto_samples: dict,
                    weights: Optional[dict],
                    cfg: SamplingConfig):
    """Distance-softmax posterior for one query embedding's Z samples.

    ``proto_samples`` maps class_id -> list of Z LatentSamples; sample index z
    of the query is paired with sample index z of every class. Returns
    (probs of shape (Z, C), class_ids in ascending order).
    """
    class_ids = sorted(proto_samples)
    Z = len(query_samples)
    dists = np.empty((Z, len(class_ids)))
    for ci, c in enumerate(class_ids):
        samples = proto_samples[c]
        if len(samples) != Z:
            raise ValueError(
                f"class {c} supplied {len(samples)} samples, expected Z={Z}")
        lv = None
        if weights is not None and cfg.weighted and c in weights:
            lv = weights[c]
        for z in range(Z):
            dists[z, ci] = weighted_distance(query_samples[z], samples[z], lv).item()
    logits = -dists / cfg.tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True), class_ids


def _distance_softmax_ce(query_mean: Tensor, query_logvar: Tensor,
                         label_idx: np.ndarray,
                         proto_mean: Tensor, proto_logvar: Tensor,
                         weight_logvar: Optional[np.ndarray],
                         cfg: SamplingConfig, noise_stream) -> Tensor:
    """Shared core: mean over queries and z of -log p(true class | sample).

    query_mean/logvar: (Q, D); proto_mean/logvar: (C, D) in ascending class
    order; weight_logvar: optional constant (C, D) applied per class.
    """
    Q, D = query_mean.shape
    C = proto_mean.shape[0]
    Z = cfg.Z
    pn = noise_stream.standard_normal((Z, C, D))
    qn = noise_stream.standard_normal((Q, Z, D))

    proto_std = ad.exp(ad.scale(proto_logvar, 0.5))
    ps = ad.add(ad.reshape(proto_mean, (1, C, D)),
                ad.mul(ad.reshape(proto_std, (1, C, D)), Tensor(pn)))  # (Z, C, D)
    query_std = ad.exp(ad.scale(query_logvar, 0.5))
    qs = ad.add(ad.reshape(query_mean, (Q, 1, D)),
                ad.mul(ad.reshape(query_std, (Q, 1, D)), Tensor(qn)))  # (Q, Z, D)

    diff = ad.sub(ad.reshape(qs, (Q, Z, 1, D)), ad.reshape(ps, (1, Z, C, D)))
    if weight_logvar is not None:
        diff = ad.mul(diff, Tensor(np.exp(-0.5 * weight_logvar).reshape(1, 1, C, D)))
    dist = ad.sqrt(ad.tsum(ad.square(diff), axis=-1))  # (Q, Z, C)
    logits = ad.scale(dist, -1.0 / cfg.tau)
    lse = ad.logsumexp(logits, axis=-1)                # (Q, Z)
    true = ad.take_class(logits, label_idx)            # (Q, Z)
    return ad.tmean(ad.sub(lse, true))


def _stack_protos(prototypes: Sequence[VariationalPrototype]):
    protos = sorted(prototypes, key=lambda p: p.class_id)
    class_ids = [p.class_id for p in protos]
    if len(set(class_ids)) != len(class_ids):
        raise ValueError(f"duplicate class ids among prototypes: {class_ids}")
    mean = ad.stack([p.mean for p in protos])
    logvar = ad.stack([p.logvar for p in protos])
    return protos, class_ids, mean, logvar


def classification_loss(queries, prototypes: Sequence[VariationalPrototype],
                        cfg: SamplingConfig, noise_stream) -> Tensor:
    """Cross-entropy of the unweighted distance softmax over all C classes.

    ``queries`` is a list of (VariationalEmbedding, class_id) pairs; every
    label must have a prototype.
    """
    _, class_ids, pm, plv = _stack_protos(prototypes)
    index = {c: i for i, c in enumerate(class_ids)}
    for _, label in queries:
        if label not in index:
            raise ValueError(f"query label {label} has no prototype")
    label_idx = np.array([index[label] for _, label in queries])
    qm = ad.stack([e.mean for e, _ in queries])
    qlv = ad.stack([e.logvar for e, _ in queries])
    return _distance_softmax_ce(qm, qlv, label_idx, pm, plv, None, cfg, noise_stream)


def replay_loss(exemplar_embeddings, stored: Sequence[VariationalPrototype],
                cfg: SamplingConfig, noise_stream) -> Tensor:
    """Cross-entropy of the variance-weighted softmax against one past task.

    Stored prototypes act as fixed regression targets: no gradient flows into
    them. Class c's distances are weighted by that prototype's stored
    log-variance when cfg.weighted.
    """
    tasks = {p.task_id for p in stored}
    if len(tasks) != 1:
        raise ValueError(f"stored prototypes span several tasks: {sorted(tasks)}")
    frozen = [VariationalPrototype(p.task_id, p.class_id,
                                   Tensor(p.mean.data.copy()),
                                   Tensor(p.logvar.data.copy())) for p in stored]
    _, class_ids, pm, plv = _stack_protos(frozen)
    index = {c: i for i, c in enumerate(class_ids)}
    for _, label in exemplar_embeddings:
        if label not in index:
            raise ValueError(
                f"exemplar class {label} absent from task-{tasks.pop()} prototypes")
    label_idx = np.array([index[label] for _, label in exemplar_embeddings])
    qm = ad.stack([e.mean for e, _ in exemplar_embeddings])
    qlv = ad.stack([e.logvar for e, _ in exemplar_embeddings])
    wlv = plv.data if cfg.weighted else None
    return _distance_softmax_ce(qm, qlv, label_idx, pm, plv, wlv, cfg, noise_stream)


def mixed_classification_loss(queries,
                              new_prototypes: Sequence[VariationalPrototype],
                              old_prototypes: Sequence[VariationalPrototype],
                              cfg: SamplingConfig, noise_stream) -> Tensor:
    """New-task queries scored against online new prototypes plus stored old
    ones in a single posterior; old-class entries are variance-weighted (when
    cfg.weighted), new-class entries are not. Old prototypes stay constant.
    """
    frozen_old = [VariationalPrototype(p.task_id, p.class_id,
                                       Tensor(p.mean.data.copy()),
                                       Tensor(p.logvar.data.copy()))
                  for p in old_prototypes]
    protos, class_ids, pm, plv = _stack_protos(list(new_prototypes) + frozen_old)
    old_ids = {p.class_id for p in frozen_old}
    index = {c: i for i, c in enumerate(class_ids)}
    for _, label in queries:
        if label not in index:
            raise ValueError(f"query label {label} has no prototype")
    label_idx = np.array([index[label] for _, label in queries])
    qm = ad.stack([e.mean for e, _ in queries])
    qlv = ad.stack([e.logvar for e, _ in queries])
    wlv = None
    if cfg.weighted and old_ids:
        wlv = np.zeros(pm.shape)
        for i, p in enumerate(protos):
            if p.class_id in old_ids:
                wlv[i] = p.logvar.data
    return _distance_softmax_ce(qm, qlv, label_idx, pm, plv, wlv, cfg, noise_stream)


def logvar_match_loss(exemplar_embeddings,
                      stored: Sequence[VariationalPrototype]) -> Tensor:
    """Variance-only recall: squared error between each exemplar's predicted
    log-variance and its class's stored prototype log-variance."""
    by_class = {p.class_id: p for p in stored}
    terms = []
    for emb, label in exemplar_embeddings:
        if label not in by_class:
            raise ValueError(f"exemplar class {label} absent from stored prototypes")
        target = Tensor(by_class[label].logvar.data.copy())
        terms.append(ad.tmean(ad.square(ad.sub(emb.logvar, target))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))
