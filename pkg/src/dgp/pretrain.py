"""Contrastive pre-training of the encoder.

Two schemes are supported: augmentation-based (two stochastic views of
each graph through one encoder) and perturbation-based (the second view
comes from a noise-perturbed copy of the encoder weights).  Both optimize
the normalized temperature-scaled cross entropy over a batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import GinEncoder, encode_graph
from .graphs import Graph, GraphDataset
from .seeding import derive_rng


@dataclass
class NodeDrop:
    p: float = 0.1


@dataclass
class EdgePerturb:
    p: float = 0.1


@dataclass
class AttrMask:
    p: float = 0.1


@dataclass
class SubgraphSample:
    ratio: float = 0.8


@dataclass
class PretrainConfig:
    method: str = "graphcl"  # "graphcl" | "simgrace"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.01
    tau: float = 0.2
    eta: float = 1.0  # weight-noise scale for simgrace
    aug1: object = field(default_factory=NodeDrop)
    aug2: object = field(default_factory=NodeDrop)
    seed: int = 0
    hidden_dims: tuple = (32, 32, 32)
    proj_hidden: int = 96
    embed_dim: int = 96
    readout_mode: str = "sum"


def _induced_subgraph(g: Graph, keep):
    keep = np.asarray(sorted(keep), dtype=np.intp)
    remap = {int(old): new for new, old in enumerate(keep)}
    kept_edges = [
        (remap[int(s)], remap[int(d)])
        for s, d in g.edges
        if int(s) in remap and int(d) in remap
    ]
    return Graph(
        node_count=len(keep),
        edges=np.asarray(kept_edges, dtype=np.intp).reshape(-1, 2),
        features=g.features[keep].copy(),
    )


def _node_drop(g, p, rng):
    survive = rng.random(g.node_count) >= p
    if not survive.any():
        survive[int(rng.integers(g.node_count))] = True
    return _induced_subgraph(g, np.flatnonzero(survive))


def _edge_perturb(g, p, rng):
    pairs = sorted({(min(int(s), int(d)), max(int(s), int(d))) for s, d in g.edges if s != d})
    pair_set = set(pairs)
    loops = [(int(s), int(d)) for s, d in g.edges if s == d]
    kept, removed = [], 0
    for pair in pairs:
        if rng.random() < p:
            removed += 1
        else:
            kept.append(pair)
    non_edges = [
        (i, j)
        for i in range(g.node_count)
        for j in range(i + 1, g.node_count)
        if (i, j) not in pair_set
    ]
    n_add = min(removed, len(non_edges))
    if n_add:
        for idx in rng.choice(len(non_edges), size=n_add, replace=False):
            kept.append(non_edges[int(idx)])
    edges = []
    for i, j in kept:
        edges.append((i, j))
        edges.append((j, i))
    edges.extend(loops)
    return Graph(g.node_count, np.asarray(edges, dtype=np.intp).reshape(-1, 2), g.features.copy())


def _attr_mask(g, p, rng):
    feats = g.features.copy()
    masked = rng.random(g.node_count) < p
    feats[masked] = 0.0
    return Graph(g.node_count, g.edges.copy(), feats)


def _subgraph_sample(g, ratio, rng):
    target = max(1, int(np.ceil(ratio * g.node_count)))
    neighbors = [[] for _ in range(g.node_count)]
    for s, d in g.edges:
        neighbors[int(s)].append(int(d))
    visited = {int(rng.integers(g.node_count))}
    current = next(iter(visited))
    stall = 0
    while len(visited) < target:
        outs = neighbors[current]
        if outs:
            current = outs[int(rng.integers(len(outs)))]
            if current not in visited:
                visited.add(current)
                stall = 0
                continue
        stall += 1
        if stall > 2 * g.node_count:  # stuck in a sink or small component
            rest = [v for v in range(g.node_count) if v not in visited]
            current = rest[int(rng.integers(len(rest)))]
            visited.add(current)
            stall = 0
    return _induced_subgraph(g, visited)


def augment(g: Graph, kind, rng) -> Graph:
    """One stochastic view of a graph; the result satisfies every graph
    validity invariant (dense indices, in-range edges, feature rows kept
    aligned with surviving nodes)."""
    if isinstance(kind, NodeDrop):
        return _node_drop(g, kind.p, rng)
    if isinstance(kind, EdgePerturb):
        return _edge_perturb(g, kind.p, rng)
    if isinstance(kind, AttrMask):
        return _attr_mask(g, kind.p, rng)
    if isinstance(kind, SubgraphSample):
        return _subgraph_sample(g, kind.ratio, rng)
    raise TypeError(f"unknown augmentation {kind!r}")


def perturb_params(enc: GinEncoder, eta: float, rng) -> GinEncoder:
    """A frozen copy of the encoder with Gaussian noise added per tensor,
    scaled by eta times that tensor's own standard deviation."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    ps = ad.ParamSet()
    for p in enc.params:
        sigma = float(np.std(p.value))
        noise = rng.normal(0.0, eta * sigma, size=p.value.shape) if sigma > 0 else 0.0
        ps.add(p.name, p.value + noise, frozen=True)
    return GinEncoder(
        ps, enc.feature_dim, enc.hidden_dims, enc.proj_hidden, enc.embed_dim,
        readout_mode=enc.readout_mode,
    )


def ntxent_loss(z1, z2, tau=0.2):
    """Contrastive loss over B positive pairs (z1[i], z2[i]).

    Embeddings are L2-normalized internally; each of the 2B anchors
    contrasts its positive against the 2B - 2 other embeddings.
    """
    if len(z1) != len(z2):
        raise ValueError("view lists must have equal length")
    b = len(z1)
    if b < 2:
        raise ValueError("need at least 2 pairs for a contrastive batch")
    normed = []
    for z in list(z1) + list(z2):
        z = z if isinstance(z, ad.Tensor) else ad.constant(z)
        inv_norm = ad.reciprocal(ad.sqrt(ad.sum_all(ad.mul(z, z))))
        normed.append(ad.mul(z, inv_norm))
    zmat = ad.stack_rows(normed)
    sims = ad.mul(ad.matmul(zmat, ad.transpose(zmat)), 1.0 / tau)
    sims = ad.add(sims, ad.constant(np.diag(np.full(2 * b, -1e9))))
    log_probs = ad.log_softmax_rows(sims)
    rows = np.arange(2 * b)
    cols = np.concatenate([rows[b:], rows[:b]])
    picked = ad.take_pairs(log_probs, rows, cols)
    return ad.mul(ad.sum_all(picked), -1.0 / (2 * b))


def _batches(order, size):
    for lo in range(0, len(order), size):
        chunk = order[lo : lo + size]
        if len(chunk) >= 2:
            yield chunk


def pretrain(ds: GraphDataset, cfg: PretrainConfig) -> GinEncoder:
    """Train a fresh encoder on a dataset; emits one 'epoch,loss' CSV line
    per epoch on stdout and returns the encoder tagged with the method and
    hyper-parameters used."""
    if len(ds) < 2:
        raise ValueError("pre-training needs at least 2 graphs")
    if cfg.method not in ("graphcl", "simgrace"):
        raise ValueError(f"unknown pre-training method {cfg.method!r}")
    init_rng = derive_rng(cfg.seed, "pretrain-init")
    aug_rng = derive_rng(cfg.seed, "pretrain-aug")
    shuffle_rng = derive_rng(cfg.seed, "pretrain-shuffle")
    perturb_rng = derive_rng(cfg.seed, "pretrain-perturb")
    enc = GinEncoder.build(
        ds.feature_dim, cfg.hidden_dims, cfg.proj_hidden, cfg.embed_dim,
        readout_mode=cfg.readout_mode, rng=init_rng,
    )
    state = ad.AdamState()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(ds))
        total, batches = 0.0, 0
        for batch in _batches(order, cfg.batch_size):
            graphs = [ds.graphs[i].graph for i in batch]
            if cfg.method == "graphcl":
                v1 = [encode_graph(augment(g, cfg.aug1, aug_rng), None, enc) for g in graphs]
                v2 = [encode_graph(augment(g, cfg.aug2, aug_rng), None, enc) for g in graphs]
            else:
                shaken = perturb_params(enc, cfg.eta, perturb_rng)
                v1 = [encode_graph(g, None, enc) for g in graphs]
                v2 = [encode_graph(g, None, shaken) for g in graphs]
            loss = ntxent_loss(v1, v2, cfg.tau)
            enc.params.zero_grads()
            ad.backward(loss)
            ad.adam_step(enc.params, state, cfg.lr)
            total += loss.item()
            batches += 1
        if batches == 0:
            raise ValueError("batch size and dataset size leave no usable batch")
        print(f"{epoch},{total / batches}")
    enc.pretrain_info = {
        "method": cfg.method,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "tau": cfg.tau,
        "eta": cfg.eta if cfg.method == "simgrace" else None,
        "augmentations": [repr(cfg.aug1), repr(cfg.aug2)] if cfg.method == "graphcl" else None,
        "seed": cfg.seed,
    }
    return enc
