"""Prompted out-of-distribution detection on top of a frozen encoder.

Two small MLPs (one class-specific, one class-agnostic) turn each directed
edge's endpoint representations into a weight in (0, 1).  Re-encoding the
graph under those weights gives two prompted embeddings per graph.
Training alternates two phases per mini-batch: a disentangle phase that
fits a throwaway classifier head so branch 1 predicts the label and
branch 2 predicts the uniform distribution, and a distance phase that
tightens each branch's embeddings around its own Mahalanobis statistics.
At test time the classifier head is dropped and a graph scores

    S = md1 + gamma * md2

where md_b is the reciprocal squared Mahalanobis distance of the branch-b
embedding to the training statistics.  High S means in-distribution.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import scoring
from .encoder import (
    CheckpointError,
    GinEncoder,
    encode_graph,
    encode_nodes,
    encoder_hash,
    read_container,
    write_container,
)
from .graphs import Graph, LabeledGraph
from .seeding import derive_int, derive_rng


@dataclass
class EdgeWeights:
    """One weight per directed edge, parallel to the graph's edge list."""

    values: np.ndarray


class PromptGenerator:
    """Edge-weight MLP: concat(endpoint reps) -> hidden -> 1, sigmoid."""

    def __init__(self, params, rep_dim, hidden):
        self.params = params
        self.rep_dim = rep_dim
        self.hidden = hidden

    @classmethod
    def build(cls, rep_dim, hidden=32, rng=None):
        """Final layer starts at weight 0 with bias +2, so a fresh
        generator emits the same weight sigmoid(2) ~ 0.88 on every edge
        and early training perturbs rather than erases the graph."""
        rng = rng or np.random.default_rng(0)
        ps = ad.ParamSet()
        ps.add("w1", ad.glorot_uniform(rng, 2 * rep_dim, hidden))
        ps.add("b1", np.zeros(hidden))
        ps.add("w2", np.zeros((hidden, 1)))
        ps.add("b2", np.full(1, 2.0))
        return cls(ps, rep_dim, hidden)


class Predictor:
    """Throwaway classifier head used only during training."""

    def __init__(self, params, embed_dim, hidden, class_count):
        self.params = params
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.class_count = class_count

    @classmethod
    def build(cls, embed_dim, hidden, class_count, rng=None):
        rng = rng or np.random.default_rng(0)
        ps = ad.ParamSet()
        ps.add("w1", ad.glorot_uniform(rng, embed_dim, hidden))
        ps.add("b1", np.zeros(hidden))
        ps.add("w2", ad.glorot_uniform(rng, hidden, class_count))
        ps.add("b2", np.zeros(class_count))
        return cls(ps, embed_dim, hidden, class_count)


@dataclass
class DgpConfig:
    lam: float = 1.0  # weight of the class-agnostic term in phase 1
    gamma: float = 1.0  # weight of branch 2 in the final score
    alpha1: float = 100.0
    alpha2: float = 100.0
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    q: int = 1  # Mahalanobis cluster count
    eps_reg: float = 1e-3
    eps_d: float = 1e-12
    gen_hidden: int = 32
    pred_hidden: int = 32
    class_count: int | None = None  # inferred from labels when None
    distance_stats: str = "prompted"  # or "unprompted"
    use_cs: bool = True  # class-specific branch (branch 1)
    use_ca: bool = True  # class-agnostic branch (branch 2)
    use_distance: bool = True  # phase-2 distance loss
    early_stop_patience: int | None = None


@dataclass
class DgpModel:
    encoder: GinEncoder
    gen1: PromptGenerator
    gen2: PromptGenerator
    predictor: Predictor
    stats1: scoring.MahalanobisScorer | None
    stats2: scoring.MahalanobisScorer | None
    gamma: float
    encoder_ref: str  # hash of the frozen encoder checkpoint
    config: DgpConfig = field(default_factory=DgpConfig)


# -- forward pieces ---------------------------------------------------------


def base_node_reps(g: Graph, enc: GinEncoder) -> np.ndarray:
    """Unit-weight concatenated node representations, detached."""
    with ad.no_grad():
        return encode_nodes(g, None, enc).concat.data


def _edge_weight_tensor(g: Graph, gen: PromptGenerator, base: np.ndarray):
    if g.edge_count == 0:
        return ad.constant(np.zeros(0))
    src = g.edges[:, 0]
    dst = g.edges[:, 1]
    inp = ad.constant(np.concatenate([base[src], base[dst]], axis=1))
    ps = gen.params
    h = ad.relu(ad.add(ad.matmul(inp, ps.tensor("w1")), ps.tensor("b1")))
    out = ad.add(ad.matmul(h, ps.tensor("w2")), ps.tensor("b2"))
    return ad.reshape(ad.sigmoid(out), (g.edge_count,))


def gen_edge_weights(g: Graph, gen: PromptGenerator, enc: GinEncoder) -> EdgeWeights:
    """Weights for every directed edge of g, detached from the graph tape.

    The endpoint representations come from the unweighted encoder and are
    treated as constants, so gradients (when taken through the tensor
    variant used in training) reach only the generator.
    """
    with ad.no_grad():
        base = base_node_reps(g, enc)
        t = _edge_weight_tensor(g, gen, base)
    return EdgeWeights(values=t.data.copy())


def _embed(g, gen, enc, base):
    return encode_graph(g, _edge_weight_tensor(g, gen, base), enc)


def _predict_log_probs(h, pred: Predictor):
    ps = pred.params
    hid = ad.relu(ad.add(ad.matmul(h, ps.tensor("w1")), ps.tensor("b1")))
    logits = ad.add(ad.matmul(hid, ps.tensor("w2")), ps.tensor("b2"))
    return ad.log_softmax_rows(logits)


def branch_forward(g: Graph, gen: PromptGenerator, enc: GinEncoder, pred: Predictor):
    """One branch's prompted embedding and class distribution (h, z)."""
    base = base_node_reps(g, enc)
    h = _embed(g, gen, enc, base)
    z = ad.exp(_predict_log_probs(h, pred))
    return h, z


def md_tensor(h, scorer: scoring.MahalanobisScorer):
    """Differentiable reciprocal squared Mahalanobis distance.

    The cluster statistics are constants; the minimum over clusters picks
    one branch of the computation (ties to the lowest index), and the
    reciprocal is clamped exactly like the detached scoring path.
    """
    best = None
    best_d2 = None
    for cs in scorer.stats:
        diff = ad.add(h, ad.constant(-cs.mu))
        d2 = ad.sum_all(ad.mul(ad.matmul(diff, ad.constant(cs.inv)), diff))
        if best is None or float(d2.data) < best_d2:
            best, best_d2 = d2, float(d2.data)
    return ad.reciprocal_clamped(best, scorer.eps_d)


# -- losses -----------------------------------------------------------------


def _mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def _require_stats(model, which):
    s = model.stats1 if which == 1 else model.stats2
    if s is None:
        raise ValueError(f"branch {which} statistics have not been fitted yet")
    return s


def _bases(batch, model, base):
    if base is not None:
        return base
    return [base_node_reps(lg.graph, model.encoder) for lg in batch]


def class_specific_loss(batch, model: DgpModel, base=None):
    """Mean cross entropy of branch 1 against the ground-truth labels."""
    if not batch:
        raise ValueError("empty batch")
    c = model.predictor.class_count
    eye = np.eye(c)
    terms = []
    for lg, b in zip(batch, _bases(batch, model, base)):
        if not 0 <= lg.label < c:
            raise ValueError(f"label {lg.label} outside [0, {c})")
        lp = _predict_log_probs(_embed(lg.graph, model.gen1, model.encoder, b), model.predictor)
        terms.append(ad.cross_entropy(lp, eye[lg.label]))
    return _mean(terms)


def class_agnostic_loss(batch, model: DgpModel, base=None):
    """Mean cross entropy of branch 2 against the uniform distribution."""
    if not batch:
        raise ValueError("empty batch")
    c = model.predictor.class_count
    uniform = np.full(c, 1.0 / c)
    terms = []
    for lg, b in zip(batch, _bases(batch, model, base)):
        lp = _predict_log_probs(_embed(lg.graph, model.gen2, model.encoder, b), model.predictor)
        terms.append(ad.cross_entropy(lp, uniform))
    return _mean(terms)


def disentangle_loss(batch, model: DgpModel, lam=None, base=None):
    lam = model.config.lam if lam is None else lam
    base = _bases(batch, model, base)
    return ad.add(
        class_specific_loss(batch, model, base),
        ad.mul(class_agnostic_loss(batch, model, base), lam),
    )


def _distance_term(batch, model, which, base):
    scorer = _require_stats(model, which)
    gen = model.gen1 if which == 1 else model.gen2
    mds = [
        md_tensor(_embed(lg.graph, gen, model.encoder, b), scorer)
        for lg, b in zip(batch, base)
    ]
    return _mean(mds)


def distance_loss(batch, model: DgpModel, alpha1=None, alpha2=None, base=None):
    """alpha1 / mean(md1) + alpha2 / mean(md2): minimizing this raises the
    mean reciprocal distances, pulling both branches' embeddings in toward
    their cluster centers."""
    if not batch:
        raise ValueError("empty batch")
    alpha1 = model.config.alpha1 if alpha1 is None else alpha1
    alpha2 = model.config.alpha2 if alpha2 is None else alpha2
    base = _bases(batch, model, base)
    t1 = ad.mul(ad.reciprocal(_distance_term(batch, model, 1, base)), alpha1)
    t2 = ad.mul(ad.reciprocal(_distance_term(batch, model, 2, base)), alpha2)
    return ad.add(t1, t2)


# -- training ---------------------------------------------------------------


def _prompt_embedding_matrix(graphs, gen, enc, bases):
    with ad.no_grad():
        rows = [_embed(g, gen, enc, b).data.copy() for g, b in zip(graphs, bases)]
    return np.stack(rows)


def _unprompted_embedding_matrix(graphs, enc):
    with ad.no_grad():
        rows = [encode_graph(g, None, enc).data.copy() for g in graphs]
    return np.stack(rows)


def _fit_branch_stats(model, which, graphs, bases, cfg, seed_label):
    if cfg.distance_stats == "unprompted":
        emb = _unprompted_embedding_matrix(graphs, model.encoder)
    else:
        gen = model.gen1 if which == 1 else model.gen2
        emb = _prompt_embedding_matrix(graphs, gen, model.encoder, bases)
    return scoring.fit(
        emb, q=cfg.q, eps_reg=cfg.eps_reg,
        seed=derive_int(cfg.seed, f"dgp-kmeans{which}", seed_label), eps_d=cfg.eps_d,
    )


def _snapshot(model):
    out = {}
    for tag, ps in (("gen1", model.gen1.params), ("gen2", model.gen2.params),
                    ("pred", model.predictor.params)):
        for p in ps:
            out[f"{tag}.{p.name}"] = p.value.copy()
    return out


def _restore(model, snap):
    for tag, ps in (("gen1", model.gen1.params), ("gen2", model.gen2.params),
                    ("pred", model.predictor.params)):
        for p in ps:
            p.value[...] = snap[f"{tag}.{p.name}"]


def train_dgp(train, enc: GinEncoder, cfg: DgpConfig, val_id=None, val_ood=None) -> DgpModel:
    """Fit both prompt generators and the classifier head on labeled
    in-distribution graphs against a frozen encoder.

    Each mini-batch takes one Adam step on the disentangle loss (updating
    generators and head) and one on the distance loss (updating only the
    generators, with its own optimizer state).  Branch statistics are
    refitted once per epoch and once more on the full training set at the
    end.  Early stopping on validation AUC kicks in only when a validation
    bundle is supplied and a patience is configured.
    """
    if not train:
        raise ValueError("empty training set")
    if not enc.frozen:
        raise ValueError("the encoder must be frozen before prompt training")
    if cfg.distance_stats not in ("prompted", "unprompted"):
        raise ValueError(f"unknown distance_stats {cfg.distance_stats!r}")
    labels = sorted({lg.label for lg in train})
    if len(labels) < 2:
        warnings.warn("single-class training set: the class-specific loss is degenerate")
    class_count = cfg.class_count or max(2, labels[-1] + 1)

    gen1 = PromptGenerator.build(enc.concat_dim, cfg.gen_hidden, derive_rng(cfg.seed, "dgp-gen1"))
    gen2 = PromptGenerator.build(enc.concat_dim, cfg.gen_hidden, derive_rng(cfg.seed, "dgp-gen2"))
    pred = Predictor.build(enc.embed_dim, cfg.pred_hidden, class_count,
                           derive_rng(cfg.seed, "dgp-pred"))
    model = DgpModel(enc, gen1, gen2, pred, None, None, cfg.gamma, encoder_hash(enc), cfg)

    graphs = [lg.graph for lg in train]
    bases = [base_node_reps(g, enc) for g in graphs]
    shuffle_rng = derive_rng(cfg.seed, "dgp-shuffle")
    phase1_states = {"gen1": ad.AdamState(), "gen2": ad.AdamState(), "pred": ad.AdamState()}
    phase2_states = {"gen1": ad.AdamState(), "gen2": ad.AdamState()}

    def zero_all():
        gen1.params.zero_grads()
        gen2.params.zero_grads()
        pred.params.zero_grads()

    best_auc, best_snap, stale = -1.0, None, 0
    track = val_id is not None and val_ood is not None and cfg.early_stop_patience

    for epoch in range(cfg.epochs):
        if cfg.use_distance:
            if cfg.use_cs:
                model.stats1 = _fit_branch_stats(model, 1, graphs, bases, cfg, epoch)
            if cfg.use_ca:
                model.stats2 = _fit_branch_stats(model, 2, graphs, bases, cfg, epoch)
        order = shuffle_rng.permutation(len(train))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = [train[i] for i in idx]
            batch_bases = [bases[i] for i in idx]
            if cfg.use_cs or cfg.use_ca:
                if cfg.use_cs and cfg.use_ca:
                    loss = disentangle_loss(batch, model, cfg.lam, batch_bases)
                elif cfg.use_cs:
                    loss = class_specific_loss(batch, model, batch_bases)
                else:
                    loss = ad.mul(class_agnostic_loss(batch, model, batch_bases), cfg.lam)
                zero_all()
                ad.backward(loss)
                ad.adam_step(gen1.params, phase1_states["gen1"], cfg.lr)
                ad.adam_step(gen2.params, phase1_states["gen2"], cfg.lr)
                ad.adam_step(pred.params, phase1_states["pred"], cfg.lr)
            if cfg.use_distance:
                terms = []
                if cfg.use_cs:
                    terms.append(ad.mul(ad.reciprocal(
                        _distance_term(batch, model, 1, batch_bases)), cfg.alpha1))
                if cfg.use_ca:
                    terms.append(ad.mul(ad.reciprocal(
                        _distance_term(batch, model, 2, batch_bases)), cfg.alpha2))
                if terms:
                    loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
                    zero_all()
                    ad.backward(loss)
                    ad.adam_step(gen1.params, phase2_states["gen1"], cfg.lr)
                    ad.adam_step(gen2.params, phase2_states["gen2"], cfg.lr)
        if track:
            model.stats1 = _fit_branch_stats(model, 1, graphs, bases, cfg, f"val{epoch}")
            model.stats2 = _fit_branch_stats(model, 2, graphs, bases, cfg, f"val{epoch}")
            id_s = [score(lg.graph, model)[0] for lg in val_id]
            ood_s = [score(g, model)[0] for g in val_ood]
            from .metrics import auc  # local import avoids a cycle

            cur = auc(id_s, ood_s)
            if cur > best_auc:
                best_auc, best_snap, stale = cur, _snapshot(model), 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if track and best_snap is not None:
        _restore(model, best_snap)
    model.stats1 = _fit_branch_stats(model, 1, graphs, bases, cfg, "final")
    model.stats2 = _fit_branch_stats(model, 2, graphs, bases, cfg, "final")
    return model


# -- scoring ----------------------------------------------------------------


def score(g: Graph, model: DgpModel, gamma=None):
    """Returns (S, md1, md2) with S = md1 + gamma * md2."""
    _require_stats(model, 1)
    _require_stats(model, 2)
    gamma = model.gamma if gamma is None else gamma
    with ad.no_grad():
        base = base_node_reps(g, model.encoder)
        h1 = _embed(g, model.gen1, model.encoder, base).data
        h2 = _embed(g, model.gen2, model.encoder, base).data
    md1 = scoring.md_score(h1, model.stats1)
    md2 = scoring.md_score(h2, model.stats2)
    return md1 + gamma * md2, md1, md2


# -- serialization ----------------------------------------------------------


def _scorer_tensors(tag, scorer):
    out = []
    for i, cs in enumerate(scorer.stats):
        out.append((f"{tag}.c{i}.mu", cs.mu))
        out.append((f"{tag}.c{i}.cov", cs.cov))
        out.append((f"{tag}.c{i}.inv", cs.inv))
    return out


def _scorer_from_tensors(tag, meta, tensors):
    stats = []
    for i in range(meta["clusters"]):
        stats.append(scoring.ClusterStats(
            mu=tensors[f"{tag}.c{i}.mu"],
            cov=tensors[f"{tag}.c{i}.cov"],
            inv=tensors[f"{tag}.c{i}.inv"],
        ))
    return scoring.MahalanobisScorer(stats=stats, eps_reg=meta["eps_reg"], eps_d=meta["eps_d"])


def model_to_bytes(model: DgpModel) -> bytes:
    if model.stats1 is None or model.stats2 is None:
        raise ValueError("cannot serialize a model without fitted statistics")
    cfg = asdict(model.config)
    meta = {
        "kind": "dgp-model",
        "gamma": model.gamma,
        "class_count": model.predictor.class_count,
        "encoder_ref": model.encoder_ref,
        "config": cfg,
        "scorer1": {"clusters": model.stats1.q, "eps_reg": model.stats1.eps_reg,
                    "eps_d": model.stats1.eps_d},
        "scorer2": {"clusters": model.stats2.q, "eps_reg": model.stats2.eps_reg,
                    "eps_d": model.stats2.eps_d},
        "gen_hidden": model.gen1.hidden,
        "pred_hidden": model.predictor.hidden,
    }
    tensors = []
    for tag, ps in (("gen1", model.gen1.params), ("gen2", model.gen2.params),
                    ("pred", model.predictor.params)):
        for p in ps:
            tensors.append((f"{tag}.{p.name}", p.value))
    tensors.extend(_scorer_tensors("stats1", model.stats1))
    tensors.extend(_scorer_tensors("stats2", model.stats2))
    return write_container(meta, tensors)


def model_from_bytes(data: bytes, enc: GinEncoder) -> DgpModel:
    meta, tensors = read_container(data)
    if meta.get("kind") != "dgp-model":
        raise CheckpointError(f"expected a model file, got kind {meta.get('kind')!r}")
    ref = meta["encoder_ref"]
    actual = encoder_hash(enc)
    if ref != actual:
        raise CheckpointError(
            f"model was trained against encoder {ref[:12]}..., got {actual[:12]}..."
        )
    cfg = DgpConfig(**meta["config"])

    def load_ps(tag, names):
        ps = ad.ParamSet()
        for name in names:
            ps.add(name, tensors[f"{tag}.{name}"])
        return ps

    gen_names = ["w1", "b1", "w2", "b2"]
    gen1 = PromptGenerator(load_ps("gen1", gen_names), enc.concat_dim, meta["gen_hidden"])
    gen2 = PromptGenerator(load_ps("gen2", gen_names), enc.concat_dim, meta["gen_hidden"])
    pred = Predictor(load_ps("pred", gen_names), enc.embed_dim, meta["pred_hidden"],
                     meta["class_count"])
    return DgpModel(
        encoder=enc,
        gen1=gen1,
        gen2=gen2,
        predictor=pred,
        stats1=_scorer_from_tensors("stats1", meta["scorer1"], tensors),
        stats2=_scorer_from_tensors("stats2", meta["scorer2"], tensors),
        gamma=meta["gamma"],
        encoder_ref=ref,
        config=cfg,
    )


def save_model(model: DgpModel, path: str):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path: str, enc: GinEncoder) -> DgpModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), enc)


def model_hash(model: DgpModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
