"""Prompt generators, disentangle/distance losses, training and scoring."""
import math

import numpy as np
import pytest

from dgp import autodiff as ad
from dgp import scoring
from dgp.encoder import CheckpointError, GinEncoder, encoder_hash, freeze, write_container
from dgp.graphs import Graph, LabeledGraph
from dgp.prompting import (
    DgpConfig,
    DgpModel,
    PromptGenerator,
    Predictor,
    base_node_reps,
    branch_forward,
    class_agnostic_loss,
    class_specific_loss,
    disentangle_loss,
    distance_loss,
    gen_edge_weights,
    md_tensor,
    model_from_bytes,
    model_to_bytes,
    score,
    train_dgp,
)
from dgp.prompting import _embed, _prompt_embedding_matrix
from dgp.seeding import derive_rng
from oracles import assert_grads_close

SIG2 = 0.8807970779778823  # sigmoid(2)


def random_graph(rng, n=6, d=4, p=0.5):
    edges = []
    for a in range(n):
        for b in range(n):
            if a != b and rng.random() < p:
                edges.append((a, b))
    return Graph(n, np.asarray(edges, dtype=np.intp).reshape(-1, 2), rng.normal(size=(n, d)))


def make_encoder(seed=7, feature_dim=4, hidden=(6, 6), proj=8, embed=6):
    enc = GinEncoder.build(feature_dim, hidden_dims=hidden, proj_hidden=proj,
                           embed_dim=embed, rng=derive_rng(seed, "pr-enc"))
    return freeze(enc)


def make_train(rng, count=10, classes=2, d=4):
    return [LabeledGraph(random_graph(rng, n=int(rng.integers(4, 8)), d=d), i % classes)
            for i in range(count)]


def fresh_model(enc, train, cfg=None, fit_stats=True):
    """A model at initialization, optionally with branch statistics fitted
    from the initial prompted embeddings."""
    cfg = cfg or DgpConfig(q=1, gen_hidden=5, pred_hidden=5, seed=0)
    gen1 = PromptGenerator.build(enc.concat_dim, cfg.gen_hidden, derive_rng(cfg.seed, "t-g1"))
    gen2 = PromptGenerator.build(enc.concat_dim, cfg.gen_hidden, derive_rng(cfg.seed, "t-g2"))
    pred = Predictor.build(enc.embed_dim, cfg.pred_hidden, 2, derive_rng(cfg.seed, "t-p"))
    model = DgpModel(enc, gen1, gen2, pred, None, None, cfg.gamma, encoder_hash(enc), cfg)
    if fit_stats:
        graphs = [lg.graph for lg in train]
        bases = [base_node_reps(g, enc) for g in graphs]
        for which, gen in ((1, gen1), (2, gen2)):
            emb = _prompt_embedding_matrix(graphs, gen, enc, bases)
            scorer = scoring.fit(emb, q=cfg.q, eps_reg=cfg.eps_reg, seed=which, eps_d=cfg.eps_d)
            if which == 1:
                model.stats1 = scorer
            else:
                model.stats2 = scorer
    return model


# -- edge weights ------------------------------------------------------------


def test_fresh_generator_emits_constant_weight():
    enc = make_encoder()
    rng = derive_rng(1, "fresh")
    g = random_graph(rng)
    gen = PromptGenerator.build(enc.concat_dim, 5, rng)
    w = gen_edge_weights(g, gen, enc).values
    assert w.shape == (g.edge_count,)
    assert np.allclose(w, SIG2, atol=1e-12)


def test_trained_layer_weights_vary_but_stay_in_unit_interval():
    enc = make_encoder()
    rng = derive_rng(2, "vary")
    g = random_graph(rng, n=8)
    gen = PromptGenerator.build(enc.concat_dim, 5, rng)
    gen.params["w2"].value[...] = rng.normal(size=gen.params["w2"].value.shape)
    w = gen_edge_weights(g, gen, enc).values
    assert np.all((w > 0.0) & (w < 1.0))
    assert np.std(w) > 0.0


def test_edgeless_graph_scores_cleanly():
    enc = make_encoder()
    rng = derive_rng(3, "edgeless")
    train = make_train(rng, count=8)
    model = fresh_model(enc, train)
    bare = Graph(3, np.empty((0, 2), dtype=np.intp), rng.normal(size=(3, 4)))
    assert gen_edge_weights(bare, model.gen1, enc).values.shape == (0,)
    s, md1, md2 = score(bare, model)
    assert math.isfinite(s) and md1 > 0 and md2 > 0


# -- branch forward ----------------------------------------------------------


def test_branch_distribution_is_normalized():
    enc = make_encoder()
    rng = derive_rng(4, "dist")
    g = random_graph(rng)
    model = fresh_model(enc, make_train(rng), fit_stats=False)
    h, z = branch_forward(g, model.gen1, enc, model.predictor)
    assert h.data.shape == (6,)
    assert z.data.shape == (2,)
    assert z.data.sum() == pytest.approx(1.0, abs=1e-12)


def test_zeroed_head_predicts_uniform_and_log_class_count_losses():
    enc = make_encoder()
    rng = derive_rng(5, "uniform")
    train = make_train(rng, count=6)
    model = fresh_model(enc, train, fit_stats=False)
    model.predictor.params["w2"].value[...] = 0.0
    model.predictor.params["b2"].value[...] = 0.0
    _, z = branch_forward(train[0].graph, model.gen1, enc, model.predictor)
    assert np.allclose(z.data, 0.5, atol=1e-14)
    # uniform predictions: both objectives sit exactly at log(2)
    assert class_specific_loss(train, model).item() == pytest.approx(math.log(2), abs=1e-12)
    assert class_agnostic_loss(train, model).item() == pytest.approx(math.log(2), abs=1e-12)


def head_log_probs(h, pred):
    """Pure-numpy replay of the classifier head."""
    ps = pred.params
    hid = np.maximum(h @ ps["w1"].value + ps["b1"].value, 0.0)
    logits = hid @ ps["w2"].value + ps["b2"].value
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def test_class_specific_loss_matches_numpy_replay():
    enc = make_encoder()
    rng = derive_rng(6, "replay")
    train = make_train(rng, count=5)
    model = fresh_model(enc, train, fit_stats=False)
    model.predictor.params["w2"].value[...] = rng.normal(size=(5, 2))
    graphs = [lg.graph for lg in train]
    bases = [base_node_reps(g, enc) for g in graphs]
    with ad.no_grad():
        embs = [_embed(g, model.gen1, enc, b).data for g, b in zip(graphs, bases)]
    expected = np.mean([
        -head_log_probs(h, model.predictor)[lg.label] for h, lg in zip(embs, train)
    ])
    got = class_specific_loss(train, model).item()
    assert got == pytest.approx(expected, abs=1e-10)


def test_class_agnostic_loss_matches_numpy_replay():
    enc = make_encoder()
    rng = derive_rng(7, "replay2")
    train = make_train(rng, count=5)
    model = fresh_model(enc, train, fit_stats=False)
    model.predictor.params["w2"].value[...] = rng.normal(size=(5, 2))
    graphs = [lg.graph for lg in train]
    bases = [base_node_reps(g, enc) for g in graphs]
    with ad.no_grad():
        embs = [_embed(g, model.gen2, enc, b).data for g, b in zip(graphs, bases)]
    expected = np.mean([
        -head_log_probs(h, model.predictor) @ np.array([0.5, 0.5]) for h in embs
    ])
    got = class_agnostic_loss(train, model).item()
    assert got == pytest.approx(expected, abs=1e-10)


def test_disentangle_loss_is_linear_in_lambda():
    enc = make_encoder()
    rng = derive_rng(8, "lam")
    train = make_train(rng, count=4)
    model = fresh_model(enc, train, fit_stats=False)
    cs = class_specific_loss(train, model).item()
    ca = class_agnostic_loss(train, model).item()
    for lam in (0.0, 0.5, 2.0, 10.0):
        got = disentangle_loss(train, model, lam=lam).item()
        assert got == pytest.approx(cs + lam * ca, abs=1e-12)


def test_class_specific_loss_rejects_bad_labels():
    enc = make_encoder()
    rng = derive_rng(9, "badlab")
    train = make_train(rng, count=3)
    model = fresh_model(enc, train, fit_stats=False)
    bad = [LabeledGraph(train[0].graph, 5)]
    with pytest.raises(ValueError, match="label 5"):
        class_specific_loss(bad, model)
    with pytest.raises(ValueError, match="empty"):
        class_specific_loss([], model)


# -- distance pieces ---------------------------------------------------------


def test_md_tensor_agrees_with_detached_scorer():
    rng = np.random.default_rng(10)
    stats = []
    for _ in range(3):
        a = rng.normal(size=(4, 4))
        cov = a @ a.T + 0.3 * np.eye(4)
        stats.append(scoring.ClusterStats(mu=rng.normal(size=4), cov=cov,
                                          inv=np.linalg.inv(cov)))
    scorer = scoring.MahalanobisScorer(stats=stats, eps_reg=0.0)
    for _ in range(15):
        h = rng.normal(size=4) * 2.0
        got = md_tensor(ad.constant(h), scorer).item()
        assert got == pytest.approx(scoring.md_score(h, scorer), rel=1e-12)
    # landing on a mean hits the clamp on both routes
    mu = stats[1].mu
    assert md_tensor(ad.constant(mu), scorer).item() == scoring.md_score(mu, scorer)


def test_md_tensor_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 3))
    cov = a @ a.T + 0.5 * np.eye(3)
    scorer = scoring.MahalanobisScorer(
        stats=[scoring.ClusterStats(np.zeros(3), cov, np.linalg.inv(cov))], eps_reg=0.0)
    ps = ad.ParamSet()
    ps.add("h", rng.normal(size=3) + 1.0)

    def loss():
        return md_tensor(ps.tensor("h"), scorer)

    assert_grads_close(loss, [ps])


def test_distance_loss_matches_numpy_replay():
    enc = make_encoder()
    rng = derive_rng(12, "dreplay")
    train = make_train(rng, count=6)
    model = fresh_model(enc, train)
    graphs = [lg.graph for lg in train]
    bases = [base_node_reps(g, enc) for g in graphs]

    def branch_mean(gen, scorer):
        with ad.no_grad():
            embs = [_embed(g, gen, enc, b).data for g, b in zip(graphs, bases)]
        return np.mean([scoring.md_score(h, scorer) for h in embs])

    l1 = branch_mean(model.gen1, model.stats1)
    l2 = branch_mean(model.gen2, model.stats2)
    for a1, a2 in ((100.0, 100.0), (1000.0, 10.0)):
        got = distance_loss(train, model, alpha1=a1, alpha2=a2).item()
        assert got == pytest.approx(a1 / l1 + a2 / l2, rel=1e-10)


# -- gradients through the full losses ---------------------------------------


def tiny_setup():
    rng = derive_rng(13, "tiny")
    enc = make_encoder(seed=13, feature_dim=3, hidden=(4, 4), proj=5, embed=4)
    train = [LabeledGraph(random_graph(rng, n=4, d=3), i % 2) for i in range(3)]
    cfg = DgpConfig(q=1, gen_hidden=4, pred_hidden=4, seed=1)
    gen1 = PromptGenerator.build(enc.concat_dim, 4, derive_rng(1, "fd-g1"))
    gen2 = PromptGenerator.build(enc.concat_dim, 4, derive_rng(1, "fd-g2"))
    pred = Predictor.build(enc.embed_dim, 4, 2, derive_rng(1, "fd-p"))
    # move the generators off their constant-output start so gradients
    # depend on every layer, and nudge all hidden biases away from the
    # relu kink so finite differences stay on one side of it
    gen1.params["w2"].value[...] = derive_rng(1, "fd-w2a").normal(size=(4, 1)) * 0.5
    gen2.params["w2"].value[...] = derive_rng(1, "fd-w2b").normal(size=(4, 1)) * 0.5
    bias_rng = derive_rng(1, "fd-bias")
    for ps in (gen1.params, gen2.params, pred.params):
        ps["b1"].value[...] += bias_rng.uniform(0.05, 0.2, size=ps["b1"].value.shape)
    model = DgpModel(enc, gen1, gen2, pred, None, None, 1.0, encoder_hash(enc), cfg)
    graphs = [lg.graph for lg in train]
    bases = [base_node_reps(g, enc) for g in graphs]
    for which, gen in ((1, gen1), (2, gen2)):
        emb = _prompt_embedding_matrix(graphs, gen, enc, bases)
        scorer = scoring.fit(emb, q=1, eps_reg=1e-3, seed=which)
        if which == 1:
            model.stats1 = scorer
        else:
            model.stats2 = scorer
    return model, train


def test_class_specific_gradients_match_finite_differences():
    model, train = tiny_setup()

    def loss():
        return class_specific_loss(train, model)

    assert_grads_close(loss, [model.gen1.params, model.predictor.params])


def test_class_agnostic_gradients_match_finite_differences():
    model, train = tiny_setup()

    def loss():
        return class_agnostic_loss(train, model)

    assert_grads_close(loss, [model.gen2.params, model.predictor.params])


def test_disentangle_gradients_match_finite_differences():
    model, train = tiny_setup()

    def loss():
        return disentangle_loss(train, model, lam=0.7)

    assert_grads_close(
        loss, [model.gen1.params, model.gen2.params, model.predictor.params])


def test_distance_gradients_match_finite_differences():
    model, train = tiny_setup()

    def loss():
        return distance_loss(train, model, alpha1=10.0, alpha2=5.0)

    assert_grads_close(loss, [model.gen1.params, model.gen2.params])


def test_frozen_encoder_gets_no_gradient_from_losses():
    model, train = tiny_setup()
    loss = disentangle_loss(train, model, lam=1.0)
    ad.backward(loss)
    for p in model.encoder.params:
        assert not p.tensor.requires_grad


# -- training ----------------------------------------------------------------


def quick_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=0.01, q=1, gen_hidden=5, pred_hidden=5,
                seed=0, alpha1=10.0, alpha2=10.0)
    base.update(kw)
    return DgpConfig(**base)


def test_training_moves_generators_and_fits_stats():
    enc = make_encoder()
    rng = derive_rng(14, "train")
    train = make_train(rng, count=10)
    model = train_dgp(train, enc, quick_cfg())
    fresh = PromptGenerator.build(enc.concat_dim, 5, derive_rng(0, "dgp-gen1"))
    assert not np.array_equal(model.gen1.params["w2"].value, fresh.params["w2"].value)
    assert model.stats1 is not None and model.stats2 is not None
    s, md1, md2 = score(train[0].graph, model)
    assert s == pytest.approx(md1 + model.gamma * md2, rel=1e-12)


def test_training_is_bit_reproducible():
    enc = make_encoder()
    rng = derive_rng(15, "repro")
    train = make_train(rng, count=8)
    m1 = train_dgp(train, enc, quick_cfg(seed=3))
    m2 = train_dgp(train, enc, quick_cfg(seed=3))
    m3 = train_dgp(train, enc, quick_cfg(seed=4))
    assert model_to_bytes(m1) == model_to_bytes(m2)
    assert model_to_bytes(m1) != model_to_bytes(m3)


def test_training_leaves_encoder_untouched():
    enc = make_encoder()
    before = encoder_hash(enc)
    rng = derive_rng(16, "enc-invariant")
    train_dgp(make_train(rng, count=8), enc, quick_cfg())
    assert encoder_hash(enc) == before


def test_single_branch_run_equals_zeroed_full_run():
    """Disabling the class-agnostic branch must be bitwise the same as
    running the full objective with its coefficients at zero."""
    enc = make_encoder()
    rng = derive_rng(17, "variants")
    train = make_train(rng, count=8)
    m_v0 = train_dgp(train, enc, quick_cfg(use_ca=False, gamma=0.0, seed=5))
    m_full = train_dgp(train, enc, quick_cfg(lam=0.0, alpha2=0.0, gamma=0.0, seed=5))
    for tag in ("gen1", "gen2"):
        a = getattr(m_v0, tag).params
        b = getattr(m_full, tag).params
        for p in a:
            assert np.array_equal(p.value, b[p.name].value), f"{tag}.{p.name}"
    for p in m_v0.predictor.params:
        assert np.array_equal(p.value, m_full.predictor.params[p.name].value)
    for lg in train:
        sa = score(lg.graph, m_v0)
        sb = score(lg.graph, m_full)
        assert sa == sb


def test_score_decomposition_and_gamma_override():
    enc = make_encoder()
    rng = derive_rng(18, "gamma")
    train = make_train(rng, count=8)
    model = train_dgp(train, enc, quick_cfg(gamma=0.5))
    g = train[0].graph
    s_default, md1, md2 = score(g, model)
    assert s_default == md1 + 0.5 * md2
    for gamma in (0.0, 1.0, 7.0):
        s, a, b = score(g, model, gamma=gamma)
        assert (a, b) == (md1, md2)
        assert s == md1 + gamma * md2


def test_score_is_permutation_invariant():
    enc = make_encoder()
    rng = derive_rng(19, "perm")
    train = make_train(rng, count=8)
    model = train_dgp(train, enc, quick_cfg())
    g = random_graph(rng, n=7)
    perm = rng.permutation(7)
    feats = np.empty_like(g.features)
    feats[perm] = g.features
    gp = Graph(7, perm[g.edges], feats)
    s1, _, _ = score(g, model)
    s2, _, _ = score(gp, model)
    assert s2 == pytest.approx(s1, rel=1e-9)


def test_unprompted_statistics_share_embeddings_across_branches():
    enc = make_encoder()
    rng = derive_rng(20, "unprompted")
    train = make_train(rng, count=8)
    model = train_dgp(train, enc, quick_cfg(distance_stats="unprompted", epochs=1))
    assert np.array_equal(model.stats1.stats[0].mu, model.stats2.stats[0].mu)
    assert np.array_equal(model.stats1.stats[0].cov, model.stats2.stats[0].cov)


def test_early_stopping_restores_best_weights():
    enc = make_encoder()
    rng = derive_rng(21, "early")
    train = make_train(rng, count=8)
    val_id = make_train(rng, count=4)
    val_ood = [random_graph(rng, n=10, p=0.9) for _ in range(4)]
    model = train_dgp(train, enc, quick_cfg(epochs=6, early_stop_patience=2),
                      val_id=val_id, val_ood=val_ood)
    assert model.stats1 is not None
    s, _, _ = score(train[0].graph, model)
    assert math.isfinite(s)


def test_train_input_validation():
    enc = make_encoder()
    rng = derive_rng(22, "val")
    train = make_train(rng, count=6)
    with pytest.raises(ValueError, match="empty"):
        train_dgp([], enc, quick_cfg())
    hot = GinEncoder.build(4, hidden_dims=(6, 6), proj_hidden=8, embed_dim=6)
    with pytest.raises(ValueError, match="frozen"):
        train_dgp(train, hot, quick_cfg())
    with pytest.raises(ValueError, match="distance_stats"):
        train_dgp(train, enc, quick_cfg(distance_stats="mystery"))
    mono = [LabeledGraph(lg.graph, 0) for lg in train]
    with pytest.warns(UserWarning, match="single-class"):
        train_dgp(mono, enc, quick_cfg(epochs=1))


# -- serialization -----------------------------------------------------------


def test_model_round_trip_preserves_scores(tmp_path):
    enc = make_encoder()
    rng = derive_rng(23, "roundtrip")
    train = make_train(rng, count=8)
    model = train_dgp(train, enc, quick_cfg(gamma=0.5, q=1))
    blob = model_to_bytes(model)
    back = model_from_bytes(blob, enc)
    assert back.config == model.config
    assert back.gamma == 0.5
    for lg in train:
        assert score(lg.graph, back) == score(lg.graph, model)
    assert model_to_bytes(back) == blob


def test_model_refuses_mismatched_encoder():
    enc = make_encoder()
    rng = derive_rng(24, "mismatch")
    train = make_train(rng, count=8)
    model = train_dgp(train, enc, quick_cfg())
    blob = model_to_bytes(model)
    other = make_encoder(seed=99)
    with pytest.raises(CheckpointError, match="encoder"):
        model_from_bytes(blob, other)


def test_model_rejects_wrong_kind_and_missing_stats():
    enc = make_encoder()
    with pytest.raises(CheckpointError, match="kind"):
        model_from_bytes(write_container({"kind": "encoder"}, []), enc)
    rng = derive_rng(25, "nostats")
    model = fresh_model(enc, make_train(rng, count=6), fit_stats=False)
    with pytest.raises(ValueError, match="statistics"):
        model_to_bytes(model)
