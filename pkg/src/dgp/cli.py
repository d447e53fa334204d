"""Command-line entry points.

Every subcommand is driven by one flat key=value config file; --seed and
--out override the corresponding config keys.  Randomness is derived from
the master seed by fixed stage labels, so running the pipeline end to end
and running the stages as separate commands produce identical artifacts.
"""
from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import time
from dataclasses import asdict
from operator import attrgetter

from . import __version__
from . import autodiff as ad
from . import scoring
from .config import ExperimentConfig, load_config, pretrain_config, dgp_config
from .encoder import (
    GinEncoder,
    encoder_hash,
    freeze,
    load_checkpoint,
    save_checkpoint,
)
from .graphs import (
    GraphDataset,
    MotifSpec,
    OodSpec,
    degree_features,
    make_split,
    mean_density,
    parse_tu_dataset,
    synth_id,
    synth_ood,
    write_tu_dataset,
)
from .metrics import ScoreRow, ScoreTable, auc, metrics_dict, write_metrics_json
from .pretrain import pretrain
from .prompting import (
    gen_edge_weights,
    load_model,
    model_hash,
    save_model,
    score,
    train_dgp,
)
from .seeding import derive_int, derive_rng


# -- data assembly ----------------------------------------------------------


def build_id_dataset(cfg: ExperimentConfig) -> GraphDataset:
    if cfg.id_source == "tu":
        ds = parse_tu_dataset(cfg.id_dir, cfg.id_name)
    else:
        ds = synth_id(
            classes=cfg.synth_classes,
            per_class=cfg.synth_per_class,
            motif_spec=MotifSpec(
                count=cfg.synth_motif_count,
                extra_nodes=cfg.synth_extra_nodes,
                jitter=cfg.synth_jitter,
            ),
            bg_density=cfg.synth_bg_density,
            seed=cfg.seed,
            max_degree=cfg.max_degree,
        )
    return _featurize(ds, cfg)


def build_ood_dataset(cfg: ExperimentConfig, id_ds: GraphDataset) -> GraphDataset:
    if cfg.ood_source == "tu":
        ds = parse_tu_dataset(cfg.ood_dir, cfg.ood_name)
    else:
        count = cfg.ood_count or 2 * math.ceil(0.1 * len(id_ds))
        density = cfg.ood_density or 2.0 * mean_density(id_ds)
        ds = synth_ood(
            count=count,
            ood_spec=OodSpec(nodes=cfg.ood_nodes, density=density, jitter=cfg.ood_jitter),
            seed=cfg.seed,
            max_degree=cfg.max_degree,
        )
    ds = _featurize(ds, cfg)
    if ds.feature_dim != id_ds.feature_dim:
        raise ValueError(
            f"feature width mismatch: ID has {id_ds.feature_dim}, OOD has {ds.feature_dim}"
        )
    return ds


def _featurize(ds: GraphDataset, cfg: ExperimentConfig) -> GraphDataset:
    if cfg.featurizer == "degree":
        return degree_features(ds, max_degree=cfg.max_degree)
    return ds


def _split(cfg):
    id_ds = build_id_dataset(cfg)
    ood_ds = build_ood_dataset(cfg, id_ds)
    return id_ds, ood_ds, make_split(id_ds, ood_ds, cfg.seed)


def _train_dataset(id_ds, split):
    return GraphDataset("train", split.train_id, id_ds.class_count, id_ds.feature_dim)


def _build_encoder(cfg, train_ds) -> GinEncoder:
    """Pre-train, or random-initialize when pretrain_method is 'none'."""
    if cfg.pretrain_method == "none":
        return GinEncoder.build(
            train_ds.feature_dim, tuple(cfg.hidden_dims), cfg.proj_hidden,
            cfg.embed_dim, readout_mode=cfg.readout,
            rng=derive_rng(cfg.seed, "pretrain-init"),
        )
    return pretrain(train_ds, pretrain_config(cfg, cfg.seed))


def _score_table(split, model, gamma=None) -> ScoreTable:
    rows = []
    for i, lg in enumerate(split.test_id):
        s, m1, m2 = score(lg.graph, model, gamma)
        rows.append(ScoreRow(f"id-{i}", "ID", s, m1, m2))
    for i, g in enumerate(split.test_ood):
        s, m1, m2 = score(g, model, gamma)
        rows.append(ScoreRow(f"ood-{i}", "OOD", s, m1, m2))
    return ScoreTable(rows)


def _val_table(split, model, gamma=None) -> ScoreTable:
    rows = []
    for i, lg in enumerate(split.val_id):
        s, m1, m2 = score(lg.graph, model, gamma)
        rows.append(ScoreRow(f"id-{i}", "ID", s, m1, m2))
    for i, g in enumerate(split.val_ood):
        s, m1, m2 = score(g, model, gamma)
        rows.append(ScoreRow(f"ood-{i}", "OOD", s, m1, m2))
    return ScoreTable(rows)


def run_baseline(split, enc: GinEncoder, cfg: ExperimentConfig) -> dict:
    """Detection metrics for the frozen encoder without any prompting:
    fit Mahalanobis statistics on unweighted training embeddings and
    score the test portions by reciprocal squared distance."""
    from .prompting import _unprompted_embedding_matrix

    train_graphs = [lg.graph for lg in split.train_id]
    emb = _unprompted_embedding_matrix(train_graphs, enc)
    scorer = scoring.fit(
        emb, q=cfg.scorer_q, eps_reg=cfg.scorer_eps_reg,
        seed=derive_int(cfg.seed, "baseline-kmeans"),
    )
    with ad.no_grad():
        id_scores = [
            scoring.md_score(_embed_plain(lg.graph, enc), scorer) for lg in split.test_id
        ]
        ood_scores = [
            scoring.md_score(_embed_plain(g, enc), scorer) for g in split.test_ood
        ]
    return metrics_dict(id_scores, ood_scores)


def _embed_plain(g, enc):
    from .encoder import encode_graph

    return encode_graph(g, None, enc).data


# -- subcommands ------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> dict:
    if cfg.id_source != "synth" or cfg.ood_source != "synth":
        raise ValueError("synth requires id_source=synth and ood_source=synth")
    id_ds = build_id_dataset(cfg)
    ood_ds = build_ood_dataset(cfg, id_ds)
    root = os.path.join(cfg.out, "synth")
    id_dir = os.path.join(root, id_ds.name)
    ood_dir = os.path.join(root, ood_ds.name)
    write_tu_dataset(id_ds, id_dir)
    write_tu_dataset(ood_ds, ood_dir)
    print(f"wrote {len(id_ds)} ID graphs to {id_dir}")
    print(f"wrote {len(ood_ds)} OOD graphs to {ood_dir}")
    return {"id_dir": id_dir, "ood_dir": ood_dir}


def cmd_pretrain(cfg: ExperimentConfig) -> str:
    id_ds, ood_ds, split = _split(cfg)
    enc = _build_encoder(cfg, _train_dataset(id_ds, split))
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "encoder.ckpt")
    save_checkpoint(enc, path)
    print(f"encoder checkpoint: {path} ({encoder_hash(enc)[:12]})")
    return path


def _encoder_for(cfg, feature_dim) -> GinEncoder:
    path = cfg.encoder_path or os.path.join(cfg.out, "encoder.ckpt")
    return load_checkpoint(path, expect_feature_dim=feature_dim)


def cmd_train(cfg: ExperimentConfig) -> str:
    id_ds, ood_ds, split = _split(cfg)
    enc = freeze(_encoder_for(cfg, id_ds.feature_dim))
    before = encoder_hash(enc)
    dcfg = dgp_config(cfg, cfg.seed, class_count=id_ds.class_count)
    val_id = split.val_id if dcfg.early_stop_patience else None
    val_ood = split.val_ood if dcfg.early_stop_patience else None
    model = train_dgp(split.train_id, enc, dcfg, val_id=val_id, val_ood=val_ood)
    if encoder_hash(enc) != before:
        raise RuntimeError("encoder parameters changed during prompt training")
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "model.ckpt")
    save_model(model, path)
    print(f"model checkpoint: {path}")
    return path


def cmd_score(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.data_dir:
        ds = _featurize(parse_tu_dataset(cfg.data_dir, cfg.data_name), cfg)
        enc = freeze(_encoder_for(cfg, ds.feature_dim))
        model = load_model(cfg.model_path or os.path.join(cfg.out, "model.ckpt"), enc)
        rows = []
        for i, lg in enumerate(ds.graphs):
            s, m1, m2 = score(lg.graph, model)
            rows.append(ScoreRow(f"{ds.name}-{i}", cfg.data_origin, s, m1, m2))
        table = ScoreTable(rows)
        path = os.path.join(cfg.out, "scores.csv")
    else:
        id_ds, ood_ds, split = _split(cfg)
        enc = freeze(_encoder_for(cfg, id_ds.feature_dim))
        model = load_model(cfg.model_path or os.path.join(cfg.out, "model.ckpt"), enc)
        table = _score_table(split, model)
        path = os.path.join(cfg.out, "scores_test.csv")
    table.write_csv(path)
    print(f"scores: {path}")
    return path


def cmd_eval(cfg: ExperimentConfig) -> dict:
    path = cfg.score_csv or os.path.join(cfg.out, "scores_test.csv")
    table = ScoreTable.read_csv(path)
    m = table.metrics()
    os.makedirs(cfg.out, exist_ok=True)
    out_path = os.path.join(cfg.out, "metrics.json")
    write_metrics_json(m, out_path)
    print(json.dumps(m, sort_keys=True))
    return m


def cmd_pipeline(cfg: ExperimentConfig) -> dict:
    """synth/load -> split -> pre-train -> freeze -> prompt-train -> score
    -> metrics, with a manifest recording hashes, timings and results."""
    os.makedirs(cfg.out, exist_ok=True)
    timings = {}

    t = time.perf_counter()
    id_ds, ood_ds, split = _split(cfg)
    timings["data"] = time.perf_counter() - t

    t = time.perf_counter()
    enc = _build_encoder(cfg, _train_dataset(id_ds, split))
    encoder_path = os.path.join(cfg.out, "encoder.ckpt")
    save_checkpoint(enc, encoder_path)
    timings["pretrain"] = time.perf_counter() - t

    freeze(enc)
    enc_hash = encoder_hash(enc)

    t = time.perf_counter()
    dcfg = dgp_config(cfg, cfg.seed, class_count=id_ds.class_count)
    val_id = split.val_id if dcfg.early_stop_patience else None
    val_ood = split.val_ood if dcfg.early_stop_patience else None
    model = train_dgp(split.train_id, enc, dcfg, val_id=val_id, val_ood=val_ood)
    timings["train"] = time.perf_counter() - t
    if encoder_hash(enc) != enc_hash:
        raise RuntimeError("encoder parameters changed during prompt training")
    model_path = os.path.join(cfg.out, "model.ckpt")
    save_model(model, model_path)

    t = time.perf_counter()
    test_table = _score_table(split, model)
    val_table = _val_table(split, model)
    test_table.write_csv(os.path.join(cfg.out, "scores_test.csv"))
    val_table.write_csv(os.path.join(cfg.out, "scores_val.csv"))
    m_test = test_table.metrics()
    m_val = val_table.metrics()
    write_metrics_json(m_test, os.path.join(cfg.out, "metrics.json"))
    write_metrics_json(m_val, os.path.join(cfg.out, "metrics_val.json"))
    timings["score"] = time.perf_counter() - t

    t = time.perf_counter()
    m_base = run_baseline(split, enc, cfg)
    write_metrics_json(m_base, os.path.join(cfg.out, "metrics_baseline.json"))
    timings["baseline"] = time.perf_counter() - t

    manifest = {
        "toolkit_version": __version__,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "encoder_hash": enc_hash,
        "model_hash": model_hash(model),
        "counts": {
            "train_id": len(split.train_id),
            "val_id": len(split.val_id),
            "val_ood": len(split.val_ood),
            "test_id": len(split.test_id),
            "test_ood": len(split.test_ood),
        },
        "timings_s": timings,
        "metrics": m_test,
        "metrics_val": m_val,
        "metrics_baseline": m_base,
    }
    manifest["config"]["hidden_dims"] = list(cfg.hidden_dims)
    with open(os.path.join(cfg.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(json.dumps(m_test, sort_keys=True))
    return manifest


def cmd_grid(cfg: ExperimentConfig, cell_scores=None) -> dict:
    """Sweep (lambda, gamma, alpha1, alpha2); pick the best validation AUC
    with ties broken by the lexicographically smaller tuple.

    cell_scores, when given, maps (lam, gamma, a1, a2) -> validation AUC
    and replaces training entirely; used to exercise selection logic.
    """
    os.makedirs(cfg.out, exist_ok=True)
    rows = []
    best = None  # (auc, tuple, test_metrics)
    if cell_scores is None:
        id_ds, ood_ds, split = _split(cfg)
        enc = _build_encoder(cfg, _train_dataset(id_ds, split))
        freeze(enc)
        models = {}
        for lam, a1, a2 in itertools.product(cfg.grid_lambda, cfg.grid_alpha1, cfg.grid_alpha2):
            seed = derive_int(cfg.seed, "grid", repr(lam), repr(a1), repr(a2))
            dcfg = dgp_config(cfg, seed, lam=lam, alpha1=a1, alpha2=a2,
                              class_count=id_ds.class_count)
            models[(lam, a1, a2)] = train_dgp(split.train_id, enc, dcfg)
    for lam, gamma, a1, a2 in itertools.product(
        cfg.grid_lambda, cfg.grid_gamma, cfg.grid_alpha1, cfg.grid_alpha2
    ):
        tup = (lam, gamma, a1, a2)
        if cell_scores is not None:
            val_auc = float(cell_scores(*tup))
            test_m = None
        else:
            model = models[(lam, a1, a2)]
            vt = _val_table(split, model, gamma=gamma)
            val_auc = auc(vt.origin_scores("ID"), vt.origin_scores("OOD"))
            test_m = _score_table(split, model, gamma=gamma).metrics()
        rows.append(tup + (val_auc,))
        if best is None or val_auc > best[0] or (val_auc == best[0] and tup < best[1]):
            best = (val_auc, tup, test_m)
    sweep_path = os.path.join(cfg.out, "sweep.csv")
    with open(sweep_path, "w", encoding="utf-8") as fh:
        fh.write("lambda,gamma,alpha1,alpha2,val_auc\n")
        for r in rows:
            fh.write(",".join(repr(v) for v in r) + "\n")
    result = {
        "best": {"lambda": best[1][0], "gamma": best[1][1], "alpha1": best[1][2],
                 "alpha2": best[1][3], "val_auc": best[0]},
        "rows": len(rows),
        "sweep_csv": sweep_path,
    }
    if best[2] is not None:
        result["test_metrics"] = best[2]
        write_metrics_json(best[2], os.path.join(cfg.out, "metrics.json"))
    with open(os.path.join(cfg.out, "grid_best.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(json.dumps(result["best"], sort_keys=True))
    return result


ABLATION_VARIANTS = [
    ("V0", {"use_ca": False}),  # class-specific branch only
    ("V1", {"use_cs": False}),  # class-agnostic branch only
    ("V2", {"use_distance": False}),  # no distance phase
    ("full", {}),
]


def cmd_ablate(cfg: ExperimentConfig) -> dict:
    """Train the two single-branch variants, the no-distance variant and
    the full model under one seed and report their test metrics."""
    os.makedirs(cfg.out, exist_ok=True)
    id_ds, ood_ds, split = _split(cfg)
    enc = _build_encoder(cfg, _train_dataset(id_ds, split))
    freeze(enc)
    results = {}
    for name, flags in ABLATION_VARIANTS:
        dcfg = dgp_config(cfg, cfg.seed, class_count=id_ds.class_count, **flags)
        model = train_dgp(split.train_id, enc, dcfg)
        table = _score_table(split, model)
        # single-branch variants score on their own branch's distance
        pick = attrgetter({"V0": "md1", "V1": "md2"}.get(name, "score"))
        id_s = [pick(r) for r in table.rows if r.origin == "ID"]
        ood_s = [pick(r) for r in table.rows if r.origin == "OOD"]
        results[name] = metrics_dict(id_s, ood_s)
    path = os.path.join(cfg.out, "ablation.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,auc,aupr,fpr95,overlap\n")
        for name, _ in ABLATION_VARIANTS:
            m = results[name]
            fh.write(f"{name},{m['auc']!r},{m['aupr']!r},{m['fpr95']!r},{m['overlap']!r}\n")
    for name, _ in ABLATION_VARIANTS:
        print(f"{name}: auc={results[name]['auc']:.4f}")
    return results


def cmd_dump_prompts(cfg: ExperimentConfig) -> str:
    """Per-edge prompt weights for both generators, one row per undirected
    pair with forward, reverse and direction-averaged values."""
    if cfg.data_dir:
        ds = _featurize(parse_tu_dataset(cfg.data_dir, cfg.data_name), cfg)
    else:
        ds = build_id_dataset(cfg)
    enc = freeze(_encoder_for(cfg, ds.feature_dim))
    model = load_model(cfg.model_path or os.path.join(cfg.out, "model.ckpt"), enc)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "prompts.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("graph_id,src,dst,w1_fwd,w1_rev,w1_avg,w2_fwd,w2_rev,w2_avg\n")
        for gi, lg in enumerate(ds.graphs):
            g = lg.graph
            w1 = gen_edge_weights(g, model.gen1, enc).values
            w2 = gen_edge_weights(g, model.gen2, enc).values
            pairs = {}
            for e, (s, d) in enumerate(g.edges):
                key = (min(int(s), int(d)), max(int(s), int(d)))
                slot = 0 if (int(s), int(d)) == key else 1
                pairs.setdefault(key, [None, None])[slot] = e
            for (i, j), (fwd, rev) in sorted(pairs.items()):
                cells = [f"g{gi}", str(i), str(j)]
                for w in (w1, w2):
                    f = float(w[fwd]) if fwd is not None else None
                    r = float(w[rev]) if rev is not None else None
                    present = [v for v in (f, r) if v is not None]
                    avg = sum(present) / len(present)
                    cells.append(repr(f) if f is not None else "")
                    cells.append(repr(r) if r is not None else "")
                    cells.append(repr(avg))
                fh.write(",".join(cells) + "\n")
    print(f"prompt weights: {path}")
    return path


# -- entry point ------------------------------------------------------------

_COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "grid": cmd_grid,
    "ablate": cmd_ablate,
    "dump-prompts": cmd_dump_prompts,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dgp",
        description="graph-level out-of-distribution detection via prompted edge weights",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="key=value config file (defaults apply if omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    args = parser.parse_args(argv)
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    _COMMANDS[args.command](cfg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
