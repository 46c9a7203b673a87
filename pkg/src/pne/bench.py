"""Benchmark harness: the embedding x neighborhood grid, the sigma sweep,
the receptive-field variance study, and the aggregated gradient-check
report. All commands emit a CSV plus a JSON sidecar with the fully
resolved configuration.

Reruns with identical config and seeds are byte-identical: rows are sorted
before writing, floats use fixed formatting, and when PNE_DETERMINISTIC=1
the wall-clock column is forced to zero (it is the only nondeterministic
column).
"""

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import numerics
from .datagen import make_classification_dataset, make_segmentation_dataset
from .embeddings import (
    IdentityEmbedding,
    KernelPointEmbedding,
    icosahedron_kernel_points,
    init_mlp_embedding,
)
from .errors import ConfigError
from .geometry import ball_query, cell_average_subsample, farthest_distance_stats, knn
from .network import (
    ClassificationNetwork,
    EmbeddingSpec,
    EncoderConfig,
    NeighborhoodSpec,
    SegmentationNetwork,
)
from .pointconv import ConvLayer, conv_backward, conv_forward, init_conv_layer
from .training import TrainConfig, _evaluate, cross_entropy, train_loop


def deterministic_mode():
    return os.environ.get("PNE_DETERMINISTIC", "") == "1"


def _wall(seconds):
    return 0.0 if deterministic_mode() else seconds


def embedding_spec_from_name(name, cfg):
    if name == "none":
        return EmbeddingSpec(kind="identity")
    kind, variant = name.split(":", 1)
    if kind == "kp":
        return EmbeddingSpec(kind="kp", correlation=variant, sigma_factor=cfg.sigma_factor)
    return EmbeddingSpec(kind="mlp", activation=variant, mlp_dim=cfg.mlp_dim)


def neighborhood_spec_from_name(name, cfg):
    if name == "ball_query":
        return NeighborhoodSpec(kind="ball_query", scale=cfg.ball_scale)
    return NeighborhoodSpec(kind="knn", k=cfg.knn_k)


def encoder_config(cfg, embedding_spec, neighborhood_spec):
    return EncoderConfig(
        initial_cell=cfg.initial_cell,
        widths=list(cfg.widths),
        blocks_per_level=list(cfg.blocks),
        neighborhood=neighborhood_spec,
        embedding=embedding_spec,
        embed_dim=cfg.embed_dim,
        drop_path_max=cfg.drop_path_max,
    )


def train_config(cfg):
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        max_lr=cfg.max_lr,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
        warmup_fraction=cfg.warmup_fraction,
        early_stop_oa=cfg.early_stop_oa,
    )


def build_datasets(cfg):
    """Synthetic datasets per the experiment config; deterministic."""
    if cfg.task == "classification":
        return make_classification_dataset(
            n_per_class_train=cfg.train_per_class,
            n_per_class_test=cfg.test_per_class,
            n_points=cfg.points,
            noise_sigma=cfg.noise_sigma,
            seed=cfg.data_seed,
        )
    scenes = make_segmentation_dataset(
        n_scenes=cfg.num_scenes, n_per_shape=max(32, cfg.points // 4),
        noise_sigma=cfg.noise_sigma, seed=cfg.data_seed,
    )
    split = max(1, int(0.8 * len(scenes)))
    return scenes[:split], scenes[split:]


def prepare_dataset(model, samples, segmentation):
    """Precompute pyramid + neighbor sites per cloud (no augmentation in
    the desk-scale benchmark, so geometry is reusable across epochs)."""
    preps = []
    for item in samples:
        if segmentation:
            cloud = item
            prep = model.prepare(cloud)
        else:
            cloud, label = item
            prep = model.prepare(cloud)
            prep.label = label
        preps.append(prep)
    return preps


def _build_model(cfg, emb_name, neigh_name, seed, num_classes=4):
    spec = embedding_spec_from_name(emb_name, cfg)
    nspec = neighborhood_spec_from_name(neigh_name, cfg)
    enc_cfg = encoder_config(cfg, spec, nspec)
    if cfg.task == "segmentation":
        return SegmentationNetwork(enc_cfg, num_classes, seed=seed)
    return ClassificationNetwork(enc_cfg, num_classes, seed=seed)


def run_cell(cfg, emb_name, neigh_name, seed, datasets=None, preps=None):
    """Train and evaluate one grid cell. Returns a result-row dict."""
    start = time.perf_counter()
    segmentation = cfg.task == "segmentation"
    model = _build_model(cfg, emb_name, neigh_name, seed)
    if preps is None:
        train_raw, test_raw = datasets if datasets is not None else build_datasets(cfg)
        train = prepare_dataset(model, train_raw, segmentation)
        test = prepare_dataset(model, test_raw, segmentation)
    else:
        train, test = preps
    _, log = train_loop(
        model, train, test, train_config(cfg), num_classes=4, seed=seed,
        segmentation=segmentation,
    )
    final = log[-1]
    emb_label, variant = embedding_spec_from_name(emb_name, cfg).label()
    return {
        "neighborhood": neigh_name,
        "embedding": emb_label,
        "variant": variant,
        "seed": seed,
        "oa": final["eval_oa"],
        "macc": final["eval_macc"],
        "miou": final["eval_miou"],
        "wall_seconds": _wall(time.perf_counter() - start),
        "epochs_run": final["epoch"] + 1,
    }


_GRID_COLUMNS = ["neighborhood", "embedding", "variant", "seed",
                 "oa", "macc", "miou", "wall_seconds"]


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path, columns, rows):
    rows = sorted(rows, key=lambda r: tuple(str(r[c]) for c in columns))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def write_sidecar(csv_path, cfg, extra=None):
    """JSON audit trail next to every CSV."""
    payload = {"config": cfg.to_dict()}
    if extra:
        payload.update(extra)
    side = os.path.splitext(csv_path)[0] + ".json"
    with open(side, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _aggregate(rows):
    """Per-cell mean/std over seeds (std absent with < 2 seeds)."""
    cells = {}
    for row in rows:
        if row.get("failed"):
            continue
        key = (row["neighborhood"], row["embedding"], row["variant"])
        cells.setdefault(key, []).append(row)
    out = []
    for (neigh, emb, variant), items in sorted(cells.items()):
        entry = {"neighborhood": neigh, "embedding": emb, "variant": variant,
                 "seeds": [r["seed"] for r in items]}
        for metric in ("oa", "macc", "miou"):
            vals = np.array([r[metric] for r in items])
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) >= 2 else None
        out.append(entry)
    return out


def cmd_grid(cfg, out_dir, threads=1):
    """The embedding x neighborhood grid. Failed cells become explicit rows
    instead of aborting the run."""
    os.makedirs(out_dir, exist_ok=True)
    datasets = build_datasets(cfg)
    segmentation = cfg.task == "segmentation"
    preps = {}
    for neigh in cfg.neighborhoods:
        ref = _build_model(cfg, "none", neigh, seed=0)
        preps[neigh] = (prepare_dataset(ref, datasets[0], segmentation),
                        prepare_dataset(ref, datasets[1], segmentation))
    jobs = [(emb, neigh, seed)
            for neigh in cfg.neighborhoods
            for emb in cfg.embeddings
            for seed in cfg.seeds]

    def run(job):
        emb, neigh, seed = job
        try:
            return run_cell(cfg, emb, neigh, seed, preps=preps[neigh])
        except Exception as exc:  # keep the rest of the grid alive
            label, variant = embedding_spec_from_name(emb, cfg).label()
            return {"neighborhood": neigh, "embedding": label, "variant": variant,
                    "seed": seed, "oa": float("nan"), "macc": float("nan"),
                    "miou": float("nan"), "wall_seconds": 0.0,
                    "failed": True, "error": str(exc)}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    csv_path = os.path.join(out_dir, "grid.csv")
    write_csv(csv_path, _GRID_COLUMNS, rows)
    write_sidecar(csv_path, cfg, extra={
        "aggregate": _aggregate(rows),
        "failures": [r for r in rows if r.get("failed")],
    })
    return csv_path, rows


def triangular_zero_support_fraction(radius, sigma_factor, n_samples=20000, seed=0):
    """Fraction of receptive-field offsets whose Triangular embedding is
    all-zero (support smaller than the receptive field)."""
    from .embeddings import default_kernel_layout

    shell, sigma = default_kernel_layout("ball_query", radius, sigma_factor)
    emb = KernelPointEmbedding(icosahedron_kernel_points(shell), sigma, "triangular")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n_samples, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    offs = v * radius * np.cbrt(rng.uniform(size=(n_samples, 1)))
    e = emb.embed(offs)
    return float(np.mean(np.all(e == 0.0, axis=1)))


def cmd_sigma_sweep(cfg, out_dir):
    """Classification accuracy across sigma factors for the RBF
    correlations, plus the support-coverage measurement."""
    if cfg.task != "classification":
        raise ConfigError("sigma sweep requires the classification task",
                          key="experiment.task")
    os.makedirs(out_dir, exist_ok=True)
    datasets = build_datasets(cfg)
    radius = cfg.ball_scale * cfg.initial_cell
    rows = []
    for correlation in cfg.sweep_correlations:
        for factor in cfg.sweep_factors:
            coverage = triangular_zero_support_fraction(radius, factor)
            sweep_cfg = _with_sigma(cfg, factor)
            for seed in cfg.seeds:
                start = time.perf_counter()
                row = run_cell(sweep_cfg, f"kp:{correlation}", "ball_query", seed,
                               datasets=datasets)
                rows.append({
                    "correlation": correlation,
                    "sigma_factor": factor,
                    "seed": seed,
                    "oa": row["oa"],
                    "triangular_zero_support_fraction": coverage,
                    "wall_seconds": _wall(time.perf_counter() - start),
                })
    csv_path = os.path.join(out_dir, "sigma_sweep.csv")
    write_csv(csv_path, ["correlation", "sigma_factor", "seed", "oa",
                         "triangular_zero_support_fraction", "wall_seconds"], rows)
    write_sidecar(csv_path, cfg)
    return csv_path, rows


def _with_sigma(cfg, factor):
    import copy

    out = copy.deepcopy(cfg)
    out.sigma_factor = factor
    return out


def pyramid_neighbor_stats(clouds, initial_cell, num_levels, method, k=16, scale=2.0):
    """Farthest-distance statistics per pyramid level, aggregated over all
    clouds (per-query normalized distances pooled before the variance)."""
    per_level = [[] for _ in range(num_levels)]
    for cloud in clouds:
        cur = cloud
        for lvl in range(num_levels):
            cell = initial_cell * 2.0**lvl
            cur, _ = cell_average_subsample(cur, cell)
            if method == "knn":
                nl = knn(cur, cur, min(k, len(cur)), grid_cell=cell)
            else:
                nl = ball_query(cur, cur, scale * cell)
            for i in range(nl.num_queries):
                idx = nl.neighbors(i)
                if len(idx) == 0:
                    continue
                d = np.linalg.norm(cur.positions[idx] - cur.positions[i], axis=1)
                per_level[lvl].append(d.max() / cell)
    stats = []
    for lvl, vals in enumerate(per_level):
        vals = np.asarray(vals)
        stats.append((lvl, float(vals.mean()), float(vals.var())))
    return stats


def cmd_neighborhood_stats(cfg, out_dir, num_levels=5):
    """Receptive-field variance study on both synthetic datasets."""
    os.makedirs(out_dir, exist_ok=True)
    cls_train, _ = make_classification_dataset(
        n_per_class_train=10, n_per_class_test=1, n_points=cfg.points,
        noise_sigma=cfg.noise_sigma, seed=cfg.data_seed,
    )
    datasets = {
        "classification": [c for c, _ in cls_train],
        "segmentation": make_segmentation_dataset(
            n_scenes=8, n_per_shape=max(32, cfg.points // 2),
            noise_sigma=cfg.noise_sigma, seed=cfg.data_seed,
        ),
    }
    rows = []
    for name, clouds in datasets.items():
        for method in ("knn", "ball_query"):
            stats = pyramid_neighbor_stats(
                clouds, cfg.initial_cell, num_levels, method,
                k=cfg.knn_k, scale=cfg.ball_scale,
            )
            for lvl, mean, var in stats:
                rows.append({"dataset": name, "method": method, "level": lvl,
                             "mean_norm_farthest": mean, "var_norm_farthest": var})
    csv_path = os.path.join(out_dir, "neighborhood_stats.csv")
    write_csv(csv_path, ["dataset", "method", "level",
                         "mean_norm_farthest", "var_norm_farthest"], rows)
    write_sidecar(csv_path, cfg)
    return csv_path, rows
