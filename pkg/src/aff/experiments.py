"""Seeded ablation studies on the synthetic benchmark.

Each study maps one seed to a list of ``(row, {metric: value})`` pairs; the
runner repeats that over seeds (optionally in worker processes, capped by
``AFF_THREADS``) and reduces every cell to mean and sample standard deviation.

Studies use ``desk_config()`` unless given a config: the default training
schedule (a few optimizer steps on a 140-item training split) is far too
short to train anything at this scale, so the studies raise the learning rate
and the epoch count.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .config import default_config, replace_section, to_dict
from .errors import ConfigError
from .retrieval import evaluate_protocol, family_embeddings, mean_average_precision
from .synth import generate, inject_noise_families, weak_family_bank, with_families
from .training import train

DESK_TRAIN = {"lr": 0.02, "epochs": 100, "batch_size": 16}
MOMENTA = (0.0, 0.5, 0.9, 0.99, 0.999)


def desk_config():
    return replace_section(default_config(), "train", **DESK_TRAIN)


class SeedRun:
    """Datasets and trained models for one seed, built lazily and memoised."""

    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.seed = seed
        self._data = {}
        self._fits = {}

    def data(self, variant="default"):
        if variant not in self._data:
            spec = replace(self.cfg.data, seed=self.cfg.data.seed + self.seed)
            if "weak" in variant:
                spec = with_families(spec, weak_family_bank())
            ds = generate(spec)
            if "noise" in variant:
                ds = inject_noise_families(ds, 1)
            self._data[variant] = ds
        return self._data[variant]

    def fit(self, variant="default", families=None, model=None, **train_changes):
        key = (variant, families, tuple(sorted((model or {}).items())), tuple(sorted(train_changes.items())))
        if key not in self._fits:
            ds = self.subset(variant, families)
            tc = replace(self.cfg.train, seed=self.cfg.train.seed + self.seed, **train_changes)
            mc = replace(self.cfg.model, **(model or {}))
            self._fits[key] = train(ds.train, tc, mc.mixer(), ds.num_classes, mc.encoder_hidden)
        return self._fits[key]

    def subset(self, variant="default", families=None):
        ds = self.data(variant)
        if families is None:
            return ds
        g, l = families
        return ds.map_sets(lambda fs: fs.select_families(list(g), list(l)))

    def scores(self, variant="default", families=None, model=None, **train_changes):
        """Symmetric and asymmetric mAP of one trained configuration."""
        ds = self.subset(variant, families)
        r = self.fit(variant, families, model, **train_changes)
        top_k = self.cfg.eval.top_k
        return {
            "symmetric": evaluate_protocol(ds.query, ds.gallery, "symmetric", r.mixer, top_k=top_k).mAP,
            "asymmetric": evaluate_protocol(ds.query, ds.gallery, "asymmetric", r.mixer, r.encoder,
                                            top_k=top_k).mAP,
        }

    def ensemble(self, variant="default"):
        ds = self.data(variant)
        return evaluate_protocol(ds.query, ds.gallery, "ensemble", top_k=self.cfg.eval.top_k).mAP

    def raw_family(self, index, variant="default"):
        ds = self.data(variant)
        ap = mean_average_precision(family_embeddings(ds.query, index), family_embeddings(ds.gallery, index),
                                    ds.query.labels, ds.gallery.labels, top_k=self.cfg.eval.top_k)
        return float(np.nanmean(ap))


def _family_names(ds):
    return [f"g{i}" for i in range(len(ds.train.globals))] + [f"l{i}" for i in range(len(ds.train.locals))]


def mixer_variants(run):
    return [
        ("ensemble", {"symmetric": run.ensemble()}),
        ("mlp", run.scores(mixer="mlp")),
        ("transformer", run.scores()),
        ("transformer-unshared", run.scores(model={"share_weights": False})),
    ]


def _combo(names, n_globals, picked):
    g = tuple(i for i in picked if i < n_globals)
    l = tuple(i - n_globals for i in picked if i >= n_globals)
    return "+".join(names[i] for i in picked), (g, l)


def feature_combos(run):
    """Every family alone, then families added one at a time in schema order."""
    ds = run.data()
    names = _family_names(ds)
    ng = len(ds.train.globals)
    combos = [[i] for i in range(len(names))] + [list(range(k)) for k in range(2, len(names) + 1)]
    rows = []
    for picked in combos:
        label, fams = _combo(names, ng, picked)
        rows.append((label, run.scores(families=fams)))
    return rows


def noise(run):
    """Ensemble and mixer with weak families and/or one pure-noise family added."""
    rows = []
    for variant in ("default", "weak", "noise", "weak+noise"):
        rows.append((f"{variant}/ensemble", {"mAP": run.ensemble(variant)}))
        rows.append((f"{variant}/mixer", {"mAP": run.scores(variant)["symmetric"]}))
    return rows


def momentum(run):
    return [(f"alpha={a:g}", run.scores(momentum=a)) for a in MOMENTA]


def train_mode(run):
    return [("two-stage", run.scores(mode="two-stage")), ("joint", run.scores(mode="joint"))]


def decoupling(run):
    return [("coupled", run.scores(mode="coupled")), ("decoupled", run.scores(mode="joint"))]


STUDIES = {
    "mixer-variants": mixer_variants,
    "feature-combos": feature_combos,
    "noise": noise,
    "momentum": momentum,
    "train-mode": train_mode,
    "decoupling": decoupling,
}


def _run_seed(study, cfg, seed):
    return STUDIES[study](SeedRun(cfg, seed))


def worker_count(n_jobs):
    env = os.environ.get("AFF_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"AFF_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ConfigError("AFF_THREADS must be >= 1")
    return max(1, min(cap, n_jobs))


def map_seeds(fn, seeds, *args):
    """``[fn(*args, s) for s in seeds]``, fanned out to worker processes when allowed."""
    seeds = list(seeds)
    workers = worker_count(len(seeds))
    if workers == 1:
        return [fn(*args, s) for s in seeds]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, *[[a] * len(seeds) for a in args], seeds))


def aggregate(per_seed):
    """Reduce per-seed row lists to ``[(row, {metric: (mean, std, values)})]`` in row order."""
    rows = []
    for i, (name, _) in enumerate(per_seed[0]):
        cells = {}
        for metric in per_seed[0][i][1]:
            vals = [float(seed_rows[i][1][metric]) for seed_rows in per_seed]
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            cells[metric] = (float(np.mean(vals)), std, vals)
        rows.append((name, cells))
    return rows


def run_study(study, seeds=5, cfg=None):
    if study not in STUDIES:
        raise ConfigError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    if seeds < 1:
        raise ConfigError("need at least one seed")
    cfg = desk_config() if cfg is None else cfg
    return aggregate(map_seeds(_run_seed, range(seeds), study, cfg))


def write_table(rows, path):
    metrics = []
    for _, cells in rows:
        metrics += [m for m in cells if m not in metrics]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for name, cells in rows:
            n = len(next(iter(cells.values()))[2])
            line = [name, n]
            for m in metrics:
                line += [f"{cells[m][0]:.6f}", f"{cells[m][1]:.6f}"] if m in cells else ["", ""]
            w.writerow(line)


def write_values(rows, path, study, cfg):
    doc = {"study": study, "config": to_dict(cfg),
           "rows": [{"row": name, **{m: c[2] for m, c in cells.items()}} for name, cells in rows]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _trend_seed(cfg, seed):
    run = SeedRun(cfg, seed)
    ds = run.data()
    ng, nl = len(ds.train.globals), len(ds.train.locals)
    singles = [((i,), ()) for i in range(ng)] + [((), (j,)) for j in range(nl)]
    main = run.scores()
    return {
        "mixer": main["symmetric"],
        "asym": main["asymmetric"],
        "best_single": max(run.scores(families=f)["symmetric"] for f in singles),
        "mlp": run.scores(mixer="mlp")["symmetric"],
        "ensemble": run.ensemble(),
        "ensemble_noise": run.ensemble("noise"),
        "mixer_noise": run.scores("noise")["symmetric"],
        "asym_alpha0": run.scores(momentum=0.0)["asymmetric"],
        "asym_two_stage": run.scores(mode="two-stage")["asymmetric"],
        "asym_coupled": run.scores(mode="coupled")["asymmetric"],
    }


def trend_suite(seeds=5, cfg=None):
    """Seed-mean of every quantity the directional checks compare."""
    cfg = desk_config() if cfg is None else cfg
    per_seed = map_seeds(_trend_seed, range(seeds), cfg)
    return {k: float(np.mean([p[k] for p in per_seed])) for k in per_seed[0]}, per_seed
