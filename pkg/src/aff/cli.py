"""Command-line entry point: ``aff <command> ...``.

Exit codes: 0 success, 1 runtime or training failure, 2 usage or config error.
Reports are byte-identical across runs with the same inputs; timestamps and
timings go to ``*.manifest.json`` files only.
"""
from __future__ import annotations

import argparse
import datetime
import json
import sys
import time
from pathlib import Path

from . import __version__
from .config import default_config, dumps, load, replace_section, to_dict
from .errors import AFFError, ConfigError, SchemaError
from .experiments import STUDIES, desk_config, run_study, write_table, write_values
from .features import FeatureSet
from .io import RunManifest, load_model, read_features, save_model, write_features
from .retrieval import PROTOCOLS, evaluate_protocol
from .synth import generate
from .training import MODES, train


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _config(path):
    return default_config() if path is None else load(path)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_split(data, split):
    path = Path(data) / f"{split}.aff"
    if not path.exists():
        raise ConfigError(f"{path} not found; run gen-data first")
    return read_features(path)


def cmd_gen_data(args):
    cfg = _config(args.config)
    t0 = time.perf_counter()
    ds = generate(cfg.data)
    out = _out_dir(args.out)
    artifacts = {}
    for name, fs in ds.splits().items():
        crc = write_features(fs, out / f"{name}.aff")
        artifacts[f"{name}.aff"] = f"{crc:08x}"
    checksum = ds.checksum()
    RunManifest("gen-data", to_dict(cfg), [cfg.data.seed], checksum, artifacts,
                timing={"generate_s": time.perf_counter() - t0}, created=_now()).write(out / "manifest.json")
    print(checksum)
    return 0


def cmd_train(args):
    cfg = _config(args.config)
    if args.mode:
        cfg = replace_section(cfg, "train", mode=args.mode)
    train_set = _read_split(args.data, "train")
    t0 = time.perf_counter()
    result = train(train_set, cfg.train, cfg.model.mixer(), int(train_set.labels.max()) + 1,
                   cfg.model.encoder_hidden)
    out = _out_dir(args.out)
    arts = {
        "mixer.ckpt": save_model(result.mixer, result.state.mixer_head, out / "mixer.ckpt"),
        "encoder.ckpt": save_model(result.encoder, result.state.query_head, out / "encoder.ckpt"),
    }
    _write_json(out / "train_report.json", result.report.to_dict(timing=False))
    RunManifest("train", to_dict(cfg), [cfg.train.seed], "", {k: f"{v:08x}" for k, v in arts.items()},
                timing={"train_s": time.perf_counter() - t0}, created=_now()).write(out / "manifest.json")
    print(f"disc {result.report.disc_loss[-1]:.6f}" if result.report.disc_loss else "disc -")
    return 0


def cmd_embed(args):
    model, _ = load_model(args.model)
    fs = _read_split(args.data, args.side)
    if model.kind == "encoder" and args.side != "query":
        raise ConfigError("the query encoder only embeds the query side")
    emb = model.embed(fs).astype("float32")
    write_features(FeatureSet([emb], [], fs.ids, fs.labels), args.out)
    return 0


def cmd_eval(args):
    query = _read_split(args.data, "query")
    gallery = _read_split(args.data, "gallery")
    mixer = encoder = None
    models = Path(args.models) if args.models else None
    if args.protocol != "ensemble":
        if models is None:
            raise ConfigError(f"{args.protocol} evaluation needs --models")
        mixer, _ = load_model(models / "mixer.ckpt", ("transformer", "mlp"))
        if args.protocol == "asymmetric":
            encoder, _ = load_model(models / "encoder.ckpt", "encoder")
    top_k = _config(args.config).eval.top_k if args.top_k is None else args.top_k
    if top_k < 0:
        raise ConfigError("--top-k must be >= 0")
    report = evaluate_protocol(query, gallery, args.protocol, mixer, encoder, top_k=top_k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    RunManifest("eval", {"protocol": args.protocol, "top_k": top_k}, [], "",
                {out.name: "", out.with_suffix(".csv").name: ""},
                timing=report.timing, created=_now()).write(out.with_suffix(".manifest.json"))
    print(f"mAP {report.mAP:.6f}")
    return 0


def cmd_ablate(args):
    if args.study not in STUDIES:
        raise ConfigError(f"unknown study {args.study!r}; choose from {', '.join(STUDIES)}")
    cfg = desk_config() if args.config is None else load(args.config)
    t0 = time.perf_counter()
    rows = run_study(args.study, args.seeds, cfg)
    out = _out_dir(args.out)
    write_table(rows, out / f"{args.study}.csv")
    write_values(rows, out / f"{args.study}.json", args.study, cfg)
    RunManifest("ablate", to_dict(cfg), list(range(args.seeds)), "",
                {f"{args.study}.csv": "", f"{args.study}.json": ""},
                timing={"ablate_s": time.perf_counter() - t0}, created=_now()).write(out / f"{args.study}.manifest.json")
    for name, cells in rows:
        print(name, " ".join(f"{m}={c[0]:.4f}±{c[1]:.4f}" for m, c in cells.items()))
    return 0


def cmd_config(args):
    text = dumps(default_config())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="aff", description="Asymmetric feature fusion at desk scale.")
    p.add_argument("--version", action="version", version=f"aff {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train mixer and query encoder")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=MODES)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("embed", help="embed one side of a dataset with a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--side", choices=("query", "gallery"), required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_embed)

    v = sub.add_parser("eval", help="score a retrieval protocol")
    v.add_argument("--protocol", choices=PROTOCOLS, required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--models")
    v.add_argument("--out", required=True)
    v.add_argument("--config")
    v.add_argument("--top-k", type=int, help="truncate rankings (0 = full); overrides [eval] top_k")
    v.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run a seeded ablation study")
    a.add_argument("study")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("config", help="configuration helpers")
    csub = c.add_subparsers(dest="action", required=True)
    d = csub.add_parser("dump-defaults", help="print every config key with its default")
    d.add_argument("--out")
    d.set_defaults(fn=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SchemaError) as exc:
        print(f"aff: error: {exc}", file=sys.stderr)
        return 2
    except (AFFError, OSError) as exc:
        print(f"aff: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
