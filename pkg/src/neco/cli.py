"""Command-line entry point: ``neco {gen-data,train,eval,gradcheck,sort-demo}``.

Configuration is flat ``key = value``; the same keys are accepted as
``--key`` flags (dashes or underscores).  Precedence is built-in defaults,
then the ``--config`` file, then flags.  Failures print one JSON line
``{"error": ..., "message": ...}`` on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

SECTIONS = ("train", "loss", "model", "views")
RUN_KEYS = {"data": None, "out": None, "resume": None}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# flat configuration


def _field_tables():
    from .loss import LossConfig
    from .model import ModelConfig
    from .trainer import TrainConfig
    from .views import ViewConfig

    tables = {}
    for section, cls in (("train", TrainConfig), ("loss", LossConfig), ("model", ModelConfig), ("views", ViewConfig)):
        for f in dataclasses.fields(cls):
            if section == "train" and f.name in SECTIONS:
                continue
            tables[f.name] = (section, f)
    return tables


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key == "top_k":
        return None if raw.lower() in ("all", "none") else int(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    known = set(_field_tables()) | set(RUN_KEYS)
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def build_config(overrides: dict):
    """Resolve flat raw-string overrides into a ``TrainConfig`` and run options."""
    from .loss import LossConfig
    from .model import ModelConfig
    from .trainer import TrainConfig
    from .views import ViewConfig

    tables = _field_tables()
    defaults = {"train": TrainConfig(), "loss": LossConfig(), "model": ModelConfig(), "views": ViewConfig()}
    values = {s: {} for s in SECTIONS}
    run = dict(RUN_KEYS)
    for key, raw in overrides.items():
        if key in RUN_KEYS:
            run[key] = raw
            continue
        if key not in tables:
            raise ConfigError(f"unknown key {key!r}")
        section, f = tables[key]
        default = getattr(defaults[section], f.name)
        values[section][key] = raw if not isinstance(raw, str) else _parse_value(key, raw, default)
    try:
        cfg = TrainConfig(
            **values["train"],
            loss=LossConfig(**values["loss"]),
            model=ModelConfig(**values["model"]),
            views=ViewConfig(**values["views"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, run


def flat_config(cfg) -> dict:
    """Inverse of :func:`build_config`: one flat, JSON-ready table of every key."""
    out = {}
    for key, (section, _) in _field_tables().items():
        obj = cfg if section == "train" else getattr(cfg, section)
        value = getattr(obj, key)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def _add_config_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    for key in _field_tables():
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=argparse.SUPPRESS)


def _collect_overrides(args) -> dict:
    merged = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        merged[k.strip().replace("-", "_")] = v
    for k, v in vars(args).items():
        if k.startswith("cfg_"):
            merged[k[4:]] = v
    for k in ("data", "out", "resume", "seed"):
        if getattr(args, k, None) is not None:
            merged[k] = str(getattr(args, k))
    return merged


# --------------------------------------------------------------------------
# commands


def _load_scenes(data, seed: int):
    from .data import load_or_generate

    return load_or_generate(data, seed=seed)


def cmd_gen_data(args) -> dict:
    from .data import DatasetManifest, split_path, write_dataset

    out = []
    for split, n in (("train", args.scenes), ("val", args.val_scenes)):
        m = DatasetManifest(n, args.classes, args.size, args.size, split, args.seed, args.max_shapes)
        path = split_path(args.out, split)
        write_dataset(path, m)
        out.append({"split": split, "path": path, "manifest": dataclasses.asdict(m)})
    return {"command": "gen-data", "splits": out}


def cmd_train(args) -> dict:
    from .trainer import epoch_means, init_state, load_checkpoint, save_checkpoint, train

    cfg, run = build_config(_collect_overrides(args))
    out = run["out"] or "run"
    os.makedirs(out, exist_ok=True)
    effective = {"config": flat_config(cfg), "data": run["data"], "out": out}
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(effective, fh, indent=2, sort_keys=True)
    train_scenes, _ = _load_scenes(run["data"], cfg.seed)
    start = time.time()
    if run["resume"]:
        state = load_checkpoint(run["resume"], cfg)
        mode = "a"
    else:
        state = init_state(cfg, train_scenes)
        mode = "w"
    with open(os.path.join(out, "train.jsonl"), mode, encoding="utf-8") as log:
        records = train(state, train_scenes, log=log, stop_at=args.stop_at)
    ckpt = os.path.join(out, "checkpoint.bin")
    save_checkpoint(ckpt, state)
    return {
        "command": "train",
        "checkpoint": ckpt,
        "steps": state.step,
        "final_loss": records[-1]["loss"] if records else None,
        "epoch_mean_loss": epoch_means(records),
        "seconds": round(time.time() - start, 3),
        **effective,
    }


def evaluate_params(params, cfg, train_scenes, val_scenes, protocol: str, K=None, k: int = 30,
                    fraction: float = 1.0, seeds=(0,), num_classes: int | None = None) -> dict:
    """One evaluation report for backbone ``params`` (head entries ignored)."""
    import numpy as np

    from .evaluation import eval_clustering, eval_incontext, extract_features

    enc = {n: p for n, p in params.items() if not n.startswith("head.")}
    C = num_classes or int(max(s.mask.max() for s in train_scenes + val_scenes)) + 1
    val = extract_features(enc, val_scenes, cfg.model)
    report = {"protocol": protocol, "fraction": None, "seeds": list(seeds)}
    if protocol in ("cluster", "overcluster"):
        K = K or (C if protocol == "cluster" else 4 * C)
        if protocol == "cluster" and K != C:
            raise ConfigError(f"cluster protocol needs K = num_classes = {C}; use overcluster for K={K}")
        runs = [eval_clustering(val[0], val[1], C, K=K, seed=s) for s in seeds]
        report["K"] = K
        scores = np.array([r[0] for r in runs])
        per_class = np.nanmean(np.array([r[1] for r in runs]), axis=0)
    elif protocol == "incontext":
        train_feats = extract_features(enc, train_scenes, cfg.model)
        mean, std, per_class, n = eval_incontext(enc, train_scenes, val_scenes, cfg.model, C, k=k, fraction=fraction,
                                                 seeds=seeds, train_features=train_feats, val_features=val)
        report.update(k=k, fraction=fraction, seeds=list(seeds) if fraction < 1 else [])
        scores = np.array([mean])
        report["mIoU_mean"], report["mIoU_std"] = mean, std
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    if "mIoU_mean" not in report:
        report["mIoU_mean"] = float(scores.mean())
        report["mIoU_std"] = float(scores.std())
    report["per_class_iou"] = [None if np.isnan(v) else float(v) for v in per_class]
    return report


def cmd_eval(args) -> dict:
    from .trainer import CheckpointError, config_from_dict, init_state, load_checkpoint, read_checkpoint

    if args.checkpoint:
        manifest, _ = read_checkpoint(args.checkpoint)
        cfg = config_from_dict(manifest["config"])
        state = load_checkpoint(args.checkpoint, cfg)
    else:
        cfg, _ = build_config(_collect_overrides(args))
        state = None
    train_scenes, val_scenes = _load_scenes(args.data, cfg.seed)
    if state is None:
        state = init_state(cfg, train_scenes)
    params = state.teacher if args.weights == "teacher" else state.student
    if not params:
        raise CheckpointError("checkpoint holds no parameters")
    seeds = [int(s) for s in str(args.seeds).split(",")] if args.seeds else [0]
    report = evaluate_params(params, cfg, train_scenes, val_scenes, args.protocol, K=args.K, k=args.k,
                             fraction=args.fraction, seeds=seeds)
    report.update(weights=args.weights, checkpoint=args.checkpoint, data=args.data, step=state.step,
                  config=flat_config(cfg))
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return report


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_gradcheck

    sizes = [int(s) for s in str(args.sizes).split(",")]
    rows = run_gradcheck(seed=args.seed, sizes=sizes, instances=args.instances)
    for r in rows:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['component']:<28} max_rel_err={r['max_rel_err']:.2e}", file=sys.stderr)
    return {"command": "gradcheck", "seed": args.seed, "sizes": sizes, "tolerance": 1e-5,
            "passed": all(r["pass"] for r in rows), "checks": rows}


def cmd_sort_demo(args) -> dict:
    import numpy as np

    from .autodiff import Tensor
    from .sortnet import RelaxFamily, build_network, soft_sort

    values = [float(v) for v in args.values.split(",")]
    net = build_network(args.network, len(values))
    res = soft_sort(Tensor(values), net, RelaxFamily(args.relax, args.beta, args.lam))
    np.set_printoptions(precision=6, suppress=True)
    print(f"Q =\n{res.perm.data}", file=sys.stderr)
    return {"command": "sort-demo", "values": values, "network": args.network, "relax": args.relax, "beta": args.beta,
            "sorted": res.sorted_values.data.tolist(), "Q": res.perm.data.tolist()}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neco", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/val synthetic splits")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=512)
    g.add_argument("--val-scenes", type=int, default=128)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--max-shapes", type=int, default=4)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="warm start then NeCo post-pretraining")
    t.add_argument("--data", default=None, help="dataset root (default: generate in memory)")
    t.add_argument("--out", default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, default=None, help="stop after this global step")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="frozen-feature evaluation report")
    e.add_argument("--checkpoint", default=None, help="default: warm-started init for the given config")
    e.add_argument("--data", default=None)
    e.add_argument("--protocol", choices=("cluster", "overcluster", "incontext"), default="cluster")
    e.add_argument("--K", type=int, default=None)
    e.add_argument("--k", type=int, default=30)
    e.add_argument("--fraction", type=float, default=1.0)
    e.add_argument("--seeds", default="0", help="comma-separated")
    e.add_argument("--weights", choices=("teacher", "student"), default="teacher")
    e.add_argument("--out", default=None, help="also write the report here")
    _add_config_flags(e)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable component")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--sizes", default="2,4,8,16")
    c.add_argument("--instances", type=int, default=10)
    c.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("sort-demo", help="relaxed sort of one row")
    s.add_argument("--values", required=True, help="comma-separated reals")
    s.add_argument("--beta", type=float, default=100.0)
    s.add_argument("--network", choices=("odd_even", "bitonic"), default="bitonic")
    s.add_argument("--relax", choices=("logistic", "arctan"), default="logistic")
    s.add_argument("--lam", type=float, default=0.25)
    s.set_defaults(fn=cmd_sort_demo)
    return p


def _cap_threads(n):
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _cap_threads(args.threads)
    try:
        result = args.fn(args)
    except (ConfigError, ValueError, OSError, RuntimeError, FloatingPointError, IndexError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    if result.get("command") == "gradcheck" and not result["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
