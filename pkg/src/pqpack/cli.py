"""Command-line interface.

Subcommands mirror the pipeline stages: ``train``, ``compress``,
``bundle``, ``run``, ``swap-bench``, ``report``, plus ``pipeline`` which
drives the whole experiment and exits nonzero if any built-in check
fails.  Stage commands share a run directory; CLI flags override config
keys.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bundle as bundle_mod
from . import harness, persist, runtime as rt
from .nn import evaluate
from .pool import pool_weights
from .pq import learn_codebooks
from .quant import to_f16_pair


def _add_common(p, *, method=False):
    p.add_argument("--config", required=True, help="suite config YAML")
    p.add_argument("--run-dir", default="runs/latest", help="artifact directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--arena-bytes", type=int, default=None)
    p.add_argument("--holdout", default=None, help="task excluded from codebook learning")
    if method:
        p.add_argument("--method", choices=list(harness.METHODS), default="yono")


def _load_cfg(args) -> harness.SuiteConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "k": getattr(args, "k", None),
        "epsilon": getattr(args, "epsilon", None),
        "arena_bytes": getattr(args, "arena_bytes", None),
        "holdout": getattr(args, "holdout", None),
    }
    return harness.load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir = Path(args.run_dir)
    (run_dir / "models").mkdir(parents=True, exist_ok=True)
    tasks = cfg.tasks if args.task is None else [cfg.task(args.task)]
    metrics = {}
    for task in tasks:
        data = harness.generate_task_data(cfg, task, trial=0)
        model = harness.train_original(cfg, task, data, trial=0)
        acc = evaluate(model, data.test.x, data.test.y)
        persist.save_model(run_dir / "models" / f"{task.name}.npz", model)
        metrics[task.name] = {"test_accuracy": acc,
                              "params": model.num_params()}
        print(f"trained {task.name}: test accuracy {acc:.3f} "
              f"({model.num_params()} params)")
    (run_dir / "train_metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def _load_originals(cfg, run_dir: Path):
    models = {}
    for task in cfg.tasks:
        path = run_dir / "models" / f"{task.name}.npz"
        if not path.exists():
            raise SystemExit(
                f"missing {path}; run `pqpack train --config ...` first"
            )
        models[task.name] = persist.load_model(path)
    return models


def cmd_compress(args) -> int:
    cfg = _load_cfg(args)
    run_dir = Path(args.run_dir)
    (run_dir / "encoded").mkdir(parents=True, exist_ok=True)
    originals = _load_originals(cfg, run_dir)
    training = cfg.training_tasks()
    pair = learn_codebooks(
        pool_weights([originals[t.name] for t in training]), k=cfg.k,
        seed=cfg.seed,
    )
    persist.save_pair(run_dir / "codebooks.npz", pair)
    method = args.method
    targets = list(training)
    if method == "yono" and cfg.holdout_task() is not None:
        targets.append(cfg.holdout_task())
    for task in targets:
        data = harness.generate_task_data(cfg, task, trial=0)
        out = harness.run_method(cfg, method, originals[task.name], data,
                                 pair, trial=0,
                                 task_idx=cfg.tasks.index(task))
        if out.result is None:
            print(f"{task.name} [{method}]: accuracy {out.acc_test:.3f}")
            continue
        stem = run_dir / "encoded" / f"{task.name}_{method}"
        persist.save_result(f"{stem}.npz", out.result)
        out.result.report.write_jsonl(f"{stem}.trace.jsonl")
        if out.pair is not None:
            persist.save_pair(f"{stem}.pair.npz", out.pair)
        print(
            f"{task.name} [{method}]: accuracy {out.acc_test:.3f}, "
            f"escape layers {out.result.finetune_set}, "
            f"status {out.result.report.status}"
        )
    return 0


def cmd_bundle(args) -> int:
    cfg = _load_cfg(args)
    run_dir = Path(args.run_dir)
    originals = _load_originals(cfg, run_dir)
    pair = persist.load_pair(run_dir / "codebooks.npz")
    f16 = to_f16_pair(pair)
    method = args.method
    ems = []
    names = [t.name for t in cfg.training_tasks()]
    if method == "yono" and cfg.holdout_task() is not None:
        names.append(cfg.holdout)
    for name in names:
        path = run_dir / "encoded" / f"{name}_{method}.npz"
        if not path.exists():
            raise SystemExit(
                f"missing {path}; run `pqpack compress --method {method}` first"
            )
        result = persist.load_result(path)
        task = cfg.task(name)
        data = harness.generate_task_data(cfg, task, trial=0)
        ems.append(bundle_mod.build_encoded_model(
            result.model, result.codes, result.finetune_set, f16,
            data.train.x, originals[name].param_bytes_f32(),
        ))
    blob = bundle_mod.serialize(ems, f16)
    out_path = Path(args.out) if args.out else run_dir / "bundle.ynb"
    out_path.write_bytes(blob)
    rep = bundle_mod.compression_ratio([originals[n] for n in names], blob)
    print(f"wrote {out_path} ({len(blob)} bytes)")
    print(f"compression ratio vs f32 originals: {rep.ratio:.2f}x "
          f"({rep.total_original_bytes} -> {rep.total_bundle_bytes} bytes)")
    for m in rep.per_model:
        print(f"  {m.name}: {m.original_bytes} -> {m.packed_bytes} B packed "
              f"(+{m.amortized_bytes - m.packed_bytes:.0f} B shared)")
    return 0


def cmd_run(args) -> int:
    blob = Path(args.bundle).read_bytes()
    b = bundle_mod.parse_bundle(blob)
    arena = rt.Arena(args.arena_bytes)
    resident, stats = rt.load_model(b, args.model, arena)
    print(f"loaded {args.model}: read {stats.bytes_read} B, "
          f"wrote {stats.bytes_written} B, arena high water "
          f"{arena.high_water}/{arena.capacity} B")
    if args.idx_images and args.idx_labels:
        from .datasets import load_idx_dataset

        ds = load_idx_dataset(args.idx_images, args.idx_labels)
        x, y = ds.x, ds.y
    elif args.config:
        cfg = _load_cfg(args)
        task = cfg.task(args.model)
        data = harness.generate_task_data(cfg, task, trial=0)
        x, y = data.test.x, data.test.y
    else:
        print("no evaluation data given (--config or --idx-images/--idx-labels)")
        return 0
    scores = rt.infer(resident, x[:args.samples])
    acc = float((scores.argmax(axis=1) == y[:args.samples]).mean())
    print(f"int8 accuracy on {min(len(x), args.samples)} samples: {acc:.3f}")
    return 0


def cmd_swap_bench(args) -> int:
    blob = Path(args.bundle).read_bytes()
    b = bundle_mod.parse_bundle(blob)
    arena = rt.Arena(args.arena_bytes)
    rng = np.random.default_rng(args.seed or 0)
    names = b.names
    reads = 0
    for i in range(args.cycles):
        name = names[int(rng.integers(len(names)))]
        resident, stats = rt.load_model(b, name, arena)
        reads += stats.bytes_read
        em = b.parse_model(name)
        probe = rng.standard_normal((1, *em.input_shape)).astype(np.float32)
        rt.infer(resident, probe)
    print(f"{args.cycles} random swaps over {len(names)} models")
    print(f"arena high water {arena.high_water}/{arena.capacity} B")
    print(f"total bundle bytes read {reads} "
          f"({reads // max(args.cycles, 1)} B/swap)")
    if arena.high_water > arena.capacity:
        print("FAIL: arena exceeded capacity")
        return 1
    return 0


def cmd_report(args) -> int:
    from .report import render_tables, validate_report

    run_dir = Path(args.run_dir)
    path = run_dir / "report.json"
    if not path.exists():
        raise SystemExit(f"missing {path}; run `pqpack pipeline` first")
    report = json.loads(path.read_text())
    validate_report(report)
    text = render_tables(report)
    (run_dir / "report.txt").write_text(text)
    print(text)
    return 0 if report.get("checks", {}).get("all_passed", True) else 1


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    if args.trials is not None:
        cfg.trials = args.trials
    artifacts = harness.run_pipeline(cfg, run_dir=args.run_dir)
    from .report import render_tables

    print(render_tables(artifacts.report))
    print(f"elapsed: {artifacts.elapsed_seconds:.1f} s")
    ok = artifacts.report["checks"].get("all_passed", False)
    if not ok:
        print("one or more checks failed", file=sys.stderr)
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pqpack",
        description=("Compress many small neural nets into one shared "
                     "codebook pair and run them from a fixed memory arena"),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the original task models")
    _add_common(p)
    p.add_argument("--task", default=None, help="train a single task")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="learn codebooks and optimize models")
    _add_common(p, method=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("bundle", help="serialize the deployment bundle")
    _add_common(p, method=True)
    p.add_argument("--out", default=None, help="bundle output path")
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("run", help="load one bundled model and run inference")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--arena-bytes", type=int, default=524288)
    p.add_argument("--config", default=None)
    p.add_argument("--run-dir", default="runs/latest")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--holdout", default=None)
    p.add_argument("--idx-images", default=None)
    p.add_argument("--idx-labels", default=None)
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("swap-bench", help="random swap/infer stress run")
    p.add_argument("--bundle", required=True)
    p.add_argument("--arena-bytes", type=int, default=524288)
    p.add_argument("--cycles", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_swap_bench)

    p = sub.add_parser("report", help="validate and render a run report")
    p.add_argument("--run-dir", default="runs/latest")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="full experiment: train, compress, "
                                        "bundle, runtime exercise, report")
    _add_common(p)
    p.add_argument("--trials", type=int, default=None)
    p.set_defaults(func=cmd_pipeline)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
