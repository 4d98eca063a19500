"""Experiment harness: builds the task suite, trains the originals,
learns the shared codebooks, runs every compression method, emits the
deployment bundle, and exercises the runtime.

Methods are flag combinations over one optimizer:

* ``pq-m``    shared codebooks, initial finetune only (no EM iterations)
* ``pq-mopt`` shared codebooks plus the EM loop, no layer heuristic
* ``yono``    the full pipeline including the layer-selection heuristic
* ``pq-s``    per-model codebooks (same vector settings), initial finetune
* ``int8``    post-training per-tensor weight quantization
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import bundle as bundle_mod
from . import runtime as rt
from .datasets import GENERATORS, LabeledDataset
from .nn import (
    LayerKind,
    LayerSpec,
    ModelGraph,
    TrainConfig,
    build_model,
    evaluate,
    train,
)
from .optimize import (
    HEURISTIC_NONE,
    HEURISTIC_OURS,
    OptimizeConfig,
    OptimizeResult,
    optimize_model,
)
from .pool import pool_weights
from .pq import CodebookPair, learn_codebooks
from .quant import dequantize, quantize, calibrate, to_f16_pair

METHODS = ("original", "int8", "pq-s", "pq-m", "pq-mopt", "yono")
ORDERING_SLACK = 0.005  # absolute accuracy slack on the baseline ordering


# ----------------------------------------------------------------------
# architectures


def spiral_mlp(num_classes: int, seed: int) -> ModelGraph:
    specs = [
        LayerSpec(LayerKind.FULLY_CONNECTED, 1, in_features=2, out_features=128),
        LayerSpec(LayerKind.RELU, 2),
        LayerSpec(LayerKind.FULLY_CONNECTED, 3, in_features=128, out_features=128),
        LayerSpec(LayerKind.RELU, 4),
        LayerSpec(LayerKind.FULLY_CONNECTED, 5, in_features=128, out_features=128),
        LayerSpec(LayerKind.RELU, 6),
        LayerSpec(LayerKind.FULLY_CONNECTED, 7, in_features=128, out_features=64),
        LayerSpec(LayerKind.RELU, 8),
        LayerSpec(LayerKind.FULLY_CONNECTED, 9, in_features=64,
                  out_features=num_classes),
    ]
    return build_model("spiral-mlp", specs, seed)


def digits_cnn(num_classes: int, seed: int) -> ModelGraph:
    specs = [
        LayerSpec(LayerKind.CONV3X3, 1, in_channels=2, out_channels=24, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 2, in_channels=24),
        LayerSpec(LayerKind.RELU, 3),
        LayerSpec(LayerKind.MAX_POOL, 4, pool_size=2),
        LayerSpec(LayerKind.CONV3X3, 5, in_channels=24, out_channels=48, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 6, in_channels=48),
        LayerSpec(LayerKind.RELU, 7),
        LayerSpec(LayerKind.MAX_POOL, 8, pool_size=2),
        LayerSpec(LayerKind.CONV1X1, 9, in_channels=48, out_channels=128),
        LayerSpec(LayerKind.RELU, 10),
        LayerSpec(LayerKind.AVG_POOL, 11, pool_size=2),
        LayerSpec(LayerKind.FLATTEN, 12),
        LayerSpec(LayerKind.FULLY_CONNECTED, 13, in_features=128,
                  out_features=num_classes),
        LayerSpec(LayerKind.SOFTMAX_CLASSIFIER, 14),
    ]
    return build_model("digits-cnn", specs, seed)


def textures_cnn(num_classes: int, seed: int) -> ModelGraph:
    specs = [
        LayerSpec(LayerKind.CONV3X3, 1, in_channels=1, out_channels=16, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 2, in_channels=16),
        LayerSpec(LayerKind.RELU, 3),
        LayerSpec(LayerKind.MAX_POOL, 4, pool_size=2),
        LayerSpec(LayerKind.CONV3X3, 5, in_channels=16, out_channels=32, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 6, in_channels=32),
        LayerSpec(LayerKind.RELU, 7),
        LayerSpec(LayerKind.MAX_POOL, 8, pool_size=2),
        LayerSpec(LayerKind.CONV3X3, 9, in_channels=32, out_channels=64, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 10, in_channels=64),
        LayerSpec(LayerKind.RELU, 11),
        LayerSpec(LayerKind.AVG_POOL, 12, pool_size=4),
        LayerSpec(LayerKind.FLATTEN, 13),
        LayerSpec(LayerKind.FULLY_CONNECTED, 14, in_features=64,
                  out_features=num_classes),
    ]
    return build_model("textures-cnn", specs, seed)


def shapes_cnn(num_classes: int, seed: int) -> ModelGraph:
    specs = [
        LayerSpec(LayerKind.CONV3X3, 1, in_channels=2, out_channels=16, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 2, in_channels=16),
        LayerSpec(LayerKind.RELU, 3),
        LayerSpec(LayerKind.CONV1X1, 4, in_channels=16, out_channels=32),
        LayerSpec(LayerKind.RELU, 5),
        LayerSpec(LayerKind.MAX_POOL, 6, pool_size=2),
        LayerSpec(LayerKind.CONV3X3, 7, in_channels=32, out_channels=48, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 8, in_channels=48),
        LayerSpec(LayerKind.RELU, 9),
        LayerSpec(LayerKind.MAX_POOL, 10, pool_size=2),
        LayerSpec(LayerKind.FLATTEN, 11),
        LayerSpec(LayerKind.FULLY_CONNECTED, 12, in_features=192,
                  out_features=num_classes),
    ]
    return build_model("shapes-cnn", specs, seed)


ARCHITECTURES = {
    "spiral-mlp": spiral_mlp,
    "digits-cnn": digits_cnn,
    "textures-cnn": textures_cnn,
    "shapes-cnn": shapes_cnn,
}


# ----------------------------------------------------------------------
# configuration


@dataclass
class TaskConfig:
    name: str
    generator: str
    arch: str
    samples: int = 2000
    holdout_samples: int = 400
    test_fraction: float = 0.1
    noise: float | None = None
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-3
    idx_images: str | None = None
    idx_labels: str | None = None


@dataclass
class SuiteConfig:
    run_name: str = "desk"
    seed: int = 0
    trials: int = 5
    k: int = 256
    epsilon: float = 0.03
    arena_bytes: int = 524288
    finetune_epochs: int = 5
    max_outer_iters: int | None = None
    holdout: str | None = None
    methods: tuple = METHODS
    tasks: list[TaskConfig] = field(default_factory=list)

    def training_tasks(self) -> list[TaskConfig]:
        return [t for t in self.tasks if t.name != self.holdout]

    def holdout_task(self) -> TaskConfig | None:
        for t in self.tasks:
            if t.name == self.holdout:
                return t
        return None

    def task(self, name: str) -> TaskConfig:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(f"no task named {name!r}")


def load_config(path, overrides: dict | None = None) -> SuiteConfig:
    """Parse the YAML suite config; ``overrides`` maps SuiteConfig field
    names to CLI-supplied values (None entries are ignored)."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    tasks = [TaskConfig(**t) for t in raw.pop("tasks", [])]
    methods = tuple(raw.pop("methods", METHODS))
    cfg = SuiteConfig(tasks=tasks, methods=methods, **raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    unknown = [m for m in cfg.methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods in config: {unknown}")
    if cfg.holdout is not None:
        cfg.task(cfg.holdout)
    for t in cfg.tasks:
        if t.generator not in GENERATORS and t.generator != "idx":
            raise ValueError(f"task {t.name}: unknown generator {t.generator!r}")
        if t.generator == "idx" and not (t.idx_images and t.idx_labels):
            raise ValueError(f"task {t.name}: idx tasks need idx_images and "
                             "idx_labels paths")
        if t.arch not in ARCHITECTURES:
            raise ValueError(f"task {t.name}: unknown arch {t.arch!r}")
    return cfg


def _seed_for(cfg_seed: int, trial: int, task_idx: int, use: int) -> int:
    ss = np.random.SeedSequence([cfg_seed & 0x7FFFFFFF, trial, task_idx, use])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


# ----------------------------------------------------------------------
# per-task data and originals


@dataclass
class TaskData:
    train: LabeledDataset
    test: LabeledDataset
    holdout: LabeledDataset  # clean split, never used as a stopping signal


def generate_task_data(cfg: SuiteConfig, task: TaskConfig, trial: int) -> TaskData:
    task_idx = cfg.tasks.index(task)
    seed = _seed_for(cfg.seed, trial, task_idx, 0)
    if task.generator == "idx":
        from .datasets import load_idx_dataset

        ds = load_idx_dataset(task.idx_images, task.idx_labels, name=task.name)
        holdout_n = min(task.holdout_samples, len(ds) // 5)
        main = LabeledDataset(ds.x[holdout_n:], ds.y[holdout_n:],
                              ds.num_classes, task.name)
        hold = LabeledDataset(ds.x[:holdout_n], ds.y[:holdout_n],
                              ds.num_classes, task.name + "/holdout")
    else:
        gen = GENERATORS[task.generator]
        kwargs = {} if task.noise is None else {"noise": task.noise}
        ds = gen(task.samples + task.holdout_samples, seed=seed, **kwargs)
        main = LabeledDataset(ds.x[:task.samples], ds.y[:task.samples],
                              ds.num_classes, task.name)
        hold = LabeledDataset(ds.x[task.samples:], ds.y[task.samples:],
                              ds.num_classes, task.name + "/holdout")
    tr, te = main.split(task.test_fraction, seed=seed + 1)
    return TaskData(train=tr, test=te, holdout=hold)


def train_original(cfg: SuiteConfig, task: TaskConfig, data: TaskData,
                   trial: int) -> ModelGraph:
    task_idx = cfg.tasks.index(task)
    model = ARCHITECTURES[task.arch](data.train.num_classes,
                                     _seed_for(cfg.seed, trial, task_idx, 1))
    model.name = task.name
    tc = TrainConfig(
        learning_rate=task.learning_rate,
        epochs=task.epochs,
        batch_size=task.batch_size,
        seed=_seed_for(cfg.seed, trial, task_idx, 2),
    )
    train(model, data.train.x, data.train.y, tc)
    return model


# ----------------------------------------------------------------------
# methods


def int8_weight_roundtrip(model: ModelGraph) -> ModelGraph:
    """Post-training weight quantization baseline: every weight tensor
    goes through a per-tensor int8 round trip (biases and BN stats stay
    float)."""
    out = model.copy()
    for idx in out.codable_layers():
        w = out.params[idx].weight
        qp = calibrate(w)
        out.params[idx].weight = dequantize(quantize(w, qp), qp).reshape(w.shape)
    return out


def int8_baseline_bytes(model: ModelGraph) -> int:
    """Storage of the int8 baseline: int8 weights, f32 everything else,
    plus per-tensor quantization parameters."""
    total = 0
    for idx, p in model.params.items():
        spec = model.spec(idx)
        for name, arr in p.named_arrays():
            if name == "weight" and spec.kind != LayerKind.BATCH_NORM:
                total += arr.size + 5
            else:
                total += arr.size * 4
    return total


def _optimize_cfg(cfg: SuiteConfig, method: str, seed: int) -> OptimizeConfig:
    if method == "yono":
        heuristic, iters = HEURISTIC_OURS, cfg.max_outer_iters
    elif method == "pq-mopt":
        heuristic, iters = HEURISTIC_NONE, cfg.max_outer_iters
    elif method in ("pq-m", "pq-s"):
        heuristic, iters = HEURISTIC_NONE, 0
    else:
        raise ValueError(f"method {method!r} has no optimizer configuration")
    return OptimizeConfig(
        epsilon=cfg.epsilon,
        max_outer_iters=iters,
        finetune_epochs_per_step=cfg.finetune_epochs,
        heuristic=heuristic,
        seed=seed,
    )


def _per_model_pair(model: ModelGraph, k: int, seed: int) -> CodebookPair:
    pools = pool_weights([model])
    rows = [p.training_rows().shape[0] for p in pools if p.num_rows > 0]
    k_fit = k
    limit = min(rows)
    while k_fit > limit:
        k_fit //= 2
    if k_fit < 2:
        raise ValueError(f"model {model.name}: too few rows for any codebook")
    return learn_codebooks(pools, k=k_fit, seed=seed)


@dataclass
class MethodOutcome:
    method: str
    acc_test: float
    acc_holdout: float
    result: OptimizeResult | None = None
    pair: CodebookPair | None = None  # pq-s only (per-model)


def run_method(cfg: SuiteConfig, method: str, model: ModelGraph,
               data: TaskData, pair: CodebookPair, trial: int,
               task_idx: int) -> MethodOutcome:
    seed = _seed_for(cfg.seed, trial, task_idx, 4)
    if method == "original":
        return MethodOutcome(
            method, evaluate(model, data.test.x, data.test.y),
            evaluate(model, data.holdout.x, data.holdout.y),
        )
    if method == "int8":
        q = int8_weight_roundtrip(model)
        return MethodOutcome(
            method, evaluate(q, data.test.x, data.test.y),
            evaluate(q, data.holdout.x, data.holdout.y),
        )
    if method == "pq-s":
        pair = _per_model_pair(model, cfg.k,
                               _seed_for(cfg.seed, trial, task_idx, 5))
    ocfg = _optimize_cfg(cfg, method, seed)
    result = optimize_model(model, pair, data.train.x, data.train.y,
                            data.test.x, data.test.y, ocfg)
    return MethodOutcome(
        method,
        evaluate(result.model, data.test.x, data.test.y),
        evaluate(result.model, data.holdout.x, data.holdout.y),
        result=result,
        pair=pair if method == "pq-s" else None,
    )


# ----------------------------------------------------------------------
# pipeline


@dataclass
class PipelineArtifacts:
    config: SuiteConfig
    originals: dict[str, ModelGraph]  # trial 0
    outcomes: dict[tuple[str, str], MethodOutcome]  # (task, method), trial 0
    holdout_outcome: MethodOutcome | None
    pair: CodebookPair | None
    bundle3: bytes | None
    bundle4: bytes | None
    encoded: dict[str, bundle_mod.EncodedModel]
    runtime_stats: dict[str, dict]
    report: dict
    elapsed_seconds: float


def _mean_std(vals: list[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std())


def run_pipeline(cfg: SuiteConfig, run_dir: str | Path | None = None,
                 log=print) -> PipelineArtifacts:
    """Run the whole experiment: originals, codebooks, every method over
    every trial, bundle emission, and the runtime exercise."""
    t_start = time.time()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    training = cfg.training_tasks()
    hold_task = cfg.holdout_task()
    acc: dict[str, dict[str, dict[str, list[float]]]] = {
        t.name: {m: {"test": [], "holdout": []} for m in cfg.methods}
        for t in training
    }
    gen_acc = {"test": [], "holdout": [], "orig_test": [], "orig_holdout": []}
    hash_stable = True
    trial0: dict = {}

    for trial in range(cfg.trials):
        log(f"[trial {trial}] generating data and training originals")
        datas = {t.name: generate_task_data(cfg, t, trial) for t in cfg.tasks}
        originals = {
            t.name: train_original(cfg, t, datas[t.name], trial)
            for t in cfg.tasks
        }
        pools = pool_weights([originals[t.name] for t in training])
        pair = learn_codebooks(
            pools, k=cfg.k,
            seed=_seed_for(cfg.seed, trial, len(cfg.tasks), 3),
        )
        pair_hash = pair.content_hash()
        outcomes: dict[tuple[str, str], MethodOutcome] = {}
        for task in training:
            task_idx = cfg.tasks.index(task)
            for method in cfg.methods:
                out = run_method(cfg, method, originals[task.name],
                                 datas[task.name], pair, trial, task_idx)
                outcomes[(task.name, method)] = out
                acc[task.name][method]["test"].append(out.acc_test)
                acc[task.name][method]["holdout"].append(out.acc_holdout)
            log(f"[trial {trial}] {task.name}: " + " ".join(
                f"{m}={outcomes[(task.name, m)].acc_test:.3f}"
                for m in cfg.methods))
        hold_out = None
        if hold_task is not None:
            hold_idx = cfg.tasks.index(hold_task)
            hold_out = run_method(cfg, "yono", originals[hold_task.name],
                                  datas[hold_task.name], pair, trial, hold_idx)
            gen_acc["test"].append(hold_out.acc_test)
            gen_acc["holdout"].append(hold_out.acc_holdout)
            gen_acc["orig_test"].append(
                evaluate(originals[hold_task.name],
                         datas[hold_task.name].test.x,
                         datas[hold_task.name].test.y))
            gen_acc["orig_holdout"].append(
                evaluate(originals[hold_task.name],
                         datas[hold_task.name].holdout.x,
                         datas[hold_task.name].holdout.y))
            log(f"[trial {trial}] holdout {hold_task.name}: "
                f"yono={hold_out.acc_test:.3f}")
        if pair.content_hash() != pair_hash:
            hash_stable = False
        if trial == 0:
            trial0 = {
                "datas": datas, "originals": originals, "pair": pair,
                "outcomes": outcomes, "holdout": hold_out,
            }

    # ------------------------------------------------------------------
    # bundles and compression accounting (trial 0)
    log("[bundle] building deployment bundles from trial 0")
    artifacts = _build_bundles(cfg, trial0)
    runtime_stats, runtime_checks = _exercise_runtime(cfg, trial0, artifacts)

    report = _assemble_report(cfg, acc, gen_acc, hash_stable, trial0,
                              artifacts, runtime_stats, runtime_checks)
    elapsed = time.time() - t_start
    if run_dir is not None:
        from .report import render_tables, validate_report

        validate_report(report)
        (run_dir / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n")
        (run_dir / "report.txt").write_text(render_tables(report))
        if artifacts.get("bundle3") is not None:
            (run_dir / "bundle.ynb").write_bytes(artifacts["bundle3"])
        traces = {}
        for (task, method), out in trial0["outcomes"].items():
            if out.result is not None:
                traces[f"{task}/{method}"] = out.result.report.to_dicts()
        if trial0.get("holdout") is not None and trial0["holdout"].result:
            traces["holdout/yono"] = trial0["holdout"].result.report.to_dicts()
        with open(run_dir / "optimizer_traces.jsonl", "w") as fh:
            for key in sorted(traces):
                for row in traces[key]:
                    fh.write(json.dumps({"run": key, **row}, sort_keys=True) + "\n")
        (run_dir / "run_meta.json").write_text(json.dumps(
            {"elapsed_seconds": elapsed}, indent=2) + "\n")
    return PipelineArtifacts(
        config=cfg,
        originals=trial0.get("originals", {}),
        outcomes=trial0.get("outcomes", {}),
        holdout_outcome=trial0.get("holdout"),
        pair=trial0.get("pair"),
        bundle3=artifacts.get("bundle3"),
        bundle4=artifacts.get("bundle4"),
        encoded=artifacts.get("encoded", {}),
        runtime_stats=runtime_stats,
        report=report,
        elapsed_seconds=elapsed,
    )


def _encode_for_bundle(cfg, trial0, task_name, outcome) -> bundle_mod.EncodedModel:
    data = trial0["datas"][task_name]
    f16 = to_f16_pair(trial0["pair"])
    res = outcome.result
    return bundle_mod.build_encoded_model(
        res.model, res.codes, res.finetune_set, f16, data.train.x,
        trial0["originals"][task_name].param_bytes_f32(),
    )


def _build_bundles(cfg: SuiteConfig, trial0: dict) -> dict:
    out = {"encoded": {}, "sizes": {}}
    if not trial0 or "pair" not in trial0:
        return out
    training = cfg.training_tasks()
    f16 = to_f16_pair(trial0["pair"])
    sizes = {}
    originals_list = [trial0["originals"][t.name] for t in training]
    sizes["original"] = sum(m.param_bytes_f32() for m in originals_list)
    sizes["int8"] = sum(int8_baseline_bytes(m) for m in originals_list)
    for method in ("pq-m", "pq-mopt", "yono"):
        if method not in cfg.methods:
            continue
        ems = [
            _encode_for_bundle(cfg, trial0, t.name,
                               trial0["outcomes"][(t.name, method)])
            for t in training
        ]
        blob = bundle_mod.serialize(ems, f16)
        sizes[method] = len(blob)
        if method == "yono":
            out["bundle3"] = blob
            out["encoded"] = {em.name: em for em in ems}
            hold = trial0.get("holdout")
            if hold is not None and hold.result is not None:
                hold_task = cfg.holdout_task()
                em4 = _encode_for_bundle(cfg, trial0, hold_task.name, hold)
                out["bundle4"] = bundle_mod.serialize(ems + [em4], f16)
                out["encoded"][em4.name] = em4
    if "pq-s" in cfg.methods:
        total = 0
        for t in training:
            oc = trial0["outcomes"][(t.name, "pq-s")]
            f16_s = to_f16_pair(oc.pair)
            em = bundle_mod.build_encoded_model(
                oc.result.model, oc.result.codes, oc.result.finetune_set,
                f16_s, trial0["datas"][t.name].train.x,
                trial0["originals"][t.name].param_bytes_f32(),
            )
            total += len(bundle_mod.serialize([em], f16_s))
        sizes["pq-s"] = total
    out["sizes"] = sizes
    return out


def _exercise_runtime(cfg: SuiteConfig, trial0: dict, artifacts: dict):
    stats: dict[str, dict] = {}
    checks = {"weights_match_offline": True, "within_capacity": True,
              "bytes_read_reduced": True}
    blob = artifacts.get("bundle4") or artifacts.get("bundle3")
    if blob is None:
        return stats, checks
    b = bundle_mod.parse_bundle(blob)
    arena = rt.Arena(cfg.arena_bytes)
    for name in b.names:
        em = artifacts["encoded"][name]
        resident, ls = rt.load_model(b, name, arena)
        f32_bytes = trial0["originals"][name].param_bytes_f32()
        # agreement against the float reference on a fresh batch
        task = cfg.task(name)
        task_idx = cfg.tasks.index(task)
        if task.generator == "idx":
            sample = trial0["datas"][name].holdout
        else:
            eval_seed = _seed_for(cfg.seed, 1000, task_idx, 9)
            gen = GENERATORS[task.generator]
            kwargs = {} if task.noise is None else {"noise": task.noise}
            sample = gen(1000, seed=eval_seed, **kwargs)
        ref = rt.reference_model(em, b.pair)
        scores = rt.infer(resident, sample.x)
        ref_scores = ref.forward(sample.x)
        agreement = float(
            (scores.argmax(axis=1) == ref_scores.argmax(axis=1)).mean()
        )
        stats[name] = {
            "bytes_read": ls.bytes_read,
            "bytes_written": ls.bytes_written,
            "uncompressed_f32_bytes": f32_bytes,
            "int8_f32_agreement": agreement,
        }
        for idx, cm in em.codes.items():
            spec = em.layers[idx - 1]
            offline = quantize(
                bundle_mod.deployment_weight(cm, b.pair, spec.weight_shape()),
                em.weight_qparams[idx],
            )
            view = resident.weight_view(idx)
            if not np.array_equal(view.reshape(-1), offline.reshape(-1)):
                checks["weights_match_offline"] = False
        for idx, (q, _) in em.escapes.items():
            if not np.array_equal(resident.weight_view(idx).reshape(-1), q):
                checks["weights_match_offline"] = False
        if ls.bytes_read >= f32_bytes:
            checks["bytes_read_reduced"] = False
    checks["within_capacity"] = arena.high_water <= arena.capacity
    checks["high_water"] = arena.high_water
    return stats, checks


def _assemble_report(cfg, acc, gen_acc, hash_stable, trial0, artifacts,
                     runtime_stats, runtime_checks) -> dict:
    training = [t.name for t in cfg.training_tasks()]
    accuracy = {}
    for task in training:
        accuracy[task] = {}
        for method in cfg.methods:
            tm, ts = _mean_std(acc[task][method]["test"])
            hm, hs = _mean_std(acc[task][method]["holdout"])
            om = _mean_std(acc[task]["original"]["test"])[0]
            accuracy[task][method] = {
                "test_mean": tm, "test_std": ts,
                "holdout_mean": hm, "holdout_std": hs,
                "per_trial_test": acc[task][method]["test"],
                "drop_mean": om - tm,
            }
    compression = {}
    sizes = artifacts.get("sizes", {})
    orig = sizes.get("original", 0)
    for method, size in sizes.items():
        compression[method] = {
            "size_bytes": int(size),
            "ratio": (orig / size) if size else 0.0,
        }
    generalization = None
    if gen_acc["test"]:
        tm, ts = _mean_std(gen_acc["test"])
        om, _ = _mean_std(gen_acc["orig_test"])
        hm, hs = _mean_std(gen_acc["holdout"])
        generalization = {
            "task": cfg.holdout,
            "method": "yono",
            "test_mean": tm, "test_std": ts,
            "holdout_mean": hm, "holdout_std": hs,
            "original_test_mean": om,
            "drop_mean": om - tm,
            "codebook_hash_stable": hash_stable,
        }
    traces = {}
    for (task, method), out in trial0.get("outcomes", {}).items():
        if out.result is not None:
            rep = out.result.report
            traces[f"{task}/{method}"] = {
                "status": rep.status,
                "em_iterations": len(rep.iterations),
                "finetune_set": rep.final_finetune_set,
                "per_iteration_sets": [r.finetuned_layers for r in rep.iterations],
            }
    checks = _evaluate_checks(cfg, accuracy, generalization, compression,
                              artifacts, runtime_stats, runtime_checks, traces)
    report = {
        "run_name": cfg.run_name,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "k": cfg.k,
        "epsilon": cfg.epsilon,
        "arena_bytes": cfg.arena_bytes,
        "methods": list(cfg.methods),
        "tasks": training,
        "holdout_task": cfg.holdout,
        "accuracy": accuracy,
        "generalization": generalization,
        "compression": compression,
        "bundle3_bytes": len(artifacts["bundle3"]) if artifacts.get("bundle3") else 0,
        "bundle4_bytes": len(artifacts["bundle4"]) if artifacts.get("bundle4") else 0,
        "runtime": {
            "arena_bytes": cfg.arena_bytes,
            "high_water": runtime_checks.get("high_water", 0),
            "models": runtime_stats,
        },
        "optimizer_traces": traces,
        "checks": checks,
    }
    return report


def _evaluate_checks(cfg, accuracy, generalization, compression, artifacts,
                     runtime_stats, runtime_checks, traces) -> dict:
    checks = {}
    tasks = [t.name for t in cfg.training_tasks()]
    if tasks and "yono" in cfg.methods:
        checks["yono_drop_within_epsilon"] = all(
            accuracy[t]["yono"]["drop_mean"] <= cfg.epsilon for t in tasks
        )
    if tasks and all(m in cfg.methods for m in ("pq-m", "pq-mopt", "yono")):
        mean_drop = {
            m: float(np.mean([accuracy[t][m]["drop_mean"] for t in tasks]))
            for m in ("pq-m", "pq-mopt", "yono")
        }
        checks["ordering"] = (
            mean_drop["yono"] <= mean_drop["pq-mopt"] + ORDERING_SLACK
            and mean_drop["pq-mopt"] <= mean_drop["pq-m"] + ORDERING_SLACK
        )
        checks["mean_drops"] = mean_drop
    if generalization is not None:
        checks["generalization_within_epsilon"] = (
            generalization["drop_mean"] <= cfg.epsilon
            and generalization["codebook_hash_stable"]
        )
    if "yono" in compression and compression["yono"]["size_bytes"]:
        checks["ratio_at_least_8x"] = compression["yono"]["ratio"] >= 8.0
    if artifacts.get("bundle3") is not None and artifacts.get("bundle4") is not None:
        hold_task = cfg.holdout_task()
        hold_orig = None
        for name, em in artifacts["encoded"].items():
            if hold_task is not None and name == hold_task.name:
                hold_orig = em.original_param_bytes
        if hold_orig:
            growth = len(artifacts["bundle4"]) - len(artifacts["bundle3"])
            checks["sublinear_growth"] = growth < 0.2 * hold_orig
            checks["bundle_growth_bytes"] = growth
    if runtime_stats:
        checks["runtime_weights_match_offline"] = runtime_checks[
            "weights_match_offline"]
        checks["runtime_within_capacity"] = runtime_checks["within_capacity"]
        checks["runtime_bytes_read_reduced"] = runtime_checks[
            "bytes_read_reduced"]
        checks["runtime_agreement_ok"] = all(
            s["int8_f32_agreement"] >= 0.98 for s in runtime_stats.values()
        )
    if "pq-m" in cfg.methods and traces:
        checks["pqm_zero_em_iterations"] = all(
            t["em_iterations"] == 0
            for key, t in traces.items() if key.endswith("/pq-m")
        )
    if "pq-mopt" in cfg.methods and traces:
        ok = True
        for key, t in traces.items():
            if not key.endswith("/pq-mopt"):
                continue
            sets = t["per_iteration_sets"]
            if sets and any(s != sets[0] for s in sets):
                ok = False
        checks["pqmopt_constant_finetune_set"] = ok
    checks["all_passed"] = all(
        v for k, v in checks.items() if isinstance(v, bool)
    )
    return checks
