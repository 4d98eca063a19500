"""Compression optimizer: initial first/last-layer finetuning, then an
EM-style loop alternating code reassignment (E-step) with selective
finetuning (M-step), growing the finetune set via the max
weight-difference-per-parameter heuristic until the accuracy drop falls
inside the epsilon budget.

Codebooks are never modified here; layers outside the finetune set stay
bit-identical to their codeword reconstruction (weight freezing), while
biases and batch-norm affine parameters keep training throughout.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import ModelGraph, TrainConfig, evaluate, train
from .pq import (
    CodebookPair,
    CodeMatrix,
    encode_model,
    layer_reconstruction_errors,
    reconstruct_model,
)

HEURISTIC_OURS = "OURS"
HEURISTIC_NONE = "NONE"


@dataclass
class OptimizeConfig:
    epsilon: float = 0.03
    max_outer_iters: int | None = None  # default: codable layer count - 2
    finetune_epochs_per_step: int = 5
    heuristic: str = HEURISTIC_OURS
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 32
    patience: int = 2

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.max_outer_iters is not None and self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be >= 0")
        if self.heuristic not in (HEURISTIC_OURS, HEURISTIC_NONE):
            raise ValueError(f"unknown heuristic {self.heuristic!r}")


class FinetuneSet:
    """Layer indices allowed to train; always holds the first and last
    codable layer and only ever grows."""

    def __init__(self, first: int, last: int):
        self._order = [first, last] if first != last else [first]
        self._members = set(self._order)

    def add(self, layer_index: int) -> None:
        if layer_index not in self._members:
            self._members.add(layer_index)
            self._order.append(layer_index)

    def __contains__(self, layer_index: int) -> bool:
        return layer_index in self._members

    def __len__(self) -> int:
        return len(self._members)

    def members(self) -> list[int]:
        return list(self._order)


@dataclass
class IterationRecord:
    iteration: int  # 0 for the initial finetune
    reassigned_codes: int
    finetuned_layers: list[int]
    acc_orig: float
    acc_recon: float
    layer_scores: dict[int, float]
    added_layer: int | None = None


@dataclass
class OptimizeReport:
    model: str
    heuristic: str
    epsilon: float
    status: str = "converged"  # converged | exhausted
    initial: IterationRecord | None = None
    iterations: list[IterationRecord] = field(default_factory=list)
    best_iteration: int = 0
    final_finetune_set: list[int] = field(default_factory=list)

    def to_dicts(self) -> list[dict]:
        rows = []
        head = {
            "model": self.model,
            "heuristic": self.heuristic,
            "epsilon": self.epsilon,
            "status": self.status,
            "best_iteration": self.best_iteration,
            "final_finetune_set": self.final_finetune_set,
        }
        rows.append(head)
        for rec in ([self.initial] if self.initial else []) + self.iterations:
            d = asdict(rec)
            d["layer_scores"] = {str(k): v for k, v in rec.layer_scores.items()}
            rows.append(d)
        return rows

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.to_dicts():
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class OptimizeResult:
    model: ModelGraph
    codes: dict[int, CodeMatrix]
    finetune_set: list[int]
    report: OptimizeReport


def _stage_seed(seed: int, stage: int) -> int:
    return int(
        np.random.SeedSequence([seed & 0x7FFFFFFF, stage]).generate_state(1)[0]
        & 0x7FFFFFFF
    )


def _finetune(model, train_x, train_y, cfg: OptimizeConfig, stage: int,
              frozen_weights: set) -> None:
    tc = TrainConfig(
        learning_rate=cfg.learning_rate,
        epochs=cfg.finetune_epochs_per_step,
        batch_size=cfg.batch_size,
        seed=_stage_seed(cfg.seed, stage),
        early_stop_patience=cfg.patience,
    )
    train(model, train_x, train_y, tc, freeze_weights=frozenset(frozen_weights))


def initial_finetune(
    model: ModelGraph,
    pair: CodebookPair,
    train_x: np.ndarray,
    train_y: np.ndarray,
    cfg: OptimizeConfig = OptimizeConfig(),
) -> tuple[ModelGraph, dict[int, CodeMatrix]]:
    """Reconstruct the model from fresh codes, freeze every codable layer
    except the first and last, and finetune.  The finetuned first/last
    layers become the initial escape layers."""
    codes = encode_model(model, pair)
    recon = reconstruct_model(codes, pair, skeleton=model)
    recon.name = model.name
    first, last = model.first_last_codable()
    middle = set(model.codable_layers()) - {first, last}
    _finetune(recon, train_x, train_y, cfg, stage=0, frozen_weights=middle)
    return recon, codes


def select_layer_heuristic(orig: ModelGraph, recon: ModelGraph,
                           finetune_set) -> int:
    """argmax over codable layers outside the finetune set of
    ||W_l - What_l||^2_F / N_l; ties break toward the lowest index."""
    errors = layer_reconstruction_errors(orig, recon)
    best_idx = None
    best_score = -np.inf
    for idx in orig.codable_layers():
        if idx in finetune_set:
            continue
        score = errors[idx] / orig.params[idx].weight.size
        if score > best_score:
            best_score = score
            best_idx = idx
    if best_idx is None:
        raise ValueError(
            f"model {orig.name}: every codable layer is already finetuned"
        )
    return best_idx


def _layer_scores(orig: ModelGraph, recon: ModelGraph, finetune_set):
    errors = layer_reconstruction_errors(orig, recon)
    return {
        idx: errors[idx] / orig.params[idx].weight.size
        for idx in orig.codable_layers()
        if idx not in finetune_set
    }


def em_optimize(
    model: ModelGraph,
    recon: ModelGraph,
    codes: dict[int, CodeMatrix],
    pair: CodebookPair,
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    cfg: OptimizeConfig = OptimizeConfig(),
) -> OptimizeResult:
    """Run the reassignment/finetune loop on the outputs of
    ``initial_finetune`` until the accuracy drop is within epsilon or the
    iteration budget is spent (then the best-seen state is returned)."""
    codable = model.codable_layers()
    first, last = model.first_last_codable()
    fset = FinetuneSet(first, last)
    acc_orig = evaluate(model, test_x, test_y)
    acc_recon = evaluate(recon, test_x, test_y)
    report = OptimizeReport(model=model.name, heuristic=cfg.heuristic,
                            epsilon=cfg.epsilon)
    report.initial = IterationRecord(
        iteration=0,
        reassigned_codes=0,
        finetuned_layers=fset.members(),
        acc_orig=acc_orig,
        acc_recon=acc_recon,
        layer_scores=_layer_scores(model, recon, fset),
    )
    best = (acc_recon, recon.copy(), dict(codes), fset.members(), 0)
    b_hat = dict(codes)

    def _result(status: str, state) -> OptimizeResult:
        report.status = status
        report.best_iteration = state[4]
        report.final_finetune_set = state[3]
        return OptimizeResult(model=state[1], codes=state[2],
                              finetune_set=state[3], report=report)

    if acc_orig - cfg.epsilon <= acc_recon:
        return _result("converged", (acc_recon, recon, b_hat,
                                     fset.members(), 0))

    max_iters = cfg.max_outer_iters
    if max_iters is None:
        max_iters = max(len(codable) - 2, 0)

    for i in range(1, max_iters + 1):
        # E-step: reassign codes for layers outside the finetune set.
        # Frozen layers equal their reconstruction, so this is a no-op
        # unless a layer drifted; the count is recorded either way.
        fresh = encode_model(recon, pair)
        reassigned = 0
        for idx in codable:
            if idx in fset:
                continue
            reassigned += int((fresh[idx].codes != b_hat[idx].codes).sum())
            b_hat[idx] = fresh[idx]
        # M-step: rebuild from the codes, freeze non-finetuned layers,
        # train the rest.
        recon = reconstruct_model(b_hat, pair, skeleton=recon,
                                  escape_layers=set(fset.members()))
        frozen = set(codable) - set(fset.members())
        _finetune(recon, train_x, train_y, cfg, stage=i, frozen_weights=frozen)
        acc_recon = evaluate(recon, test_x, test_y)
        rec = IterationRecord(
            iteration=i,
            reassigned_codes=reassigned,
            finetuned_layers=fset.members(),
            acc_orig=acc_orig,
            acc_recon=acc_recon,
            layer_scores=_layer_scores(model, recon, fset),
        )
        if acc_recon > best[0]:
            best = (acc_recon, recon.copy(), dict(b_hat), fset.members(), i)
        if acc_orig - cfg.epsilon <= acc_recon:
            report.iterations.append(rec)
            return _result("converged", (acc_recon, recon, b_hat,
                                         fset.members(), i))
        if cfg.heuristic == HEURISTIC_OURS and len(fset) < len(codable):
            chosen = select_layer_heuristic(model, recon, fset)
            fset.add(chosen)
            rec.added_layer = chosen
        report.iterations.append(rec)

    return _result("exhausted", best)


def optimize_model(
    model: ModelGraph,
    pair: CodebookPair,
    train_x, train_y, test_x, test_y,
    cfg: OptimizeConfig = OptimizeConfig(),
) -> OptimizeResult:
    """Full pipeline for one model: initial finetune plus the EM loop."""
    pair_hash = pair.content_hash()
    recon, codes = initial_finetune(model, pair, train_x, train_y, cfg)
    result = em_optimize(model, recon, codes, pair, train_x, train_y,
                         test_x, test_y, cfg)
    if pair.content_hash() != pair_hash:
        raise RuntimeError("codebook pair mutated during optimization")
    return result
