import numpy as np
import pytest

from pqpack.nn import TrainConfig, evaluate, train
from pqpack.optimize import (
    HEURISTIC_NONE,
    HEURISTIC_OURS,
    FinetuneSet,
    OptimizeConfig,
    em_optimize,
    initial_finetune,
    optimize_model,
    select_layer_heuristic,
)
from pqpack.pool import pool_weights
from pqpack.pq import encode_model, learn_codebooks, reconstruct_model
from tests.conftest import conv_stack, tiny_mlp


def _toy_task(seed=0, n=400):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, 8, 8)).astype(np.float32)
    quadrant = (x[:, 0, :4, :].mean(axis=(1, 2)) >
                x[:, 0, 4:, :].mean(axis=(1, 2))).astype(np.int64)
    stripe = (x[:, 0, :, ::2].mean(axis=(1, 2)) >
              x[:, 0, :, 1::2].mean(axis=(1, 2))).astype(np.int64)
    return x, quadrant + 2 * stripe


@pytest.fixture(scope="module")
def trained_stack():
    x, y = _toy_task(seed=1)
    model = conv_stack(seed=2)
    train(model, x[:320], y[:320], TrainConfig(epochs=12, batch_size=32, seed=3))
    pair = learn_codebooks(pool_weights([model]), k=16, seed=4)
    return model, pair, (x[:320], y[:320]), (x[320:], y[320:])


def test_initial_finetune_freezes_middle_layers(trained_stack):
    model, pair, (tx, ty), _ = trained_stack
    recon, codes = initial_finetune(model, pair, tx, ty,
                                    OptimizeConfig(seed=5))
    first, last = model.first_last_codable()
    middle = set(model.codable_layers()) - {first, last}
    ref = reconstruct_model(codes, pair, model)
    for idx in middle:
        assert np.array_equal(recon.params[idx].weight,
                              ref.params[idx].weight)
    # escape layers did move
    assert not np.array_equal(recon.params[first].weight,
                              ref.params[first].weight)


def test_initial_finetune_improves_or_holds_accuracy(trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    codes = encode_model(model, pair)
    raw = reconstruct_model(codes, pair, model)
    acc_raw = evaluate(raw, ex, ey)
    recon, _ = initial_finetune(model, pair, tx, ty, OptimizeConfig(seed=6))
    assert evaluate(recon, ex, ey) >= acc_raw - 1e-9


def test_zero_iterations_when_within_epsilon(trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    cfg = OptimizeConfig(epsilon=1.0, seed=7)
    recon, codes = initial_finetune(model, pair, tx, ty, cfg)
    result = em_optimize(model, recon, codes, pair, tx, ty, ex, ey, cfg)
    assert result.report.status == "converged"
    assert len(result.report.iterations) == 0
    for idx in codes:
        assert np.array_equal(result.codes[idx].codes, codes[idx].codes)


def test_epsilon_validation():
    with pytest.raises(ValueError):
        OptimizeConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        OptimizeConfig(epsilon=1.2)
    OptimizeConfig(epsilon=1.0)  # boundary case is allowed


def test_select_layer_heuristic_arithmetic():
    """score(A) = 4/100 = 0.04 < score(B) = 2/10 = 0.2."""
    model_a = tiny_mlp(seed=20)
    recon_a = model_a.copy()
    codable = model_a.codable_layers()  # [1, 3, 5] -> middle is 3
    # craft: layer 1 drift 4.0 over its size, layer 3 drift 2.0 over 10 weights
    for idx in codable:
        recon_a.params[idx].weight = model_a.params[idx].weight.copy()
    w = model_a.params[3].weight
    delta = np.zeros_like(w)
    delta.reshape(-1)[:10] = np.sqrt(2.0 / 10.0)
    recon_a.params[3].weight = w + delta
    fset = FinetuneSet(1, 5)
    assert select_layer_heuristic(model_a, recon_a, fset) == 3


def test_select_layer_tie_breaks_to_lowest_index():
    model = conv_stack(seed=21)
    recon = model.copy()
    fset = FinetuneSet(*model.first_last_codable())
    eligible = [i for i in model.codable_layers() if i not in fset]
    assert select_layer_heuristic(model, recon, fset) == min(eligible)


def test_select_layer_matches_brute_force_oracle(rng):
    model = conv_stack(seed=22)
    recon = model.copy()
    for idx in model.codable_layers():
        noise = rng.standard_normal(model.params[idx].weight.shape)
        recon.params[idx].weight = (
            model.params[idx].weight + 0.1 * noise.astype(np.float32)
        )
    fset = FinetuneSet(*model.first_last_codable())
    # independent straight-loop score computation
    best, best_score = None, -1.0
    for idx in model.codable_layers():
        if idx in fset:
            continue
        diff = (model.params[idx].weight.astype(np.float64)
                - recon.params[idx].weight.astype(np.float64))
        score = float((diff * diff).sum()) / diff.size
        if score > best_score:
            best, best_score = idx, score
    assert select_layer_heuristic(model, recon, fset) == best


def test_select_layer_errors_when_all_finetuned():
    model = tiny_mlp(seed=23)
    fset = FinetuneSet(1, 5)
    fset.add(3)
    with pytest.raises(ValueError, match="every codable layer"):
        select_layer_heuristic(model, model.copy(), fset)


def _damaged_setup(alpha=20.0):
    """Function-preserving damage: scale the middle conv1x1 by alpha and
    the following FC by 1/alpha (ReLU is positively homogeneous), so the
    original accuracy is intact but that layer cannot be represented by
    codebooks learned on undamaged weights."""
    x, y = _toy_task(seed=10)
    model = conv_stack(seed=11)
    train(model, x[:320], y[:320], TrainConfig(epochs=12, batch_size=32, seed=12))
    pair = learn_codebooks(pool_weights([model]), k=16, seed=13)
    damaged = model.copy()
    damaged.params[6].weight *= np.float32(alpha)
    damaged.params[6].bias *= np.float32(alpha)
    damaged.params[9].weight /= np.float32(alpha)
    return damaged, pair, (x[:320], y[:320]), (x[320:], y[320:])


def test_damage_preserves_function():
    damaged, pair, _, (ex, ey) = _damaged_setup()
    clean = conv_stack(seed=11)
    x, y = _toy_task(seed=10)
    train(clean, x[:320], y[:320], TrainConfig(epochs=12, batch_size=32, seed=12))
    np.testing.assert_allclose(damaged.forward(ex[:32]),
                               clean.forward(ex[:32]), rtol=1e-4, atol=1e-4)


def test_heuristic_targets_damaged_layer_on_first_iteration():
    damaged, pair, (tx, ty), (ex, ey) = _damaged_setup()
    cfg = OptimizeConfig(epsilon=1e-4, max_outer_iters=1,
                         heuristic=HEURISTIC_OURS, seed=14,
                         finetune_epochs_per_step=2)
    recon, codes = initial_finetune(damaged, pair, tx, ty, cfg)
    result = em_optimize(damaged, recon, codes, pair, tx, ty, ex, ey, cfg)
    assert result.report.iterations, "loop must run at least one iteration"
    first_iter = result.report.iterations[0]
    assert first_iter.added_layer == 6
    assert max(first_iter.layer_scores, key=first_iter.layer_scores.get) == 6


def test_heuristic_beats_no_heuristic_on_damaged_model():
    damaged, pair, (tx, ty), (ex, ey) = _damaged_setup()
    accs = {}
    for heuristic in (HEURISTIC_OURS, HEURISTIC_NONE):
        cfg = OptimizeConfig(epsilon=1e-4, max_outer_iters=3,
                             heuristic=heuristic, seed=15,
                             finetune_epochs_per_step=4)
        result = optimize_model(damaged, pair, tx, ty, ex, ey, cfg)
        accs[heuristic] = evaluate(result.model, ex, ey)
    assert accs[HEURISTIC_OURS] >= accs[HEURISTIC_NONE]


def test_estep_reassignment_is_noop_on_frozen_layers(trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    cfg = OptimizeConfig(epsilon=1e-4, max_outer_iters=2, seed=16,
                         finetune_epochs_per_step=2)
    recon, codes = initial_finetune(model, pair, tx, ty, cfg)
    result = em_optimize(model, recon, codes, pair, tx, ty, ex, ey, cfg)
    for rec in result.report.iterations:
        assert rec.reassigned_codes == 0


def test_finetune_set_grows_by_one_per_heuristic_iteration(trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    cfg = OptimizeConfig(epsilon=1e-4, max_outer_iters=3,
                         heuristic=HEURISTIC_OURS, seed=17,
                         finetune_epochs_per_step=1)
    recon, codes = initial_finetune(model, pair, tx, ty, cfg)
    result = em_optimize(model, recon, codes, pair, tx, ty, ex, ey, cfg)
    sizes = [len(r.finetuned_layers) for r in result.report.iterations]
    for a, b in zip(sizes, sizes[1:]):
        assert b == a + 1
    assert sizes[0] == 2


def test_codebook_hash_unchanged_by_optimization(trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    before = pair.content_hash()
    optimize_model(model, pair, tx, ty, ex, ey,
                   OptimizeConfig(seed=18, max_outer_iters=1,
                                  finetune_epochs_per_step=1))
    assert pair.content_hash() == before


def test_ablation_flags(trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    pq_m = optimize_model(
        model, pair, tx, ty, ex, ey,
        OptimizeConfig(epsilon=1e-6, max_outer_iters=0,
                       heuristic=HEURISTIC_NONE, seed=19,
                       finetune_epochs_per_step=1),
    )
    assert len(pq_m.report.iterations) == 0
    first, last = model.first_last_codable()
    assert pq_m.finetune_set == [first, last]
    pq_mopt = optimize_model(
        model, pair, tx, ty, ex, ey,
        OptimizeConfig(epsilon=1e-6, max_outer_iters=2,
                       heuristic=HEURISTIC_NONE, seed=19,
                       finetune_epochs_per_step=1),
    )
    for rec in pq_mopt.report.iterations:
        assert rec.finetuned_layers == [first, last]
    assert pq_mopt.finetune_set == [first, last]


def test_exhausted_returns_best_seen(trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    cfg = OptimizeConfig(epsilon=1e-6, max_outer_iters=2,
                         heuristic=HEURISTIC_OURS, seed=20,
                         finetune_epochs_per_step=1)
    result = optimize_model(model, pair, tx, ty, ex, ey, cfg)
    if result.report.status == "exhausted":
        best = result.report.best_iteration
        accs = [result.report.initial.acc_recon] + [
            r.acc_recon for r in result.report.iterations
        ]
        got = evaluate(result.model, ex, ey)
        assert got == pytest.approx(max(accs))
        assert best <= len(result.report.iterations)


def test_report_jsonl_round_trip(tmp_path, trained_stack):
    model, pair, (tx, ty), (ex, ey) = trained_stack
    result = optimize_model(model, pair, tx, ty, ex, ey,
                            OptimizeConfig(seed=21, max_outer_iters=1,
                                           finetune_epochs_per_step=1))
    path = tmp_path / "trace.jsonl"
    result.report.write_jsonl(path)
    import json

    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows[0]["model"] == model.name
    assert rows[0]["status"] in ("converged", "exhausted")
    assert len(rows) >= 2  # head + initial record
