#!/usr/bin/env python3
"""Regenerate the committed golden fixtures.

The golden bundle is built from fixed-seed constructed models (no
training, so it is independent of the kernel backend's backward pass)
plus deterministically learned codebooks.  Run from the repo root:

    python scripts/make_golden.py
"""

from pathlib import Path

import numpy as np

from pqpack.bundle import build_encoded_model, serialize
from pqpack.nn import LayerKind, LayerSpec, build_model
from pqpack.pool import pool_weights
from pqpack.pq import encode_model, learn_codebooks
from pqpack.quant import to_f16_pair
from pqpack.report import render_tables

OUT = Path(__file__).resolve().parent.parent / "tests" / "data"


def golden_models():
    cnn_specs = [
        LayerSpec(LayerKind.CONV3X3, 1, in_channels=2, out_channels=8, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 2, in_channels=8),
        LayerSpec(LayerKind.RELU, 3),
        LayerSpec(LayerKind.MAX_POOL, 4, pool_size=2),
        LayerSpec(LayerKind.CONV1X1, 5, in_channels=8, out_channels=12),
        LayerSpec(LayerKind.RELU, 6),
        LayerSpec(LayerKind.FLATTEN, 7),
        LayerSpec(LayerKind.FULLY_CONNECTED, 8, in_features=12 * 4 * 4,
                  out_features=4),
    ]
    mlp_specs = [
        LayerSpec(LayerKind.FULLY_CONNECTED, 1, in_features=3, out_features=24),
        LayerSpec(LayerKind.RELU, 2),
        LayerSpec(LayerKind.FULLY_CONNECTED, 3, in_features=24, out_features=24),
        LayerSpec(LayerKind.RELU, 4),
        LayerSpec(LayerKind.FULLY_CONNECTED, 5, in_features=24, out_features=5),
    ]
    a = build_model("golden-cnn", cnn_specs, seed=1001)
    b = build_model("golden-mlp", mlp_specs, seed=1002)
    a.bn_static = True
    b.bn_static = True
    return a, b


def build_golden_bundle() -> bytes:
    a, b = golden_models()
    pair = learn_codebooks(pool_weights([a, b]), k=8, seed=2024)
    f16 = to_f16_pair(pair)
    rng = np.random.default_rng(7)
    calib_a = rng.standard_normal((64, 2, 8, 8)).astype(np.float32)
    calib_b = rng.standard_normal((64, 3)).astype(np.float32)
    ems = []
    for model, calib in ((a, calib_a), (b, calib_b)):
        codes = encode_model(model, pair)
        first, last = model.first_last_codable()
        ems.append(build_encoded_model(model, codes, {first, last}, f16,
                                       calib, model.param_bytes_f32()))
    return serialize(ems, f16)


def build_golden_report_text() -> str:
    report = {
        "run_name": "golden",
        "trials": 2,
        "k": 16,
        "epsilon": 0.05,
        "methods": ["original", "pq-m", "yono"],
        "tasks": ["alpha", "beta"],
        "accuracy": {
            "alpha": {
                "original": {"test_mean": 0.9625, "test_std": 0.0125},
                "pq-m": {"test_mean": 0.9125, "test_std": 0.0375},
                "yono": {"test_mean": 0.95, "test_std": 0.0125},
            },
            "beta": {
                "original": {"test_mean": 0.88, "test_std": 0.02},
                "pq-m": {"test_mean": 0.85, "test_std": 0.01},
                "yono": {"test_mean": 0.87, "test_std": 0.015},
            },
        },
        "generalization": {
            "task": "gamma",
            "test_mean": 0.9,
            "test_std": 0.01,
            "original_test_mean": 0.92,
        },
        "compression": {
            "pq-m": {"ratio": 9.5, "size_bytes": 21000},
            "yono": {"ratio": 9.1, "size_bytes": 22000},
            "original": {"ratio": 1.0, "size_bytes": 200000},
        },
        "runtime": {
            "arena_bytes": 524288,
            "high_water": 40000,
            "models": {
                "alpha": {
                    "bytes_read": 15000,
                    "uncompressed_f32_bytes": 80000,
                    "int8_f32_agreement": 0.99,
                },
            },
        },
        "checks": {"ratio_at_least_8x": True, "ordering": True},
    }
    return render_tables(report)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    blob = build_golden_bundle()
    (OUT / "golden.ynb").write_bytes(blob)
    print(f"wrote tests/data/golden.ynb ({len(blob)} bytes)")
    text = build_golden_report_text()
    (OUT / "golden_report.txt").write_text(text)
    print(f"wrote tests/data/golden_report.txt ({len(text)} chars)")


if __name__ == "__main__":
    main()
