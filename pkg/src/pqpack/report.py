"""Report rendering (fixed-width tables) and JSON schema validation."""

import json
from importlib import resources

import jsonschema


def _fmt_pct(mean: float, std: float) -> str:
    return f"{100 * mean:5.1f} ±{100 * std:4.1f}"


def _fmt_size(nbytes: int) -> str:
    return f"{nbytes / 1e6:.2f} MB" if nbytes >= 1e5 else f"{nbytes} B"


def render_tables(report: dict) -> str:
    """Human-readable accuracy and compression tables; deterministic for
    a given report."""
    lines = []
    methods = report.get("methods", [])
    tasks = report.get("tasks", [])
    name_w = max([len(t) for t in tasks] + [12])
    lines.append(f"run: {report.get('run_name', '?')}  "
                 f"trials={report.get('trials', 0)}  K={report.get('k', 0)}  "
                 f"epsilon={report.get('epsilon', 0)}")
    lines.append("")
    lines.append("Accuracy (test %, mean ± std over trials)")
    header = "task".ljust(name_w) + "".join(m.rjust(14) for m in methods)
    lines.append(header)
    lines.append("-" * len(header))
    for task in tasks:
        row = task.ljust(name_w)
        for m in methods:
            cell = report["accuracy"][task][m]
            row += _fmt_pct(cell["test_mean"], cell["test_std"]).rjust(14)
        lines.append(row)
    gen = report.get("generalization")
    if gen:
        row = f"{gen['task']} (unseen)".ljust(name_w + 2)
        row += (f"yono {_fmt_pct(gen['test_mean'], gen['test_std'])}  "
                f"(original {100 * gen['original_test_mean']:.1f})")
        lines.append(row)
    lines.append("")
    lines.append("Compression")
    comp = report.get("compression", {})
    order = [m for m in ("int8", "pq-s", "pq-m", "pq-mopt", "yono", "original")
             if m in comp]
    header = "      " + "".join(m.rjust(12) for m in order)
    lines.append(header)
    lines.append("-" * len(header))
    ratio_row = "Ratio "
    size_row = "Size  "
    for m in order:
        ratio_row += f"{comp[m]['ratio']:.2f}x".rjust(12)
        size_row += _fmt_size(comp[m]["size_bytes"]).rjust(12)
    lines.append(ratio_row)
    lines.append(size_row)
    rt = report.get("runtime", {})
    if rt.get("models"):
        lines.append("")
        lines.append(
            f"Runtime (arena {rt['arena_bytes']} B, "
            f"high water {rt['high_water']} B)"
        )
        for name in sorted(rt["models"]):
            s = rt["models"][name]
            lines.append(
                f"  {name}: load reads {s['bytes_read']} B "
                f"(f32 would read {s['uncompressed_f32_bytes']} B), "
                f"int8/f32 top-1 agreement {100 * s['int8_f32_agreement']:.1f}%"
            )
    checks = report.get("checks", {})
    if checks:
        lines.append("")
        lines.append("Checks")
        for key in sorted(checks):
            val = checks[key]
            if isinstance(val, bool):
                lines.append(f"  [{'PASS' if val else 'FAIL'}] {key}")
    lines.append("")
    return "\n".join(lines)


def load_schema() -> dict:
    with resources.files("pqpack.schemas").joinpath(
        "report.schema.json"
    ).open() as fh:
        return json.load(fh)


def validate_report(report: dict) -> None:
    """Raise jsonschema.ValidationError if the report is malformed."""
    jsonschema.validate(report, load_schema())
