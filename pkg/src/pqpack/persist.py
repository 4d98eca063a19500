"""npz persistence for models, codebook pairs, and optimizer results
(used by the stage-wise CLI so train/compress/bundle can run separately)."""

import json
from dataclasses import asdict

import numpy as np

from .nn import LayerKind, LayerParams, LayerSpec, ModelGraph
from .optimize import OptimizeResult, OptimizeReport
from .pool import GroupConfig, GroupId
from .pq import CodebookPair, CodeMatrix, SubCodebook


def _specs_to_json(specs: list[LayerSpec]) -> str:
    rows = []
    for s in specs:
        d = asdict(s)
        d["kind"] = int(s.kind)
        rows.append(d)
    return json.dumps(rows)


def _specs_from_json(text: str) -> list[LayerSpec]:
    return [LayerSpec(LayerKind(d.pop("kind")), **d) for d in json.loads(text)]


def save_model(path, model: ModelGraph) -> None:
    arrays = {}
    for idx, p in model.params.items():
        for name, arr in p.named_arrays():
            arrays[f"p{idx}.{name}"] = arr
    meta = {
        "name": model.name,
        "specs": _specs_to_json(model.layers),
        "frozen": sorted(model.frozen),
        "bn_static": model.bn_static,
    }
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_model(path) -> ModelGraph:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    specs = _specs_from_json(meta["specs"])
    params: dict[int, LayerParams] = {}
    for key in data.files:
        if not key.startswith("p"):
            continue
        idx_s, name = key[1:].split(".", 1)
        p = params.setdefault(int(idx_s), LayerParams())
        setattr(p, name, data[key])
    model = ModelGraph(
        name=meta["name"], layers=specs, params=params,
        frozen=set(meta["frozen"]), bn_static=meta["bn_static"],
    )
    model.validate()
    return model


def save_pair(path, pair: CodebookPair) -> None:
    arrays = {}
    present = {}
    for gid, books in pair.groups.items():
        present[int(gid)] = 0 if books is None else len(books)
        for m, book in enumerate(books or ()):
            arrays[f"g{int(gid)}.m{m}"] = book.codewords
    meta = {
        "k": pair.k,
        "present": present,
        "cfg": asdict(pair.cfg),
    }
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_pair(path) -> CodebookPair:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    cfg = GroupConfig(**meta["cfg"])
    groups: dict[GroupId, list[SubCodebook] | None] = {}
    for gid_s, count in meta["present"].items():
        gid = GroupId(int(gid_s))
        if count == 0:
            groups[gid] = None
        else:
            groups[gid] = [
                SubCodebook(codewords=data[f"g{int(gid)}.m{m}"].copy())
                for m in range(count)
            ]
    return CodebookPair(groups=groups, cfg=cfg, k=meta["k"], frozen=True)


def save_result(path, result: OptimizeResult) -> None:
    arrays = {}
    for idx, p in result.model.params.items():
        for name, arr in p.named_arrays():
            arrays[f"p{idx}.{name}"] = arr
    for idx, cm in result.codes.items():
        arrays[f"c{idx}"] = cm.codes
        arrays[f"c{idx}.group"] = np.int64(int(cm.group))
    meta = {
        "name": result.model.name,
        "specs": _specs_to_json(result.model.layers),
        "bn_static": result.model.bn_static,
        "finetune_set": list(result.finetune_set),
        "report": result.report.to_dicts(),
    }
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_result(path) -> OptimizeResult:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    specs = _specs_from_json(meta["specs"])
    params: dict[int, LayerParams] = {}
    codes: dict[int, CodeMatrix] = {}
    for key in data.files:
        if key.startswith("p"):
            idx_s, name = key[1:].split(".", 1)
            p = params.setdefault(int(idx_s), LayerParams())
            setattr(p, name, data[key])
        elif key.startswith("c") and not key.endswith(".group"):
            idx = int(key[1:])
            codes[idx] = CodeMatrix(
                group=GroupId(int(data[f"{key}.group"])),
                codes=data[key],
            )
    model = ModelGraph(name=meta["name"], layers=specs, params=params,
                       bn_static=meta["bn_static"])
    model.validate()
    head = meta["report"][0]
    report = OptimizeReport(
        model=head["model"], heuristic=head["heuristic"],
        epsilon=head["epsilon"], status=head["status"],
        best_iteration=head["best_iteration"],
        final_finetune_set=head["final_finetune_set"],
    )
    return OptimizeResult(model=model, codes=codes,
                          finetune_set=meta["finetune_set"], report=report)
