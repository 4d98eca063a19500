"""Codebook learning and code assignment.

Each weight group owns two sub-codebooks learned with seeded k-means
(k-means++ init, Lloyd iterations, empty clusters re-seeded from the
farthest point).  Encoding a vector picks, per subvector, the codeword
with the smallest squared L2 distance; because the objective separates
across subvectors this equals the joint argmin over all K^M candidates.
Codebooks are frozen after learning and never updated by the optimizer.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kernels
from .nn import ModelGraph
from .pool import GroupConfig, GroupId, WeightPool, layer_rows, unpool_layer

KMEANS_MAX_ITER = 100
KMEANS_REL_TOL = 1e-6
DUPLICATE_EPS = 1e-12


class CodebookError(ValueError):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, d) float32
    objectives: list[float]  # per-Lloyd-iteration sum of squared distances
    n_iter: int


@dataclass
class SubCodebook:
    codewords: np.ndarray  # (K, dsub) float32, read-only once frozen
    objectives: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.codewords.shape[0]

    @property
    def dsub(self) -> int:
        return self.codewords.shape[1]


@dataclass
class CodebookPair:
    """The two shared codebooks; each group holds M sub-codebooks.

    A group is None when the training pool had no rows of that kind
    (per-model codebooks for dense-only models).
    """

    groups: dict[GroupId, list[SubCodebook] | None]
    cfg: GroupConfig
    k: int
    frozen: bool = True

    def __post_init__(self):
        if self.frozen:
            for books in self.groups.values():
                for book in books or ():
                    book.codewords.setflags(write=False)

    def subbooks(self, group: GroupId) -> list[SubCodebook]:
        books = self.groups.get(group)
        if books is None:
            raise CodebookError(f"codebook pair has no {group.name} group")
        return books

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for gid in sorted(self.groups):
            books = self.groups[gid]
            h.update(bytes([gid, 0 if books is None else len(books)]))
            for book in books or ():
                h.update(np.int64(book.k).tobytes())
                h.update(np.int64(book.dsub).tobytes())
                h.update(np.ascontiguousarray(book.codewords).tobytes())
        return h.hexdigest()


@dataclass
class CodeMatrix:
    group: GroupId
    codes: np.ndarray  # (num_rows, M) uint16, every code < K

    @property
    def num_rows(self) -> int:
        return self.codes.shape[0]


def kmeans(points: np.ndarray, k: int, seed: int,
           max_iter: int = KMEANS_MAX_ITER,
           tol: float = KMEANS_REL_TOL) -> KMeansResult:
    """Seeded Lloyd's algorithm over float64, cast to float32 at the end.

    Stops when the relative objective improvement drops below ``tol``.
    The recorded objective sequence is non-increasing.
    """
    n, d = points.shape
    if n < k:
        raise CodebookError(
            f"k-means needs at least {k} rows, got {n}; use a smaller K"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF]))
    p64 = points.astype(np.float64)
    cents = _kmeanspp_init(p64, k, rng)
    objectives: list[float] = []
    prev = None
    it = 0
    for it in range(max_iter):
        codes, dists = kernels.kmeans_assign(p64, cents)
        obj = float(dists.sum())
        objectives.append(obj)
        if prev is not None and (prev - obj) <= tol * max(prev, 1e-30):
            break
        prev = obj
        cents = _update_centroids(p64, cents, codes, dists, k)
    cents32 = _dedup(p64, cents.astype(np.float32))
    return KMeansResult(centroids=cents32, objectives=objectives, n_iter=it + 1)


def _kmeanspp_init(p64: np.ndarray, k: int, rng) -> np.ndarray:
    n, d = p64.shape
    cents = np.empty((k, d), dtype=np.float64)
    first = int(rng.integers(n))
    cents[0] = p64[first]
    _, d2 = kernels.kmeans_assign(p64, cents[0:1])
    for j in range(1, k):
        total = float(d2.sum())
        if total > 0:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        cents[j] = p64[idx]
        _, nd = kernels.kmeans_assign(p64, cents[j:j + 1])
        np.minimum(d2, nd, out=d2)
    return cents


def _update_centroids(p64, cents, codes, dists, k):
    d = p64.shape[1]
    sums = np.zeros((k, d), dtype=np.float64)
    np.add.at(sums, codes, p64)
    counts = np.bincount(codes, minlength=k)
    new = np.where(counts[:, None] > 0,
                   sums / np.maximum(counts, 1)[:, None], cents)
    empties = np.flatnonzero(counts == 0)
    if empties.size:
        far = dists.copy()
        for c in empties:
            idx = int(np.argmax(far))
            new[c] = p64[idx]
            far[idx] = -1.0
    return new


def _dedup(p64, cents32):
    """Re-seed codewords that collide within DUPLICATE_EPS L2."""
    for _ in range(5):
        diff = cents32[:, None, :].astype(np.float64) - cents32[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        k = cents32.shape[0]
        d2[np.tril_indices(k)] = np.inf
        dup_rows = np.flatnonzero((d2 < DUPLICATE_EPS**2).any(axis=0))
        if dup_rows.size == 0:
            return cents32
        codes, dists = kernels.kmeans_assign(p64, cents32.astype(np.float64))
        far = dists.copy()
        for c in dup_rows:
            idx = int(np.argmax(far))
            cents32[c] = p64[idx].astype(np.float32)
            far[idx] = -1.0
    return cents32


def learn_codebooks(pools: tuple[WeightPool, WeightPool], k: int = 256,
                    seed: int = 0,
                    cfg: GroupConfig = GroupConfig()) -> CodebookPair:
    """Learn the frozen codebook pair from the two pooled weight groups.

    For each group and each of the M subvector positions an independent
    k-means problem runs over the matching column slice of the pool.
    """
    if k < 2 or (k & (k - 1)) != 0:
        raise CodebookError(f"K must be a power of two >= 2, got {k}")
    groups: dict[GroupId, list[SubCodebook] | None] = {}
    for pool in pools:
        rows = pool.training_rows()
        if rows.shape[0] == 0:
            groups[pool.group] = None
            continue
        dsub = cfg.subvector_len(pool.group)
        books = []
        for m in range(cfg.subvectors):
            sub = np.ascontiguousarray(rows[:, m * dsub:(m + 1) * dsub])
            child = int(
                np.random.SeedSequence([seed & 0x7FFFFFFF, int(pool.group), m])
                .generate_state(1)[0]
            )
            result = kmeans(sub, k, seed=child)
            books.append(SubCodebook(codewords=result.centroids,
                                     objectives=result.objectives))
        groups[pool.group] = books
    return CodebookPair(groups=groups, cfg=cfg, k=k, frozen=True)


def encode_rows(rows: np.ndarray, pair: CodebookPair,
                group: GroupId) -> CodeMatrix:
    """Assign each row's subvectors to their nearest codewords."""
    cfg = pair.cfg
    d = cfg.vector_len(group)
    if rows.shape[1] != d:
        raise CodebookError(
            f"{group.name} vectors must have length {d}, got {rows.shape[1]}"
        )
    books = pair.subbooks(group)
    dsub = cfg.subvector_len(group)
    codes = np.empty((rows.shape[0], cfg.subvectors), dtype=np.uint16)
    for m, book in enumerate(books):
        sub = np.ascontiguousarray(rows[:, m * dsub:(m + 1) * dsub])
        assigned, _ = kernels.kmeans_assign(sub, book.codewords)
        codes[:, m] = assigned.astype(np.uint16)
    return CodeMatrix(group=group, codes=codes)


def encode(vector: np.ndarray, pair: CodebookPair,
           group: GroupId) -> tuple[int, ...]:
    """Encode a single d-vector; ties break toward the lowest index."""
    cm = encode_rows(np.asarray(vector, dtype=np.float32).reshape(1, -1),
                     pair, group)
    return tuple(int(c) for c in cm.codes[0])


def decode_rows(cm: CodeMatrix, pair: CodebookPair) -> np.ndarray:
    """Concatenate the indexed codewords back into full rows."""
    books = pair.subbooks(cm.group)
    return np.concatenate(
        [books[m].codewords[cm.codes[:, m]] for m in range(len(books))],
        axis=1,
    )


def encode_model(model: ModelGraph, pair: CodebookPair) -> dict[int, CodeMatrix]:
    """Per-layer code matrices for every codable layer of one model."""
    if not pair.frozen:
        raise CodebookError("codebook pair must be frozen before encoding")
    out: dict[int, CodeMatrix] = {}
    for spec in model.layers:
        if spec.kind.name not in ("CONV3X3", "CONV1X1", "FULLY_CONNECTED"):
            continue
        weight = model.params[spec.layer_index].weight
        rows, _ = layer_rows(weight, spec.kind, pair.cfg)
        from .pool import group_of

        out[spec.layer_index] = encode_rows(rows, pair, group_of(spec.kind))
    return out


def reconstruct_model(
    codes: dict[int, CodeMatrix],
    pair: CodebookPair,
    skeleton: ModelGraph,
    escape_layers: frozenset | set = frozenset(),
) -> ModelGraph:
    """Build the decompressed model: codable layers outside
    ``escape_layers`` get codeword-concatenation weights; escape layers,
    biases, and batch-norm tensors copy the skeleton's stored values."""
    from .pool import PoolSlice, group_of

    recon = skeleton.copy()
    for spec in recon.layers:
        if spec.kind.name not in ("CONV3X3", "CONV1X1", "FULLY_CONNECTED"):
            continue
        idx = spec.layer_index
        if idx in escape_layers:
            continue
        if idx not in codes:
            raise CodebookError(
                f"model {skeleton.name}: missing codes for layer {idx}"
            )
        rows = decode_rows(codes[idx], pair)
        shape = tuple(recon.params[idx].weight.shape)
        count = int(np.prod(shape))
        entry = PoolSlice(
            model=recon.name,
            layer_index=idx,
            kind=spec.kind,
            weight_shape=shape,
            row_start=0,
            row_end=rows.shape[0],
            pad_count=rows.size - count,
        )
        recon.params[idx].weight = unpool_layer(rows, entry)
    return recon


def layer_reconstruction_errors(model: ModelGraph,
                                recon: ModelGraph) -> dict[int, float]:
    """Squared Frobenius weight difference per codable layer."""
    out = {}
    for idx in model.codable_layers():
        diff = (model.params[idx].weight.astype(np.float64)
                - recon.params[idx].weight.astype(np.float64))
        out[idx] = float((diff * diff).sum())
    return out
