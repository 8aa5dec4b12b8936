"""Exact flat search and an IVF-PQ approximate index over memory keys.

The approximate index is an inverted-file structure: keys are bucketed by a
k-means coarse quantizer, and each residual (key minus its centroid) is
product-quantized into m one-byte codes. Queries probe the nprobe nearest
buckets by inner product and score candidates through per-subspace lookup
tables (asymmetric distance computation). A second exact rescoring stage over
full-precision keys repairs approximation errors before the final top-K cut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, IndexStateError, InvalidInputError
from .serial import Reader, Writer, atomic_write_bytes, read_file

INDEX_MAGIC = "PIVF"
INDEX_VERSION = 1


@dataclass(frozen=True)
class SearchHit:
    entry_id: int
    score: float


def _sorted_hits(ids: np.ndarray, scores: np.ndarray, k: int) -> list[SearchHit]:
    """Top-k by (score desc, id asc)."""
    if ids.size == 0 or k <= 0:
        return []
    order = np.lexsort((ids, -scores))[: min(k, ids.size)]
    return [SearchHit(int(ids[i]), float(scores[i])) for i in order]


def exact_scores(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Full-precision inner products used by both flat search and rescoring."""
    return keys.astype(np.float64) @ np.asarray(query, dtype=np.float64)


class FlatIndex:
    """Exact inner-product search over a full-precision copy of the keys."""

    def __init__(self, keys: np.ndarray, ids: np.ndarray | None = None):
        self.keys = np.ascontiguousarray(keys, dtype=np.float32)
        if self.keys.ndim != 2:
            raise InvalidInputError("keys must be an (N, D) matrix")
        if ids is None:
            ids = np.arange(self.keys.shape[0], dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64)
        if self.ids.shape[0] != self.keys.shape[0]:
            raise InvalidInputError("row count must equal id count")

    @classmethod
    def from_bank(cls, bank) -> "FlatIndex":
        return cls(bank.keys_matrix())

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def search(self, query, k: int) -> list[SearchHit]:
        query = np.asarray(query, dtype=np.float32)
        if self.keys.shape[0] == 0:
            return []
        if query.shape != (self.dim,):
            raise InvalidInputError(f"query dim {query.shape} != index dim {self.dim}")
        if k < 1:
            raise InvalidInputError(f"k must be >= 1, got {k}")
        scores = exact_scores(self.keys, query)
        return _sorted_hits(self.ids, scores, k)


def flat_search(index: FlatIndex, query, k: int) -> list[SearchHit]:
    return index.search(query, k)


def _pairwise_sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (N, K), computed via the expansion trick."""
    # ||x||^2 is constant per row for argmin purposes but kept for distortion.
    cross = points @ centroids.T
    p2 = np.einsum("ij,ij->i", points, points)[:, None]
    c2 = np.einsum("ij,ij->i", centroids, centroids)[None, :]
    d = p2 - 2.0 * cross + c2
    np.maximum(d, 0.0, out=d)
    return d


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    diff = points - centroids[0]
    closest = np.einsum("ij,ij->i", diff, diff)
    for j in range(1, k):
        total = float(closest.sum())
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            probs = closest.astype(np.float64)
            probs /= probs.sum()
            idx = int(rng.choice(n, p=probs))
        centroids[j] = points[idx]
        diff = points - centroids[j]
        d = np.einsum("ij,ij->i", diff, diff)
        np.minimum(closest, d, out=closest)
    return centroids


def _cluster_sums(points: np.ndarray, assign: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster sums (float64) and counts via sort + add.reduceat."""
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, points.shape[1]), dtype=np.float64)
    order = np.argsort(assign, kind="stable")
    starts = np.zeros(k, dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]
    nonempty = np.flatnonzero(counts)
    if nonempty.size:
        sums[nonempty] = np.add.reduceat(
            points[order].astype(np.float64), starts[nonempty], axis=0
        )
    return sums, counts


def kmeans(points, k: int, iters: int = 25, seed=0,
           return_distortions: bool = False):
    """Lloyd's algorithm with seeded k-means++ init and fixed iteration count.

    Distances are computed in float32 (BLAS) with float64 accumulation for
    the centroid updates. Empty clusters are reseeded to the point farthest
    from its current centroid. Deterministic given the seed.
    """
    points = np.ascontiguousarray(points, dtype=np.float32)
    if points.ndim != 2:
        raise InvalidInputError("points must be an (N, D) matrix")
    n = points.shape[0]
    if k > n:
        raise InvalidInputError(f"k={k} exceeds point count {n}")
    if k < 1 or iters < 1:
        raise InvalidInputError("k and iters must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))

    centroids = _kmeans_pp_init(points, k, rng).astype(np.float32)
    p2 = np.einsum("ij,ij->i", points, points).astype(np.float64)
    distortions = []
    for _ in range(iters):
        cross = points @ centroids.T
        c2 = np.einsum("ij,ij->i", centroids, centroids)
        # argmin distance == argmax(cross - c2/2); p2 is constant per row
        assign = (cross - 0.5 * c2).argmax(axis=1)
        rows = np.arange(n)
        point_d = p2 - 2.0 * cross[rows, assign].astype(np.float64) + c2[assign]
        np.maximum(point_d, 0.0, out=point_d)
        distortions.append(float(point_d.sum()))
        sums, counts = _cluster_sums(points, assign, k)
        nonempty = counts > 0
        centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        if not nonempty.all():
            # Reseed each empty cluster to the currently farthest point.
            point_d = point_d.copy()
            for j in np.flatnonzero(~nonempty):
                idx = int(point_d.argmax())
                centroids[j] = points[idx]
                point_d[idx] = -1.0
    if return_distortions:
        return centroids, distortions
    return centroids


@dataclass(frozen=True)
class IvfPqParams:
    nlist: int = 256
    m: int = 16
    nbits: int = 8
    seed: int = 0
    kmeans_iters: int = 25

    @property
    def ksub(self) -> int:
        return 1 << self.nbits

    def as_dict(self) -> dict:
        return {"nlist": self.nlist, "m": self.m, "nbits": self.nbits,
                "seed": self.seed, "kmeans_iters": self.kmeans_iters}


@dataclass
class IvfPqIndex:
    """Trained IVF-PQ structure. Add entries, then search."""

    params: IvfPqParams
    dim: int
    coarse_centroids: np.ndarray                 # (nlist, D) float32
    pq_codebooks: np.ndarray                     # (m, 2^nbits, D/m) float32
    list_ids: list[np.ndarray] = field(default_factory=list)      # per-list int64
    list_codes: list[np.ndarray] = field(default_factory=list)    # per-list (n, m) uint8

    def __post_init__(self):
        if not self.list_ids:
            self.list_ids = [np.zeros(0, dtype=np.int64) for _ in range(self.params.nlist)]
            self.list_codes = [
                np.zeros((0, self.params.m), dtype=np.uint8) for _ in range(self.params.nlist)
            ]
        self._known_ids: set[int] = {int(i) for ids in self.list_ids for i in ids}

    @property
    def dsub(self) -> int:
        return self.dim // self.params.m

    @property
    def ntotal(self) -> int:
        return sum(ids.shape[0] for ids in self.list_ids)

    def _assign_coarse(self, keys: np.ndarray) -> np.ndarray:
        # Assignment and probing both use inner product, matching the
        # similarity metric of the search itself.
        return (keys @ self.coarse_centroids.T).argmax(axis=1)

    def encode_residuals(self, residuals: np.ndarray) -> np.ndarray:
        n = residuals.shape[0]
        m, dsub = self.params.m, self.dsub
        codes = np.empty((n, m), dtype=np.uint8)
        sub = np.ascontiguousarray(residuals.reshape(n, m, dsub), dtype=np.float32)
        for j in range(m):
            d = _pairwise_sq_dists(sub[:, j, :], self.pq_codebooks[j])
            codes[:, j] = d.argmin(axis=1).astype(np.uint8)
        return codes

    def decode(self, list_no: int, codes: np.ndarray) -> np.ndarray:
        """Reconstruct approximate keys: centroid + decoded residual."""
        m, dsub = self.params.m, self.dsub
        recon = np.empty((codes.shape[0], self.dim), dtype=np.float32)
        for j in range(m):
            recon[:, j * dsub : (j + 1) * dsub] = self.pq_codebooks[j][codes[:, j]]
        return recon + self.coarse_centroids[list_no]


def train_ivfpq(keys, params: IvfPqParams) -> IvfPqIndex:
    """Train the coarse quantizer on the keys and PQ codebooks on residuals."""
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    if keys.ndim != 2:
        raise InvalidInputError("keys must be an (N, D) matrix")
    n, dim = keys.shape
    if dim % params.m != 0:
        raise InvalidInputError(f"dim {dim} not divisible by m={params.m}")
    if n < max(params.nlist, params.ksub):
        raise InvalidInputError(
            f"need at least {max(params.nlist, params.ksub)} training points, got {n}"
        )
    seeds = np.random.SeedSequence(params.seed).spawn(params.m + 1)
    coarse = kmeans(keys, params.nlist, iters=params.kmeans_iters,
                    seed=np.random.Generator(np.random.PCG64(seeds[0])))
    assign = (keys @ coarse.T).argmax(axis=1)
    residuals = keys - coarse[assign]
    dsub = dim // params.m
    sub = residuals.reshape(n, params.m, dsub)
    codebooks = np.empty((params.m, params.ksub, dsub), dtype=np.float32)
    for j in range(params.m):
        codebooks[j] = kmeans(sub[:, j, :], params.ksub, iters=params.kmeans_iters,
                              seed=np.random.Generator(np.random.PCG64(seeds[j + 1])))
    return IvfPqIndex(params=params, dim=dim, coarse_centroids=coarse,
                      pq_codebooks=codebooks)


def ivfpq_add(index: IvfPqIndex, ids, keys) -> None:
    """Assign keys to their nearest coarse list and store PQ codes."""
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    ids = np.asarray(ids, dtype=np.int64)
    if keys.ndim != 2 or keys.shape[1] != index.dim:
        raise InvalidInputError(f"keys must be (N, {index.dim})")
    if ids.shape[0] != keys.shape[0]:
        raise InvalidInputError("ids and keys must have equal length")
    new_ids = set(int(i) for i in ids)
    if len(new_ids) != ids.shape[0] or index._known_ids & new_ids:
        raise InvalidInputError("duplicate entry id in add")
    assign = index._assign_coarse(keys)
    residuals = keys - index.coarse_centroids[assign]
    codes = index.encode_residuals(residuals)
    for list_no in np.unique(assign):
        sel = assign == list_no
        index.list_ids[list_no] = np.concatenate([index.list_ids[list_no], ids[sel]])
        index.list_codes[list_no] = np.concatenate([index.list_codes[list_no], codes[sel]])
    index._known_ids |= new_ids


def ivfpq_search(index: IvfPqIndex, query, nprobe: int, recall_size: int) -> list[SearchHit]:
    """Probe the nprobe nearest lists and return the approximate top candidates.

    Scores are asymmetric: exact query against reconstructed
    (centroid + codeword) entries, via per-subspace lookup tables.
    """
    if index.coarse_centroids is None or index.pq_codebooks is None:
        raise IndexStateError("index is not trained")
    query = np.asarray(query, dtype=np.float32)
    if query.shape != (index.dim,):
        raise InvalidInputError(f"query dim {query.shape} != index dim {index.dim}")
    if nprobe < 1 or nprobe > index.params.nlist:
        raise InvalidInputError(f"nprobe must be in [1, nlist], got {nprobe}")
    if recall_size < 1:
        raise InvalidInputError(f"recall_size must be >= 1, got {recall_size}")

    coarse_scores = (index.coarse_centroids @ query).astype(np.float64)
    probe_order = np.lexsort((np.arange(index.params.nlist), -coarse_scores))[:nprobe]

    m, dsub = index.params.m, index.dsub
    # lut[j, code] = <query_sub_j, codeword>
    lut = np.einsum("mkd,md->mk", index.pq_codebooks, query.reshape(m, dsub))

    probed = [list_no for list_no in probe_order if index.list_ids[list_no].shape[0] > 0]
    if not probed:
        return []
    all_ids = np.concatenate([index.list_ids[l] for l in probed])
    all_codes = np.concatenate([index.list_codes[l] for l in probed])
    lengths = [index.list_ids[l].shape[0] for l in probed]
    coarse_part = np.repeat(coarse_scores[probed], lengths)
    res_scores = lut[np.arange(m)[None, :], all_codes].sum(axis=1, dtype=np.float64)
    return _sorted_hits(all_ids, res_scores + coarse_part, recall_size)


def rescore(keys_source, candidates: list[SearchHit], query, k: int) -> list[SearchHit]:
    """Re-rank candidates with exact full-precision inner products.

    keys_source may be a MemoryBank, a FlatIndex, or an (N, D) key matrix.
    """
    if hasattr(keys_source, "keys_matrix"):
        keys = keys_source.keys_matrix()
    elif isinstance(keys_source, FlatIndex):
        keys = keys_source.keys
    else:
        keys = np.asarray(keys_source, dtype=np.float32)
    if not candidates:
        return []
    ids = np.asarray([h.entry_id for h in candidates], dtype=np.int64)
    if ids.min() < 0 or ids.max() >= keys.shape[0]:
        raise InvalidInputError("candidate entry id out of range")
    scores = exact_scores(keys[ids], query)
    return _sorted_hits(ids, scores, k)


# --- persistence -----------------------------------------------------------

def save_index(index: IvfPqIndex, path) -> None:
    w = Writer()
    w.magic(INDEX_MAGIC).u32(INDEX_VERSION)
    w.json_block(index.params.as_dict())
    w.u32(index.dim)
    w.f32_array(index.coarse_centroids)
    w.f32_array(index.pq_codebooks)
    for ids, codes in zip(index.list_ids, index.list_codes):
        w.u64(ids.shape[0])
        w.i64_array(ids)
        w.u8_array(codes)
    atomic_write_bytes(path, w.getvalue())


def load_index(path) -> IvfPqIndex:
    r = Reader(read_file(path))
    r.magic(INDEX_MAGIC)
    version = r.u32()
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}", offset=4)
    params = IvfPqParams(**r.json_block())
    dim = r.u32()
    coarse = r.f32_array(params.nlist * dim, shape=(params.nlist, dim))
    dsub = dim // params.m
    codebooks = r.f32_array(params.m * params.ksub * dsub,
                            shape=(params.m, params.ksub, dsub))
    list_ids, list_codes = [], []
    for _ in range(params.nlist):
        n = r.u64()
        list_ids.append(r.i64_array(n))
        list_codes.append(r.u8_array(n * params.m, shape=(n, params.m)))
    r.expect_eof()
    return IvfPqIndex(params=params, dim=dim, coarse_centroids=coarse,
                      pq_codebooks=codebooks, list_ids=list_ids, list_codes=list_codes)
