"""End-to-end orchestration: configuration, the per-category pipeline, and
retrieval benchmarking.
"""

from __future__ import annotations

import configparser
import io
import time
from dataclasses import dataclass, fields

import numpy as np

from .bank import EmbeddingProvider, KeyWeights, MemoryBank, entry_stride
from .errors import InvalidInputError, VismemError
from .index import FlatIndex, IvfPqIndex, IvfPqParams, SearchHit, flat_search
from .priors import (
    AnchorSet,
    DensePrior,
    dense_prior,
    extract_anchors,
    radius_cells_to_normalized,
)
from .refine import (
    LogitsMatrix,
    MemoryGuidedPrompt,
    RefinementParams,
    constrain_logits,
    refine_all,
    score_prompts,
)
from .retrieval import Prototype, aggregate_prototype, build_query, retrieve


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline, with published defaults."""

    w_p: float = 1.0
    w_s: float = 0.3
    w_g: float = 0.01
    k: int = 12
    tau_p: float = 0.07
    recall_size: int = 200
    sigma: float = 1.0
    peak_threshold: float = 0.5
    radius_cells: float = 3.0
    max_anchors: int = 10
    window: int = 5
    nlist: int = 256
    m: int = 16
    nbits: int = 8
    nprobe: int = 16
    min_area: float = 1e-4
    iou_threshold: float = 0.9
    drop_fraction: float = 0.10
    seed: int = 0
    kmeans_iters: int = 25

    _SECTIONS = {
        "weights": ("w_p", "w_s", "w_g"),
        "retrieval": ("k", "tau_p", "recall_size"),
        "priors": ("sigma", "peak_threshold", "radius_cells", "max_anchors"),
        "refine": ("window",),
        "index": ("nlist", "m", "nbits", "nprobe"),
        "filters": ("min_area", "iou_threshold", "drop_fraction"),
        "run": ("seed", "kmeans_iters"),
    }

    def __post_init__(self):
        if self.k < 1 or self.recall_size < 1 or self.max_anchors < 1:
            raise InvalidInputError("k, recall_size and max_anchors must be >= 1")
        if self.tau_p <= 0 or self.sigma < 0:
            raise InvalidInputError("tau_p must be > 0 and sigma >= 0")
        if not (0.0 <= self.peak_threshold <= 1.0):
            raise InvalidInputError("peak_threshold must be in [0, 1]")
        if not (0.0 <= self.drop_fraction < 1.0):
            raise InvalidInputError("drop_fraction must be in [0, 1)")
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidInputError("window must be odd and positive")

    def weights(self) -> KeyWeights:
        return KeyWeights(self.w_p, self.w_s, self.w_g)

    def index_params(self) -> IvfPqParams:
        return IvfPqParams(nlist=self.nlist, m=self.m, nbits=self.nbits,
                           seed=self.seed, kmeans_iters=self.kmeans_iters)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        valid = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(valid)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in self._SECTIONS.items():
            parser[section] = {k: repr(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        values: dict = {}
        int_fields = {f.name for f in fields(cls) if f.type in (int, "int")}
        for section in parser.sections():
            if section not in cls._SECTIONS:
                raise InvalidInputError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in cls._SECTIONS[section]:
                    raise InvalidInputError(f"unknown config key {key!r} in [{section}]")
                values[key] = int(raw) if key in int_fields else float(raw)
        return cls(**values)


def save_config(config: PipelineConfig, path) -> None:
    from .serial import atomic_write_bytes

    atomic_write_bytes(path, config.to_ini().encode("utf-8"))


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as f:
        return PipelineConfig.from_ini(f.read())


@dataclass
class CategoryResult:
    """Everything the pipeline produced for one candidate category."""

    category: str
    hits: list[SearchHit]
    prototype: Prototype
    prior: DensePrior | None
    anchors: AnchorSet | None
    prompts: list[MemoryGuidedPrompt]
    logits: LogitsMatrix | None


def run_pipeline(config: PipelineConfig, bank: MemoryBank, index,
                 provider: EmbeddingProvider, image_id: str,
                 categories: list[str], params,
                 scene: str = "", scales=None,
                 exclude_image: str | None = None) -> dict[str, CategoryResult]:
    """Run query -> retrieval -> prototype -> priors -> refinement ->
    label-constrained scoring for each candidate category.

    The input feature grid doubles as the single detector scale unless
    explicit scales are given. Prototypes of non-empty categories serve as
    the stand-in classification embeddings.
    """
    if scales is None:
        scales = [provider.feature_grid(image_id)]
    input_grid = provider.feature_grid(image_id)
    weights = config.weights()

    results: dict[str, CategoryResult] = {}
    prototypes: dict[str, Prototype] = {}
    for category in categories:
        stage = "build_query"
        try:
            query = build_query(provider, category, scene, image_id, weights)
            stage = "retrieve"
            hits = retrieve(bank, index, query, k=config.k,
                            exclude_image=exclude_image, nprobe=config.nprobe,
                            recall_size=config.recall_size)
            stage = "aggregate_prototype"
            proto = aggregate_prototype(bank, hits, query, tau=config.tau_p)
            prototypes[category] = proto
            if proto.is_empty:
                results[category] = CategoryResult(
                    category=category, hits=[], prototype=proto, prior=None,
                    anchors=None, prompts=[], logits=None)
                continue
            stage = "dense_prior"
            prior = dense_prior(input_grid, proto, sigma=config.sigma)
            stage = "extract_anchors"
            radius = radius_cells_to_normalized(
                config.radius_cells, prior.heatmap.shape[0], prior.heatmap.shape[1])
            anchors = extract_anchors(prior, threshold=config.peak_threshold,
                                      radius=radius, max_anchors=config.max_anchors)
            stage = "refine_all"
            prompts = refine_all(scales, prior, anchors, params, category)
            results[category] = CategoryResult(
                category=category, hits=hits, prototype=proto, prior=prior,
                anchors=anchors, prompts=prompts, logits=None)
        except VismemError as exc:
            raise type(exc)(f"[stage {stage}, category {category!r}] {exc}") from exc

    category_embs = {c: p.vector for c, p in prototypes.items() if not p.is_empty}
    for category, result in results.items():
        if not result.prompts or not category_embs:
            continue
        try:
            logits = score_prompts(result.prompts, category_embs)
            result.logits = constrain_logits(logits)
        except VismemError as exc:
            raise type(exc)(f"[stage score_prompts, category {category!r}] {exc}") from exc
    return results


def pipeline_report(config: PipelineConfig, results: dict[str, CategoryResult],
                    image_id: str) -> dict:
    """JSON-serializable per-image report of the pipeline run."""
    per_category = {}
    for category, res in results.items():
        argmaxes = []
        if res.logits is not None:
            for row in res.logits.values:
                argmaxes.append(res.logits.categories[int(np.argmax(row))])
        per_category[category] = {
            "retrieval": [
                {"entry_id": eid, "score": score, "alpha": alpha}
                for eid, score, alpha in res.prototype.neighbors
            ],
            "prototype_norm": float(np.linalg.norm(res.prototype.vector)),
            "anchors": [
                {"x": p.x, "y": p.y, "response": resp}
                for p, resp in (res.anchors.anchors if res.anchors else [])
            ],
            "prompt_count": len(res.prompts),
            "masked_argmax": argmaxes,
        }
    return {
        "image_id": image_id,
        "categories": list(results.keys()),
        "config": config.to_dict(),
        "results": per_category,
    }


@dataclass
class BenchReport:
    queries_per_second: float
    recall_at_k: float
    k: int
    per_entry_bytes: int
    query_count: int
    repetitions: int

    def as_dict(self) -> dict:
        return {
            "queries_per_second": self.queries_per_second,
            "recall_at_k": self.recall_at_k,
            "k": self.k,
            "per_entry_bytes": self.per_entry_bytes,
            "query_count": self.query_count,
            "repetitions": self.repetitions,
        }


def bench_queries(bank: MemoryBank, query_count: int, seed: int) -> np.ndarray:
    """Deterministic query set: perturbed copies of randomly chosen bank keys."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    keys = bank.keys_matrix()
    picks = rng.integers(0, keys.shape[0], size=query_count)
    noisy = keys[picks].astype(np.float64) + 0.1 * rng.standard_normal((query_count, bank.d_key))
    norms = np.linalg.norm(noisy, axis=1, keepdims=True)
    return (noisy / np.where(norms > 1e-12, norms, 1.0)).astype(np.float32)


def bench(bank: MemoryBank, index, query_count: int = 100, seed: int = 0,
          k: int = 12, nprobe: int = 16, recall_size: int = 200,
          repetitions: int = 3) -> BenchReport:
    """Median-of-repetitions retrieval throughput and recall@k vs the flat oracle."""
    if len(bank) == 0:
        raise InvalidInputError("cannot benchmark an empty bank")
    queries = bench_queries(bank, query_count, seed)
    flat = FlatIndex.from_bank(bank)

    def search_one(q):
        if isinstance(index, IvfPqIndex):
            return retrieve(bank, index, _RawQuery(q), k=k,
                            nprobe=nprobe, recall_size=recall_size)
        return flat_search(index, q, k)

    total_overlap = 0.0
    for q in queries:
        hits = search_one(q)
        exact = flat_search(flat, q, k)
        total_overlap += len({h.entry_id for h in hits}
                             & {h.entry_id for h in exact}) / max(len(exact), 1)
    recall = total_overlap / query_count

    timings = []
    for _ in range(max(repetitions, 3)):
        start = time.perf_counter()
        for q in queries:
            search_one(q)
        timings.append(time.perf_counter() - start)
    elapsed = float(np.median(timings))
    return BenchReport(
        queries_per_second=query_count / elapsed if elapsed > 0 else float("inf"),
        recall_at_k=recall,
        k=k,
        per_entry_bytes=entry_stride(bank.d_key, bank.d_val),
        query_count=query_count,
        repetitions=max(repetitions, 3),
    )


class _RawQuery:
    """Adapter: a bare vector in place of a RetrievalQuery for benchmarking."""

    def __init__(self, vector: np.ndarray):
        self.vector = vector
        self.category = ""
        self.scene = ""
        self.image_id = ""
