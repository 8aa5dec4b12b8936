"""Memory-guided prompt refinement and label-constrained logit masking.

Each anchor yields one refined prompt per feature scale: a bilinearly sampled
sparse feature and a heatmap-weighted dense window feature are projected and
added to the original prompt prior, then layer-normalized. Refined prompts
carry their source category; label-constrained decoding masks every other
category's logit to -inf, while prompts marked with the unconstrained
sentinel are left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, MissingEmbeddingError
from .grids import Point2D, as_grid, as_scalar_map, as_vector, bilinear_sample, inner, layer_norm
from .priors import AnchorSet, DensePrior
from .serial import Reader, Writer, atomic_write_bytes, read_file

PARAMS_MAGIC = "PPRM"
PARAMS_VERSION = 1
DEFAULT_WINDOW = 5

# Source label marking a detector-native prompt whose logits stay unmasked.
UNCONSTRAINED = "__unconstrained__"


@dataclass
class RefinementParams:
    """Prompt prior, projections, and layer-norm parameters for one scale set."""

    e: np.ndarray          # (D,)
    w_sparse: np.ndarray   # (D, D)
    w_dense: np.ndarray    # (D, D)
    ln_gain: np.ndarray    # (D,)
    ln_bias: np.ndarray    # (D,)
    ln_eps: float = 1e-5
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        self.e = as_vector(self.e)
        d = self.e.shape[0]
        self.w_sparse = np.asarray(self.w_sparse, dtype=np.float32)
        self.w_dense = np.asarray(self.w_dense, dtype=np.float32)
        self.ln_gain = as_vector(self.ln_gain)
        self.ln_bias = as_vector(self.ln_bias)
        if self.w_sparse.shape != (d, d) or self.w_dense.shape != (d, d):
            raise InvalidInputError("projection matrices must be (D, D)")
        if self.ln_gain.shape[0] != d or self.ln_bias.shape[0] != d:
            raise InvalidInputError("layer-norm gain/bias must match dimension D")
        if self.ln_eps <= 0:
            raise InvalidInputError("ln_eps must be > 0")
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidInputError(f"window must be odd and positive, got {self.window}")

    @property
    def dim(self) -> int:
        return self.e.shape[0]

    @classmethod
    def zero_init(cls, dim: int, window: int = DEFAULT_WINDOW) -> "RefinementParams":
        """Identity layer norm, zero projections: the no-memory baseline."""
        return cls(
            e=np.zeros(dim, dtype=np.float32),
            w_sparse=np.zeros((dim, dim), dtype=np.float32),
            w_dense=np.zeros((dim, dim), dtype=np.float32),
            ln_gain=np.ones(dim, dtype=np.float32),
            ln_bias=np.zeros(dim, dtype=np.float32),
            window=window,
        )

    @classmethod
    def seeded_init(cls, dim: int, seed: int = 0,
                    window: int = DEFAULT_WINDOW) -> "RefinementParams":
        """Deterministic random parameters for property tests and demos."""
        rng = np.random.Generator(np.random.PCG64(seed))
        scale = 1.0 / np.sqrt(dim)
        return cls(
            e=rng.standard_normal(dim).astype(np.float32),
            w_sparse=(rng.standard_normal((dim, dim)) * scale).astype(np.float32),
            w_dense=(rng.standard_normal((dim, dim)) * scale).astype(np.float32),
            ln_gain=np.ones(dim, dtype=np.float32),
            ln_bias=np.zeros(dim, dtype=np.float32),
            window=window,
        )


@dataclass
class MemoryGuidedPrompt:
    embedding: np.ndarray
    source_category: str
    anchor: Point2D
    scale_index: int


@dataclass
class LogitsMatrix:
    """Prompt-by-category logits with the prompts' source categories attached."""

    values: np.ndarray            # (n_prompts, n_categories) float32, -inf allowed
    categories: list[str]
    sources: list[str]

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise InvalidInputError("candidate categories must be unique")
        if self.values.shape != (len(self.sources), len(self.categories)):
            raise InvalidInputError("logits shape must be (len(sources), len(categories))")


def sparse_feature(features, anchor: Point2D) -> np.ndarray:
    """Bilinear feature sample at the anchor location."""
    return bilinear_sample(features, anchor)


def dense_feature(features, heat, anchor: Point2D, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Heatmap-weighted feature sum over a window centered at the anchor's cell.

    Weights are used exactly as given (no normalization); the window is
    clipped at the grid borders.
    """
    features = as_grid(features)
    heat = as_scalar_map(heat)
    h, w, _ = features.shape
    if heat.shape != (h, w):
        raise InvalidInputError(f"heatmap shape {heat.shape} != feature shape {(h, w)}")
    if window < 1 or window % 2 == 0:
        raise InvalidInputError(f"window must be odd and positive, got {window}")
    r = min(h - 1, int(anchor.y * h))
    c = min(w - 1, int(anchor.x * w))
    half = window // 2
    r0, r1 = max(0, r - half), min(h, r + half + 1)
    c0, c1 = max(0, c - half), min(w, c + half + 1)
    weighted = heat[r0:r1, c0:c1, None].astype(np.float64) * features[r0:r1, c0:c1].astype(np.float64)
    return weighted.sum(axis=(0, 1)).astype(np.float32)


def resample_heatmap(heat, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling under the cell-center convention; identity on same shape."""
    heat = as_scalar_map(heat)
    h, w = heat.shape
    if target_h < 1 or target_w < 1:
        raise InvalidInputError("target shape must be >= 1 in both dimensions")
    if (h, w) == (target_h, target_w):
        return heat.copy()
    gx = np.clip((np.arange(target_w) + 0.5) / target_w * w - 0.5, 0.0, w - 1.0)
    gy = np.clip((np.arange(target_h) + 0.5) / target_h * h - 0.5, 0.0, h - 1.0)
    c0 = np.floor(gx).astype(int)
    r0 = np.floor(gy).astype(int)
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fx = gx - c0
    fy = gy - r0
    hm = heat.astype(np.float64)
    top = (1.0 - fx)[None, :] * hm[np.ix_(r0, c0)] + fx[None, :] * hm[np.ix_(r0, c1)]
    bot = (1.0 - fx)[None, :] * hm[np.ix_(r1, c0)] + fx[None, :] * hm[np.ix_(r1, c1)]
    out = (1.0 - fy)[:, None] * top + fy[:, None] * bot
    return out.astype(np.float32)


def refine_preactivation(params: RefinementParams, f_s, f_d) -> np.ndarray:
    """e + W_s f_s + W_d f_d, before layer normalization. Linear in (f_s, f_d)."""
    f_s = as_vector(f_s)
    f_d = as_vector(f_d)
    if f_s.shape[0] != params.dim or f_d.shape[0] != params.dim:
        raise InvalidInputError("feature dimensions must match the parameter dimension")
    pre = (
        params.e.astype(np.float64)
        + params.w_sparse.astype(np.float64) @ f_s.astype(np.float64)
        + params.w_dense.astype(np.float64) @ f_d.astype(np.float64)
    )
    return pre.astype(np.float32)


def refine_prompt(params: RefinementParams, f_s, f_d) -> np.ndarray:
    """Layer-normalized fusion of the prompt prior with sparse and dense features."""
    pre = refine_preactivation(params, f_s, f_d)
    return layer_norm(pre, params.ln_gain, params.ln_bias, params.ln_eps)


def refine_all(scales, prior: DensePrior, anchors: AnchorSet,
               params, category: str) -> list[MemoryGuidedPrompt]:
    """Refine every (scale, anchor) pair, ordered by scale then anchor rank.

    params may be a single RefinementParams shared across scales, or a list
    with one parameter set per scale.
    """
    if isinstance(params, RefinementParams):
        per_scale = [params] * len(scales)
    else:
        per_scale = list(params)
        if len(per_scale) != len(scales):
            raise InvalidInputError("need one parameter set per scale")
    prompts = []
    for s_idx, (features, p) in enumerate(zip(scales, per_scale)):
        features = as_grid(features)
        heat = resample_heatmap(prior.heatmap, features.shape[0], features.shape[1])
        for point, _resp in anchors.anchors:
            f_s = sparse_feature(features, point)
            f_d = dense_feature(features, heat, point, p.window)
            prompts.append(MemoryGuidedPrompt(
                embedding=refine_prompt(p, f_s, f_d),
                source_category=category,
                anchor=point,
                scale_index=s_idx,
            ))
    return prompts


def score_prompts(prompts: list[MemoryGuidedPrompt],
                  category_embs: dict[str, np.ndarray]) -> LogitsMatrix:
    """Stand-in inner-product scoring head over candidate categories."""
    categories = list(category_embs.keys())
    sources = [p.source_category for p in prompts]
    values = np.zeros((len(prompts), len(categories)), dtype=np.float32)
    for j, cat in enumerate(categories):
        emb = category_embs[cat]
        if emb is None:
            raise MissingEmbeddingError(f"no embedding for category {cat!r}")
        for i, p in enumerate(prompts):
            values[i, j] = inner(p.embedding, emb)
    return LogitsMatrix(values=values, categories=categories, sources=sources)


def constrain_logits(logits: LogitsMatrix, sources: list[str] | None = None) -> LogitsMatrix:
    """Mask each constrained prompt's logits to -inf outside its source category.

    Rows whose source is the UNCONSTRAINED sentinel are left fully unmasked.
    """
    if sources is None:
        sources = logits.sources
    if len(sources) != logits.values.shape[0]:
        raise InvalidInputError("sources length must equal row count")
    col_of = {c: j for j, c in enumerate(logits.categories)}
    masked = logits.values.copy()
    for i, src in enumerate(sources):
        if src == UNCONSTRAINED:
            continue
        if src not in col_of:
            raise InvalidInputError(f"source category {src!r} not in candidate columns")
        keep = masked[i, col_of[src]]
        masked[i, :] = -np.inf
        masked[i, col_of[src]] = keep
    return LogitsMatrix(values=masked, categories=list(logits.categories),
                        sources=list(sources))


# --- parameter persistence ---------------------------------------------------

def save_params(params, path) -> None:
    """Write one shared parameter set or a per-scale list to a PPRM file."""
    per_scale = not isinstance(params, RefinementParams)
    sets = list(params) if per_scale else [params]
    dim = sets[0].dim
    if any(p.dim != dim or p.window != sets[0].window or p.ln_eps != sets[0].ln_eps
           for p in sets):
        raise InvalidInputError("all parameter sets must share dim, window, ln_eps")
    w = Writer()
    w.magic(PARAMS_MAGIC).u32(PARAMS_VERSION)
    w.u32(dim).u32(1 if per_scale else 0).u32(len(sets))
    w.u32(sets[0].window).f32(sets[0].ln_eps)
    for p in sets:
        w.f32_array(p.e)
        w.f32_array(p.w_sparse)
        w.f32_array(p.w_dense)
        w.f32_array(p.ln_gain)
        w.f32_array(p.ln_bias)
    atomic_write_bytes(path, w.getvalue())


def load_params(path):
    """Load a PPRM file; returns RefinementParams or a per-scale list."""
    r = Reader(read_file(path))
    r.magic(PARAMS_MAGIC)
    version = r.u32()
    if version != PARAMS_VERSION:
        raise FormatError(f"unsupported parameter version {version}", offset=4)
    dim = r.u32()
    per_scale = r.u32()
    count = r.u32()
    window = r.u32()
    ln_eps = r.f32()
    sets = []
    for _ in range(count):
        sets.append(RefinementParams(
            e=r.f32_array(dim),
            w_sparse=r.f32_array(dim * dim, shape=(dim, dim)),
            w_dense=r.f32_array(dim * dim, shape=(dim, dim)),
            ln_gain=r.f32_array(dim),
            ln_bias=r.f32_array(dim),
            ln_eps=ln_eps,
            window=window,
        ))
    r.expect_eof()
    if per_scale:
        return sets
    return sets[0]
