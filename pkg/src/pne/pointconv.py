"""Generalized point convolution.

Per query point x with neighbors N(x):

    out_o(x) = norm * sum_{y in N(x)} sum_c f_c(y) <kappa[c, o, :], P e(y - x)>  (+ bias_o)

where e is the neighborhood embedding, P projects the embedding's native
dimension to a common dimension E_c (equalizing parameter counts across
embedding kinds) and kappa is the learnable kernel tensor (I x O x E_c).

norm is 1 ("sum", the literal definition) or 1/|N(x)| ("mean", the default:
ball query yields variable neighbor counts and unnormalized sums scale with
point density). Queries with empty neighborhoods output the bias (or 0).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sparse

from .errors import ShapeError

SUM = "sum"
MEAN = "mean"


@dataclass
class ConvSite:
    """Geometry binding of a convolution: the neighbor structure between a
    query and a support cloud, with precomputed relative offsets.

    `cached_embed` may hold precomputed embedding values for embeddings
    without learnable parameters (kernel-point, identity)."""

    neighbors: object
    offsets: np.ndarray          # (T, 3) support - query per stored pair
    query_ids: np.ndarray        # (T,)
    counts: np.ndarray           # (M,)
    num_support: int
    cached_embed: Optional[np.ndarray] = None
    seg_sum: object = None       # (M, T) sparse pair-to-query summation
    scatter: object = None       # (N, T) sparse pair-to-support scatter


def make_site(query, support, neighbors, embedding=None):
    """Build a ConvSite; optionally precompute embeddings for fixed kinds."""
    qid = neighbors.query_ids()
    offsets = support.positions[neighbors.indices] - query.positions[qid]
    t = len(qid)
    ones = np.ones(t)
    cols = np.arange(t)
    site = ConvSite(
        neighbors=neighbors,
        offsets=offsets,
        query_ids=qid,
        counts=neighbors.counts,
        num_support=len(support),
        seg_sum=sparse.csr_matrix((ones, (qid, cols)), shape=(len(query), t)),
        scatter=sparse.csr_matrix((ones, (neighbors.indices, cols)),
                                  shape=(len(support), t)),
    )
    if embedding is not None and not embedding.params():
        site.cached_embed = embedding.embed(offsets)
    return site


@dataclass
class ConvLayer:
    embedding: object
    projection: np.ndarray       # (E_raw, E_c)
    kernel: np.ndarray           # (I, O, E_c)
    bias: Optional[np.ndarray] = None
    normalize: str = MEAN

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.projection.ndim != 2:
            raise ShapeError("projection must be 2-d")
        if self.projection.shape[0] != self.embedding.raw_dim:
            raise ShapeError("projection input dim must equal embedding raw_dim")
        if self.kernel.ndim != 3 or self.kernel.shape[2] != self.projection.shape[1]:
            raise ShapeError("kernel must be (I, O, E_c) with E_c matching projection")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.kernel.shape[1],):
                raise ShapeError("bias must be (O,)")
        if self.normalize not in (SUM, MEAN):
            raise ValueError(f"normalize must be 'sum' or 'mean', got {self.normalize!r}")
        for arr in (self.projection, self.kernel) + ((self.bias,) if self.bias is not None else ()):
            if not np.all(np.isfinite(arr)):
                raise ValueError("layer parameters must be finite")

    @property
    def in_features(self):
        return self.kernel.shape[0]

    @property
    def out_features(self):
        return self.kernel.shape[1]


@dataclass
class ConvGradients:
    d_features: np.ndarray
    d_kernel: np.ndarray
    d_projection: np.ndarray
    d_embedding_params: dict
    d_bias: Optional[np.ndarray] = None
    d_offsets: Optional[np.ndarray] = None


def _segment_sum(values, counts, offsets):
    """Sum `values` (T, ...) into per-query slots (M, ...). Pairs are stored
    contiguously per query, so reduceat over non-empty segment starts works."""
    m = len(counts)
    out = np.zeros((m,) + values.shape[1:])
    nz = counts > 0
    if nz.any():
        starts = offsets[:-1][nz]
        out[nz] = np.add.reduceat(values, starts, axis=0)
    return out


def _norm_weights(layer, counts):
    if layer.normalize == SUM:
        return np.ones(len(counts))
    w = np.zeros(len(counts))
    nz = counts > 0
    w[nz] = 1.0 / counts[nz]
    return w


def _forward_site(layer, site, features):
    if features.shape != (site.num_support, layer.in_features):
        raise ShapeError(
            f"features must be ({site.num_support}, {layer.in_features}), got {features.shape}"
        )
    e = site.cached_embed if site.cached_embed is not None else layer.embedding.embed(site.offsets)
    g = e @ layer.projection                                   # (T, E_c)
    fn = features[site.neighbors.indices]                      # (T, I)
    i, o, ec = layer.kernel.shape
    # sum the feature x embedding outer products per query first, then
    # contract with the kernel once per query (the sums commute)
    z = (fn[:, :, None] * g[:, None, :]).reshape(-1, i * ec)   # (T, I*E_c)
    if site.seg_sum is not None:
        zq = site.seg_sum @ z                                  # (M, I*E_c)
    else:
        zq = _segment_sum(z, site.counts, site.neighbors.offsets)
    w = _norm_weights(layer, site.counts)
    out = (zq @ layer.kernel.transpose(0, 2, 1).reshape(i * ec, o)) * w[:, None]
    if layer.bias is not None:
        out = out + layer.bias
    cache = (e, g, fn, zq, w)
    return out, cache


def _backward_site(layer, site, features, upstream, cache, with_offsets=False):
    e, g, fn, zq, w = cache
    m = len(site.counts)
    if upstream.shape != (m, layer.out_features):
        raise ShapeError(f"upstream must be ({m}, {layer.out_features})")
    i, o, ec = layer.kernel.shape
    uq = upstream * w[:, None]                                 # (M, O)
    d_kernel = (zq.T @ uq).reshape(i, ec, o).transpose(0, 2, 1)
    k2 = layer.kernel.transpose(0, 2, 1).reshape(i * ec, o)
    dz = (uq @ k2.T)[site.query_ids].reshape(-1, i, ec)        # (T, I, E_c)
    d_g = np.matmul(fn[:, None, :], dz)[:, 0, :]               # (T, E_c)
    d_projection = e.T @ d_g
    d_e = d_g @ layer.projection.T
    d_fn = np.matmul(dz, g[:, :, None])[:, :, 0]               # (T, I)
    if site.scatter is not None:
        d_features = site.scatter @ d_fn
    else:
        d_features = np.zeros_like(features)
        np.add.at(d_features, site.neighbors.indices, d_fn)
    d_bias = upstream.sum(axis=0) if layer.bias is not None else None
    d_emb = layer.embedding.gradient_params(site.offsets, d_e)
    d_offsets = None
    if with_offsets:
        jac = layer.embedding.jacobian_offsets(site.offsets)   # (T, E_raw, 3)
        d_offsets = np.einsum("te,tec->tc", d_e, jac)
    return ConvGradients(
        d_features=d_features,
        d_kernel=d_kernel,
        d_projection=d_projection,
        d_embedding_params=d_emb,
        d_bias=d_bias,
        d_offsets=d_offsets,
    )


def conv_forward(layer, query, support, neighbors, features):
    """Forward evaluation; query and support may be different clouds."""
    features = np.asarray(features, dtype=np.float64)
    site = make_site(query, support, neighbors, layer.embedding)
    out, _ = _forward_site(layer, site, features)
    return out


def conv_backward(layer, query, support, neighbors, features, upstream, with_offsets=False):
    """Exact gradients of conv_forward w.r.t. features, kernel, projection,
    embedding parameters and bias. Offset gradients (through e(y - x)) are
    computed on request; they are not consumed by the optimizer."""
    features = np.asarray(features, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    site = make_site(query, support, neighbors, layer.embedding)
    _, cache = _forward_site(layer, site, features)
    return _backward_site(layer, site, features, upstream, cache, with_offsets=with_offsets)


def _truncated_normal(rng, std, size, clip=2.0):
    out = rng.standard_normal(size) * std
    bad = np.abs(out) > clip * std
    while bad.any():
        out[bad] = rng.standard_normal(bad.sum()) * std
        bad = np.abs(out) > clip * std
    return out


def init_conv_layer(embedding, in_features, out_features, embed_dim=16, seed=0,
                    bias=True, normalize=MEAN):
    """Kernel ~ N(0, 1/(E_c * I)) truncated at 2 std; projection ~ N(0, 1/E_raw);
    bias zero. Deterministic per seed."""
    if min(in_features, out_features, embed_dim) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    kernel = _truncated_normal(
        rng, np.sqrt(1.0 / (embed_dim * in_features)), (in_features, out_features, embed_dim)
    )
    projection = rng.standard_normal((embedding.raw_dim, embed_dim)) * np.sqrt(
        1.0 / embedding.raw_dim
    )
    b = np.zeros(out_features) if bias else None
    return ConvLayer(embedding, projection, kernel, bias=b, normalize=normalize)
