"""Metaformer blocks with point-convolution token mixers, the multi-level
encoder over cell-average pyramids, the classification head, and the
sum-based skip-connection decoder.

Forward/backward for one network instance is single-threaded: every module
stores its forward cache and the matching backward must run before the next
forward. Parameters live in numpy arrays that the optimizer updates in
place; `params()` / `grads()` expose them under stable dotted names.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics
from .embeddings import (
    IdentityEmbedding,
    KernelPointEmbedding,
    default_kernel_layout,
    grid_kernel_points,
    icosahedron_kernel_points,
    init_mlp_embedding,
)
from .errors import DegenerateInputError, ShapeError
from .geometry import PointCloud, ball_query, cell_average_subsample, knn
from .pointconv import ConvLayer, _backward_site, _forward_site, init_conv_layer, make_site


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


class Module:
    def params(self):
        return {}

    def grads(self):
        return {}

    def zero_grads(self):
        for g in self.grads().values():
            g[...] = 0.0


class Linear(Module):
    def __init__(self, weights, bias):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("linear layer shapes disagree")
        self.g_weights = np.zeros_like(self.weights)
        self.g_bias = np.zeros_like(self.bias)
        self._cache = None

    @classmethod
    def init(cls, d_in, d_out, rng):
        w = rng.standard_normal((d_in, d_out)) * np.sqrt(1.0 / d_in)
        return cls(w, np.zeros(d_out))

    def forward(self, x):
        self._cache = x
        return x @ self.weights + self.bias

    def backward(self, up):
        x = self._cache
        self.g_weights += x.T @ up
        self.g_bias += up.sum(axis=0)
        return up @ self.weights.T

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def grads(self):
        return {"weights": self.g_weights, "bias": self.g_bias}


class LayerNorm(Module):
    """Per-point normalization over the feature vector, learnable scale+shift.

    Chosen over batch statistics to avoid coupling across variable-size
    clouds."""

    def __init__(self, dim, eps=1e-5):
        self.scale = np.ones(dim)
        self.shift = np.zeros(dim)
        self.eps = eps
        self.g_scale = np.zeros(dim)
        self.g_shift = np.zeros(dim)
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = np.square(xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.scale + self.shift

    def backward(self, up):
        xhat, inv = self._cache
        d = xhat.shape[1]
        self.g_scale += (up * xhat).sum(axis=0)
        self.g_shift += up.sum(axis=0)
        dxhat = up * self.scale
        return (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def grads(self):
        return {"scale": self.g_scale, "shift": self.g_shift}


class ConvModule(Module):
    """A ConvLayer bound to a named geometry site of the prepared sample."""

    def __init__(self, layer, site_name):
        self.layer = layer
        self.site_name = site_name
        self.g_kernel = np.zeros_like(layer.kernel)
        self.g_projection = np.zeros_like(layer.projection)
        self.g_bias = np.zeros_like(layer.bias) if layer.bias is not None else None
        self.g_embedding = {k: np.zeros_like(v) for k, v in layer.embedding.params().items()}
        self._cache = None

    def forward(self, prep, features):
        site = prep.sites[self.site_name]
        out, cache = _forward_site(self.layer, site, features)
        self._cache = (site, features, cache)
        return out

    def backward(self, up):
        site, features, cache = self._cache
        g = _backward_site(self.layer, site, features, up, cache)
        self.g_kernel += g.d_kernel
        self.g_projection += g.d_projection
        if self.g_bias is not None:
            self.g_bias += g.d_bias
        for k, v in g.d_embedding_params.items():
            self.g_embedding[k] += v
        return g.d_features

    def params(self):
        out = {"kernel": self.layer.kernel, "projection": self.layer.projection}
        if self.layer.bias is not None:
            out["bias"] = self.layer.bias
        out.update(_prefixed("emb", self.layer.embedding.params()))
        return out

    def grads(self):
        out = {"kernel": self.g_kernel, "projection": self.g_projection}
        if self.g_bias is not None:
            out["bias"] = self.g_bias
        out.update(_prefixed("emb", self.g_embedding))
        return out


class MetaformerBlock(Module):
    """Two pre-norm residual sub-blocks: point-conv mixer, then a point-wise
    MLP whose hidden layer doubles the width. Drop path zeroes a residual
    branch per sample during training (scaled by 1/(1-rate) when kept)."""

    def __init__(self, mixer, width, rng, drop_path_rate=0.0):
        self.norm1 = LayerNorm(width)
        self.norm2 = LayerNorm(width)
        self.mixer = mixer
        self.fc1 = Linear.init(width, 2 * width, rng)
        self.fc2 = Linear.init(2 * width, width, rng)
        if not 0.0 <= drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must be in [0, 1)")
        self.drop_path_rate = drop_path_rate
        self._cache = None

    def _draw_keep(self, training, rng):
        if not training or self.drop_path_rate == 0.0:
            return 1.0
        if rng.random() < self.drop_path_rate:
            return 0.0
        return 1.0 / (1.0 - self.drop_path_rate)

    def forward(self, prep, x, training=False, rng=None):
        k1 = self._draw_keep(training, rng)
        k2 = self._draw_keep(training, rng)
        h = self.norm1.forward(x)
        m = self.mixer.forward(prep, h)
        x1 = x + k1 * m
        h2 = self.norm2.forward(x1)
        z = self.fc1.forward(h2)
        a = numerics.activation_forward(numerics.GELU, z)
        u = self.fc2.forward(a)
        out = x1 + k2 * u
        self._cache = (k1, k2, z)
        return out

    def backward(self, up):
        k1, k2, z = self._cache
        da = self.fc2.backward(k2 * up)
        dz = da * numerics.activation_derivative(numerics.GELU, z)
        dh2 = self.fc1.backward(dz)
        dx1 = up + self.norm2.backward(dh2)
        dh = self.mixer.backward(k1 * dx1)
        return dx1 + self.norm1.backward(dh)

    def params(self):
        out = {}
        out.update(_prefixed("norm1", self.norm1.params()))
        out.update(_prefixed("mixer", self.mixer.params()))
        out.update(_prefixed("norm2", self.norm2.params()))
        out.update(_prefixed("fc1", self.fc1.params()))
        out.update(_prefixed("fc2", self.fc2.params()))
        return out

    def grads(self):
        out = {}
        out.update(_prefixed("norm1", self.norm1.grads()))
        out.update(_prefixed("mixer", self.mixer.grads()))
        out.update(_prefixed("norm2", self.norm2.grads()))
        out.update(_prefixed("fc1", self.fc1.grads()))
        out.update(_prefixed("fc2", self.fc2.grads()))
        return out


@dataclass
class EmbeddingSpec:
    """Declarative description of the embedding used by every convolution."""

    kind: str                      # "kp" | "mlp" | "identity"
    correlation: str = "gaussian"  # kp only
    activation: str = "gelu"       # mlp only
    mlp_dim: int = 16
    sigma_factor: float = 1.0
    placement: str = "icosahedron"  # kp only: "icosahedron" | "grid"
    grid_m: int = 3

    def label(self):
        if self.kind == "identity":
            return ("none", "")
        if self.kind == "kp":
            return ("kp", self.correlation)
        return ("mlp", self.activation)


def build_embedding(spec, neighborhood_kind, radius, seed):
    """Instantiate an embedding for one convolution site.

    `radius` is the ball-query radius r, or the average neighbor distance
    r' for kNN sites."""
    if spec.kind == "identity":
        return IdentityEmbedding()
    if spec.kind == "kp":
        shell_radius, sigma = default_kernel_layout(neighborhood_kind, radius, spec.sigma_factor)
        if spec.placement == "icosahedron":
            points = icosahedron_kernel_points(shell_radius)
        elif spec.placement == "grid":
            points = grid_kernel_points(spec.grid_m, shell_radius)
            sigma = spec.sigma_factor * 2.0 * shell_radius / spec.grid_m
        else:
            raise ValueError(f"unknown placement: {spec.placement!r}")
        return KernelPointEmbedding(points, sigma, spec.correlation)
    if spec.kind == "mlp":
        # receptive-field scale: the ball radius, or twice the average
        # neighbor distance for kNN
        rho = radius if neighborhood_kind == "ball_query" else 2.0 * radius
        return init_mlp_embedding(spec.mlp_dim, rho, spec.activation, seed)
    raise ValueError(f"unknown embedding kind: {spec.kind!r}")


@dataclass
class NeighborhoodSpec:
    kind: str            # "knn" | "ball_query"
    k: int = 16
    scale: float = 2.0   # ball radius = scale * cell size
    knn_avg_factor: float = 1.5  # r' estimate = factor * cell size


@dataclass
class EncoderConfig:
    initial_cell: float
    widths: list
    blocks_per_level: list
    neighborhood: NeighborhoodSpec
    embedding: EmbeddingSpec
    embed_dim: int = 16
    drop_path_max: float = 0.0
    normalize: str = "mean"

    def __post_init__(self):
        if len(self.widths) != len(self.blocks_per_level):
            raise ValueError("widths and blocks_per_level must have equal length")
        if self.initial_cell <= 0:
            raise ValueError("initial_cell must be positive")

    @property
    def num_levels(self):
        return len(self.widths)

    def level_cell(self, level):
        return self.initial_cell * 2.0**level


@dataclass
class PreparedSample:
    """Geometry precomputed once per cloud: pyramid and neighbor sites,
    reusable across epochs and across models with the same neighborhood."""

    clouds: list
    initial_features: np.ndarray
    sites: dict
    label: Optional[int] = None


def default_input_features(cloud):
    """Constant 1 plus height above the cloud minimum."""
    z = cloud.positions[:, 2]
    return np.stack([np.ones(len(cloud)), z - z.min()], axis=1)


def _site_radius(config, level):
    """Characteristic radius handed to build_embedding: the ball radius, or
    the estimated average kNN neighbor distance."""
    nb = config.neighborhood
    cell = config.level_cell(level)
    if nb.kind == "ball_query":
        return nb.scale * cell
    return nb.knn_avg_factor * cell


class Encoder(Module):
    def __init__(self, config, in_features=2, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        nb = config.neighborhood
        self.init_linear = Linear.init(in_features, config.widths[0], rng)
        self.levels = []
        self.transitions = []
        total_blocks = sum(config.blocks_per_level)
        depth = 0
        for lvl in range(config.num_levels):
            width = config.widths[lvl]
            blocks = []
            for _ in range(config.blocks_per_level[lvl]):
                rate = 0.0
                if total_blocks > 1:
                    rate = config.drop_path_max * depth / (total_blocks - 1)
                emb = build_embedding(
                    config.embedding, nb.kind, _site_radius(self.config, lvl), seed=rng.integers(2**31)
                )
                layer = init_conv_layer(
                    emb, width, width, config.embed_dim,
                    seed=rng.integers(2**31), normalize=config.normalize,
                )
                mixer = ConvModule(layer, f"self{lvl}")
                blocks.append(MetaformerBlock(mixer, width, rng, drop_path_rate=rate))
                depth += 1
            self.levels.append(blocks)
            if lvl + 1 < config.num_levels:
                emb = build_embedding(
                    config.embedding, nb.kind, _site_radius(self.config, lvl + 1),
                    seed=rng.integers(2**31),
                )
                layer = init_conv_layer(
                    emb, width, config.widths[lvl + 1], config.embed_dim,
                    seed=rng.integers(2**31), normalize=config.normalize,
                )
                self.transitions.append(ConvModule(layer, f"down{lvl}"))

    def _neighbors(self, query, support, level):
        nb = self.config.neighborhood
        if nb.kind == "ball_query":
            return ball_query(query, support, nb.scale * self.config.level_cell(level))
        return knn(query, support, nb.k, grid_cell=self.config.level_cell(level))

    def prepare(self, cloud, initial_features=None, for_decoder=False):
        """Build the pyramid and every neighbor site this network will use."""
        if len(cloud) == 0:
            raise DegenerateInputError("input cloud is empty")
        cfg = self.config
        if initial_features is None:
            initial_features = default_input_features(cloud)
        base = PointCloud(
            cloud.positions, features=initial_features, labels=cloud.labels
        )
        clouds = []
        cur = base
        for lvl in range(cfg.num_levels):
            cur, _ = cell_average_subsample(cur, cfg.level_cell(lvl))
            if len(cur) == 0:
                raise DegenerateInputError(f"pyramid level {lvl} is empty")
            clouds.append(cur)
        sites = {}
        for lvl in range(cfg.num_levels):
            nl = self._neighbors(clouds[lvl], clouds[lvl], lvl)
            sites[f"self{lvl}"] = make_site(clouds[lvl], clouds[lvl], nl)
            if lvl + 1 < cfg.num_levels:
                nl = self._neighbors(clouds[lvl + 1], clouds[lvl], lvl + 1)
                sites[f"down{lvl}"] = make_site(clouds[lvl + 1], clouds[lvl], nl)
                if for_decoder:
                    nl = self._neighbors(clouds[lvl], clouds[lvl + 1], lvl + 1)
                    sites[f"up{lvl}"] = make_site(clouds[lvl], clouds[lvl + 1], nl)
            if for_decoder and lvl >= 1:
                nl = self._neighbors(clouds[0], clouds[lvl], lvl)
                sites[f"direct{lvl}"] = make_site(clouds[0], clouds[lvl], nl)
        return PreparedSample(
            clouds=clouds, initial_features=clouds[0].features, sites=sites
        )

    def forward(self, prep, training=False, rng=None):
        """Returns the post-block feature map of every level."""
        feats = self.init_linear.forward(prep.initial_features)
        per_level = []
        for lvl, blocks in enumerate(self.levels):
            for block in blocks:
                feats = block.forward(prep, feats, training=training, rng=rng)
            per_level.append(feats)
            if lvl + 1 < self.config.num_levels:
                feats = self.transitions[lvl].forward(prep, feats)
        return per_level

    def backward(self, d_per_level):
        """`d_per_level[l]` is the upstream gradient into level l's post-block
        features (zeros where unused)."""
        num = self.config.num_levels
        d_post = d_per_level[num - 1]
        for lvl in range(num - 1, -1, -1):
            d = d_post
            for block in reversed(self.levels[lvl]):
                d = block.backward(d)
            if lvl > 0:
                d_post = d_per_level[lvl - 1] + self.transitions[lvl - 1].backward(d)
            else:
                self.init_linear.backward(d)

    def params(self):
        out = _prefixed("init", self.init_linear.params())
        for lvl, blocks in enumerate(self.levels):
            for bi, block in enumerate(blocks):
                out.update(_prefixed(f"l{lvl}.b{bi}", block.params()))
        for lvl, tr in enumerate(self.transitions):
            out.update(_prefixed(f"down{lvl}", tr.params()))
        return out

    def grads(self):
        out = _prefixed("init", self.init_linear.grads())
        for lvl, blocks in enumerate(self.levels):
            for bi, block in enumerate(blocks):
                out.update(_prefixed(f"l{lvl}.b{bi}", block.grads()))
        for lvl, tr in enumerate(self.transitions):
            out.update(_prefixed(f"down{lvl}", tr.grads()))
        return out


def classify(per_level_feats, head):
    """Global mean pooling over the last level's point features, then a
    linear head producing class logits (shape (1, num_classes))."""
    last = per_level_feats[-1]
    if len(last) == 0:
        raise DegenerateInputError("last pyramid level is empty")
    pooled = last.mean(axis=0, keepdims=True)
    return head.forward(pooled)


class ClassificationNetwork(Module):
    def __init__(self, config, num_classes, in_features=2, seed=0):
        self.encoder = Encoder(config, in_features=in_features, seed=seed)
        rng = np.random.default_rng(np.random.default_rng(seed).integers(2**31) + 1)
        self.head = Linear.init(config.widths[-1], num_classes, rng)
        self._cache = None

    @property
    def config(self):
        return self.encoder.config

    def prepare(self, cloud, initial_features=None):
        return self.encoder.prepare(cloud, initial_features=initial_features)

    def forward(self, prep, training=False, rng=None):
        per_level = self.encoder.forward(prep, training=training, rng=rng)
        self._cache = per_level
        return classify(per_level, self.head)

    def backward(self, d_logits):
        per_level = self._cache
        d_pooled = self.head.backward(d_logits)
        last = per_level[-1]
        d_last = np.repeat(d_pooled, len(last), axis=0) / len(last)
        d_per_level = [np.zeros_like(f) for f in per_level[:-1]] + [d_last]
        self.encoder.backward(d_per_level)

    def params(self):
        out = _prefixed("enc", self.encoder.params())
        out.update(_prefixed("head", self.head.params()))
        return out

    def grads(self):
        out = _prefixed("enc", self.encoder.grads())
        out.update(_prefixed("head", self.head.grads()))
        return out


class Decoder(Module):
    """Progressive upsampling with additive skip connections, plus a direct
    upsample of every level to level 0; the summed map feeds a point-wise
    linear that produces per-point logits on the first down-scaled cloud."""

    def __init__(self, config, num_classes, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        num = config.num_levels
        final_width = config.widths[0]
        self.skips = [Linear.init(config.widths[l], config.widths[l], rng) for l in range(num)]
        self.upconvs = []
        for lvl in range(num - 1):
            emb = build_embedding(
                config.embedding, config.neighborhood.kind,
                _site_radius(config, lvl + 1), seed=rng.integers(2**31),
            )
            layer = init_conv_layer(
                emb, config.widths[lvl + 1], config.widths[lvl], config.embed_dim,
                seed=rng.integers(2**31), normalize=config.normalize,
            )
            self.upconvs.append(ConvModule(layer, f"up{lvl}"))
        self.direct0 = Linear.init(config.widths[0], final_width, rng)
        self.directs = []
        for lvl in range(1, num):
            emb = build_embedding(
                config.embedding, config.neighborhood.kind,
                _site_radius(config, lvl), seed=rng.integers(2**31),
            )
            layer = init_conv_layer(
                emb, config.widths[lvl], final_width, config.embed_dim,
                seed=rng.integers(2**31), normalize=config.normalize,
            )
            self.directs.append(ConvModule(layer, f"direct{lvl}"))
        self.final = Linear.init(final_width, num_classes, rng)

    def forward(self, prep, enc_feats):
        num = self.config.num_levels
        ys = [None] * num
        ys[num - 1] = self.skips[num - 1].forward(enc_feats[num - 1])
        for lvl in range(num - 2, -1, -1):
            up = self.upconvs[lvl].forward(prep, ys[lvl + 1])
            ys[lvl] = up + self.skips[lvl].forward(enc_feats[lvl])
        z = self.direct0.forward(ys[0])
        for lvl in range(1, num):
            z = z + self.directs[lvl - 1].forward(prep, ys[lvl])
        self._cache = num
        return self.final.forward(z)

    def backward(self, d_logits):
        num = self._cache
        dz = self.final.backward(d_logits)
        d_ys = [None] * num
        d_ys[0] = self.direct0.backward(dz)
        for lvl in range(1, num):
            d_ys[lvl] = self.directs[lvl - 1].backward(dz)
        d_enc = [None] * num
        for lvl in range(num - 1):
            d_enc[lvl] = self.skips[lvl].backward(d_ys[lvl])
            d_ys[lvl + 1] = d_ys[lvl + 1] + self.upconvs[lvl].backward(d_ys[lvl])
        d_enc[num - 1] = self.skips[num - 1].backward(d_ys[num - 1])
        return d_enc

    def params(self):
        out = {}
        for lvl, s in enumerate(self.skips):
            out.update(_prefixed(f"skip{lvl}", s.params()))
        for lvl, c in enumerate(self.upconvs):
            out.update(_prefixed(f"up{lvl}", c.params()))
        out.update(_prefixed("direct0", self.direct0.params()))
        for lvl, c in enumerate(self.directs):
            out.update(_prefixed(f"direct{lvl + 1}", c.params()))
        out.update(_prefixed("final", self.final.params()))
        return out

    def grads(self):
        out = {}
        for lvl, s in enumerate(self.skips):
            out.update(_prefixed(f"skip{lvl}", s.grads()))
        for lvl, c in enumerate(self.upconvs):
            out.update(_prefixed(f"up{lvl}", c.grads()))
        out.update(_prefixed("direct0", self.direct0.grads()))
        for lvl, c in enumerate(self.directs):
            out.update(_prefixed(f"direct{lvl + 1}", c.grads()))
        out.update(_prefixed("final", self.final.grads()))
        return out


class SegmentationNetwork(Module):
    """Encoder + skip-connection decoder; logits live on the first
    down-scaled cloud (its majority labels are the training targets)."""

    def __init__(self, config, num_classes, in_features=2, seed=0):
        self.encoder = Encoder(config, in_features=in_features, seed=seed)
        self.decoder = Decoder(config, num_classes, seed=np.random.default_rng(seed).integers(2**31) + 7)

    @property
    def config(self):
        return self.encoder.config

    def prepare(self, cloud, initial_features=None):
        return self.encoder.prepare(cloud, initial_features=initial_features, for_decoder=True)

    def forward(self, prep, training=False, rng=None):
        enc_feats = self.encoder.forward(prep, training=training, rng=rng)
        self._enc_feats = enc_feats
        return self.decoder.forward(prep, enc_feats)

    def backward(self, d_logits):
        d_enc = self.decoder.backward(d_logits)
        self.encoder.backward(d_enc)

    def params(self):
        out = _prefixed("enc", self.encoder.params())
        out.update(_prefixed("dec", self.decoder.params()))
        return out

    def grads(self):
        out = _prefixed("enc", self.encoder.grads())
        out.update(_prefixed("dec", self.decoder.grads()))
        return out


_MAGIC = b"PNEW"
_VERSION = 1


def save_params(path, params):
    """Flat binary parameter file: magic, version, tensor table (name,
    shape), then all values as float64 little-endian in table order."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        for arr in params.values():
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a parameter file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported version {version}")
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            table.append((name, shape))
        out = {}
        for name, shape in table:
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
        return out
