"""Neighborhood embedding functions: kernel-point embeddings with Box,
Triangular and Gaussian correlation, single-layer MLP embeddings with
ReLU/GELU/Sin activations, and the identity embedding.

Every embedding maps relative offsets (y - x, shape N x 3) to N x E_raw
descriptors and provides the analytic Jacobian w.r.t. the offsets plus
gradients w.r.t. its learnable parameters (MLP weights and biases; kernel
points and sigma are fixed).
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import ShapeError

BOX = "box"
TRIANGULAR = "triangular"
GAUSSIAN = "gaussian"

CORRELATION_KINDS = (BOX, TRIANGULAR, GAUSSIAN)


def _check_offsets(offsets):
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim != 2 or offsets.shape[1] != 3:
        raise ShapeError(f"offsets must be (N, 3), got {offsets.shape}")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    return offsets


def icosahedron_kernel_points(shell_radius):
    """12 unit-icosahedron vertices scaled to `shell_radius`, plus the origin.

    Vertex order: cyclic permutations of (0, +-1, +-phi) with sign pairs
    (+,+), (+,-), (-,+), (-,-) per permutation, normalized to unit length;
    the center point comes last (index 12).
    """
    if shell_radius <= 0:
        raise ValueError("shell_radius must be positive")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for a, b in [(1.0, phi), (1.0, -phi), (-1.0, phi), (-1.0, -phi)]:
        verts.append((0.0, a, b))
    for a, b in [(1.0, phi), (1.0, -phi), (-1.0, phi), (-1.0, -phi)]:
        verts.append((a, b, 0.0))
    for a, b in [(1.0, phi), (1.0, -phi), (-1.0, phi), (-1.0, -phi)]:
        verts.append((b, 0.0, a))
    verts = np.asarray(verts)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True) * shell_radius
    return np.vstack([verts, np.zeros((1, 3))])


def grid_kernel_points(m, extent):
    """m^3 points at the cell centers of an m x m x m lattice over
    [-extent, extent]^3, in lexicographic (x, y, z) order."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if extent <= 0:
        raise ValueError("extent must be positive")
    width = 2.0 * extent / m
    axis = -extent + width * (np.arange(m) + 0.5)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)


def icosahedron_shell_spacing(shell_radius):
    """Nearest-neighbor distance among the 12 shell vertices."""
    pts = icosahedron_kernel_points(shell_radius)[:12]
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    d[np.diag_indices(len(pts))] = np.inf
    return float(d.min())


def default_kernel_layout(neighborhood_kind, radius, sigma_factor=1.0):
    """Shell radius and sigma for the icosahedral kernel-point layout.

    Ball query places the shell at 0.6 * r; kNN at 1.2 * r' where r' is
    the average neighbor distance. Sigma defaults to the shell-point
    nearest-neighbor spacing, scaled by `sigma_factor`.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if neighborhood_kind == "ball_query":
        shell_radius = 0.6 * radius
    elif neighborhood_kind == "knn":
        shell_radius = 1.2 * radius
    else:
        raise ValueError(f"unknown neighborhood kind: {neighborhood_kind!r}")
    sigma = sigma_factor * icosahedron_shell_spacing(shell_radius)
    return shell_radius, sigma


class Embedding:
    """Interface shared by all embedding variants."""

    raw_dim = None

    def embed(self, offsets):
        raise NotImplementedError

    def jacobian_offsets(self, offsets):
        raise NotImplementedError

    def gradient_params(self, offsets, upstream):
        """Gradients w.r.t. learnable parameters; empty for fixed embeddings."""
        return {}

    def params(self):
        return {}


@dataclass
class KernelPointEmbedding(Embedding):
    """Correlation to a fixed set of kernel points."""

    kernel_points: np.ndarray
    sigma: float
    correlation: str

    def __post_init__(self):
        self.kernel_points = np.asarray(self.kernel_points, dtype=np.float64)
        if self.kernel_points.ndim != 2 or self.kernel_points.shape[1] != 3:
            raise ShapeError("kernel_points must be (K, 3)")
        if len(self.kernel_points) < 1:
            raise ValueError("need at least one kernel point")
        if self.correlation not in CORRELATION_KINDS:
            raise ValueError(f"unknown correlation: {self.correlation!r}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be finite and positive")

    @property
    def raw_dim(self):
        return len(self.kernel_points)

    def _dists(self, offsets):
        diff = offsets[:, None, :] - self.kernel_points[None, :, :]  # (N, K, 3)
        return diff, np.linalg.norm(diff, axis=2)

    def embed(self, offsets):
        offsets = _check_offsets(offsets)
        diff, d = self._dists(offsets)
        if self.correlation == BOX:
            # one-hot on the nearest kernel point; argmin ties -> smallest j
            out = np.zeros_like(d)
            out[np.arange(len(d)), d.argmin(axis=1)] = 1.0
            return out
        if self.correlation == TRIANGULAR:
            return np.maximum(1.0 - d / self.sigma, 0.0)
        return np.exp(-np.square(d) / (2.0 * self.sigma**2))

    def jacobian_offsets(self, offsets):
        offsets = _check_offsets(offsets)
        diff, d = self._dists(offsets)
        if self.correlation == BOX:
            return np.zeros((len(offsets), self.raw_dim, 3))
        if self.correlation == TRIANGULAR:
            # zero at the cone apex (d=0) and outside the support (d>=sigma)
            inside = (d > 0.0) & (d < self.sigma)
            safe = np.where(d > 0.0, d, 1.0)
            jac = -diff / (self.sigma * safe[..., None])
            return np.where(inside[..., None], jac, 0.0)
        e = np.exp(-np.square(d) / (2.0 * self.sigma**2))
        return e[..., None] * (-diff) / self.sigma**2


@dataclass
class MlpEmbedding(Embedding):
    """Single linear layer plus activation: e(p) = act(W p + b).

    For the sin activation the pre-activation is scaled by
    `frequency_scale` (first-layer frequency): e(p) = sin(w0 (W p + b)).
    """

    weights: np.ndarray
    biases: np.ndarray
    activation: str
    frequency_scale: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != 3:
            raise ShapeError("weights must be (E, 3)")
        if self.biases.shape != (self.weights.shape[0],):
            raise ShapeError("biases must be (E,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("weights and biases must be finite")
        if self.activation not in numerics.ACTIVATION_KINDS:
            raise ValueError(f"unknown activation: {self.activation!r}")

    @property
    def raw_dim(self):
        return self.weights.shape[0]

    def _omega(self):
        return self.frequency_scale if self.activation == numerics.SIN else 1.0

    def _pre(self, offsets):
        return self._omega() * (offsets @ self.weights.T + self.biases)

    def embed(self, offsets):
        offsets = _check_offsets(offsets)
        return numerics.activation_forward(self.activation, self._pre(offsets))

    def jacobian_offsets(self, offsets):
        offsets = _check_offsets(offsets)
        dact = numerics.activation_derivative(self.activation, self._pre(offsets))
        return (self._omega() * dact)[..., None] * self.weights[None, :, :]

    def gradient_params(self, offsets, upstream):
        offsets = _check_offsets(offsets)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (len(offsets), self.raw_dim):
            raise ShapeError("upstream must be (N, E)")
        dpre = self._omega() * upstream * numerics.activation_derivative(
            self.activation, self._pre(offsets)
        )
        return {"weights": dpre.T @ offsets, "biases": dpre.sum(axis=0)}

    def params(self):
        return {"weights": self.weights, "biases": self.biases}


@dataclass
class IdentityEmbedding(Embedding):
    """Uses the raw offset coordinates as the embedding."""

    raw_dim: int = field(default=3, init=False)

    def embed(self, offsets):
        return _check_offsets(offsets).copy()

    def jacobian_offsets(self, offsets):
        offsets = _check_offsets(offsets)
        return np.broadcast_to(np.eye(3), (len(offsets), 3, 3)).copy()


def init_mlp_embedding(dim, neighborhood_radius, activation, seed):
    """MLP embedding with weights uniform in [-1/r, 1/r] so pre-activations
    over the receptive field land roughly in [-1, 1]; biases start at 0.
    Sin uses frequency scale pi (one half-period across the receptive field).
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if neighborhood_radius <= 0:
        raise ValueError("neighborhood_radius must be positive")
    rng = np.random.default_rng(seed)
    bound = 1.0 / neighborhood_radius
    weights = rng.uniform(-bound, bound, size=(dim, 3))
    biases = np.zeros(dim)
    omega = np.pi if activation == numerics.SIN else 1.0
    return MlpEmbedding(weights, biases, activation, frequency_scale=omega)
