import numpy as np
import pytest

from pne.embeddings import IdentityEmbedding, KernelPointEmbedding, icosahedron_kernel_points, init_mlp_embedding
from pne.errors import ShapeError
from pne.geometry import NeighborList, PointCloud, ball_query
from pne.pointconv import (
    MEAN,
    SUM,
    ConvLayer,
    conv_backward,
    conv_forward,
    init_conv_layer,
    make_site,
)


def single_neighbor_setup():
    """Identity embedding, E_c=3, P=I, I=O=1, one neighbor at offset (1,0,0),
    feature 2, kappa=[0.5,0,0], Sum normalization."""
    layer = ConvLayer(
        embedding=IdentityEmbedding(),
        projection=np.eye(3),
        kernel=np.array([[[0.5, 0.0, 0.0]]]),
        bias=None,
        normalize=SUM,
    )
    query = PointCloud(np.array([[0.0, 0.0, 0.0]]))
    support = PointCloud(np.array([[1.0, 0.0, 0.0]]))
    nl = NeighborList(np.array([0, 1]), np.array([0]))
    features = np.array([[2.0]])
    return layer, query, support, nl, features


def test_forward_single_neighbor_hand_value():
    layer, query, support, nl, features = single_neighbor_setup()
    out = conv_forward(layer, query, support, nl, features)
    # f * <kappa, P e> = 2 * 0.5 = 1.0
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(1.0)


def test_duplicate_neighbor_under_mean_unchanged():
    layer, query, support, nl, features = single_neighbor_setup()
    layer = ConvLayer(layer.embedding, layer.projection, layer.kernel, normalize=MEAN)
    out1 = conv_forward(layer, query, support, nl, features)
    nl2 = NeighborList(np.array([0, 2]), np.array([0, 0]))
    out2 = conv_forward(layer, query, support, nl2, features)
    assert np.allclose(out1, out2)


def test_empty_neighborhood_outputs_bias():
    layer, _, support, _, features = single_neighbor_setup()
    layer = ConvLayer(layer.embedding, layer.projection, layer.kernel,
                      bias=np.array([7.0]), normalize=MEAN)
    query = PointCloud(np.array([[50.0, 0.0, 0.0]]))
    nl = NeighborList(np.array([0, 0]), np.empty(0, dtype=np.int64))
    out = conv_forward(layer, query, support, nl, features)
    assert out[0, 0] == pytest.approx(7.0)


def random_instance(seed, emb=None, normalize=MEAN, i=3, o=2):
    rng = np.random.default_rng(seed)
    support = PointCloud(rng.uniform(-1, 1, size=(16, 3)))
    query = PointCloud(rng.uniform(-1, 1, size=(7, 3)))
    nl = ball_query(query, support, 1.0)
    if emb is None:
        emb = KernelPointEmbedding(icosahedron_kernel_points(0.6), 0.7, "gaussian")
    layer = init_conv_layer(emb, i, o, embed_dim=4, seed=seed, normalize=normalize)
    features = rng.standard_normal((16, i))
    return layer, query, support, nl, features


def test_neighbor_permutation_invariance():
    layer, query, support, nl, features = random_instance(0)
    out1 = conv_forward(layer, query, support, nl, features)
    # permute neighbors within each query range
    rng = np.random.default_rng(1)
    idx = nl.indices.copy()
    for q in range(nl.num_queries):
        s, e = nl.offsets[q], nl.offsets[q + 1]
        idx[s:e] = rng.permutation(idx[s:e])
    out2 = conv_forward(layer, query, support, NeighborList(nl.offsets, idx), features)
    assert np.abs(out1 - out2).max() < 1e-10


def test_feature_linearity():
    layer, query, support, nl, _ = random_instance(2)
    rng = np.random.default_rng(3)
    f1 = rng.standard_normal((16, 3))
    f2 = rng.standard_normal((16, 3))
    a, b = 1.7, -0.4
    layer = ConvLayer(layer.embedding, layer.projection, layer.kernel,
                      bias=None, normalize=layer.normalize)
    lhs = conv_forward(layer, query, support, nl, a * f1 + b * f2)
    rhs = a * conv_forward(layer, query, support, nl, f1) + b * conv_forward(
        layer, query, support, nl, f2)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_cross_cloud_forward_and_backward():
    layer, query, support, nl, features = random_instance(4)
    out = conv_forward(layer, query, support, nl, features)
    assert out.shape == (len(query), 2)
    up = np.random.default_rng(5).standard_normal(out.shape)
    g = conv_backward(layer, query, support, nl, features, up)
    assert g.d_features.shape == features.shape
    assert g.d_kernel.shape == layer.kernel.shape


def test_backward_zero_upstream():
    layer, query, support, nl, features = random_instance(6)
    g = conv_backward(layer, query, support, nl, features, np.zeros((len(query), 2)))
    assert np.all(g.d_kernel == 0.0)
    assert np.all(g.d_projection == 0.0)
    assert np.all(g.d_features == 0.0)
    assert np.all(g.d_bias == 0.0)


def test_backward_single_neighbor_hand_kernel_gradient():
    layer, query, support, nl, features = single_neighbor_setup()
    up = np.array([[3.0]])
    g = conv_backward(layer, query, support, nl, features, up)
    e = np.array([1.0, 0.0, 0.0])  # identity embedding of the offset
    expected = up[0, 0] * features[0, 0] * (np.eye(3) @ e)
    assert np.allclose(g.d_kernel[0, 0], expected)


def test_shape_errors():
    layer, query, support, nl, features = random_instance(7)
    with pytest.raises(ShapeError):
        conv_forward(layer, query, support, nl, features[:, :2])
    with pytest.raises(ShapeError):
        conv_backward(layer, query, support, nl, features, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        ConvLayer(IdentityEmbedding(), np.eye(4), np.zeros((1, 1, 4)))
    with pytest.raises(ShapeError):
        ConvLayer(IdentityEmbedding(), np.eye(3), np.zeros((1, 1, 4)))
    with pytest.raises(ValueError):
        ConvLayer(IdentityEmbedding(), np.eye(3), np.zeros((1, 1, 3)), normalize="median")


def test_init_deterministic_and_bias_zero():
    emb = IdentityEmbedding()
    a = init_conv_layer(emb, 3, 4, embed_dim=8, seed=11)
    b = init_conv_layer(emb, 3, 4, embed_dim=8, seed=11)
    assert np.array_equal(a.kernel, b.kernel)
    assert np.array_equal(a.projection, b.projection)
    assert np.all(a.bias == 0.0)


def test_init_truncation():
    emb = IdentityEmbedding()
    layer = init_conv_layer(emb, 8, 8, embed_dim=16, seed=12)
    std = np.sqrt(1.0 / (16 * 8))
    assert np.abs(layer.kernel).max() <= 2.0 * std + 1e-12


def test_init_variance_preserving():
    """Sum normalization, one neighbor at a norm-sqrt(3) offset (unit variance
    per embedding coordinate), identity embedding: output variance within a
    factor of 4 of the input variance."""
    rng = np.random.default_rng(13)
    i = o = 16
    in_var = []
    out_var = []
    for trial in range(100):
        layer = init_conv_layer(IdentityEmbedding(), i, o, embed_dim=16,
                                seed=trial, normalize=SUM)
        v = rng.standard_normal(3)
        v *= np.sqrt(3.0) / np.linalg.norm(v)
        query = PointCloud(np.zeros((1, 3)))
        support = PointCloud(v[None])
        nl = NeighborList(np.array([0, 1]), np.array([0]))
        f = rng.standard_normal((1, i))
        out = conv_forward(layer, query, support, nl, f)
        in_var.append(f.var())
        out_var.append(out.var())
    ratio = np.mean(out_var) / np.mean(in_var)
    assert 0.25 < ratio < 4.0


def test_parameter_count_equalization():
    """Total parameters differ across embedding kinds only by E_raw x E_c."""
    kinds = {
        "kp": KernelPointEmbedding(icosahedron_kernel_points(0.6), 0.7, "gaussian"),
        "mlp": init_mlp_embedding(16, 1.0, "gelu", 0),
        "identity": IdentityEmbedding(),
    }
    counts = {}
    for name, emb in kinds.items():
        layer = init_conv_layer(emb, 4, 5, embed_dim=16, seed=0)
        n = layer.kernel.size + layer.bias.size
        proj = layer.projection.size
        assert proj == emb.raw_dim * 16
        counts[name] = n
    assert len(set(counts.values())) == 1


def test_make_site_cached_embed():
    layer, query, support, nl, features = random_instance(14)
    site = make_site(query, support, nl, layer.embedding)
    assert site.cached_embed is not None
    assert site.cached_embed.shape == (len(nl.indices), layer.embedding.raw_dim)
    mlp = init_mlp_embedding(4, 1.0, "gelu", 0)
    site2 = make_site(query, support, nl, mlp)
    assert site2.cached_embed is None


def test_sum_vs_mean():
    layer, query, support, nl, features = random_instance(15, normalize=SUM)
    out_sum = conv_forward(layer, query, support, nl, features)
    layer_mean = ConvLayer(layer.embedding, layer.projection, layer.kernel,
                           bias=layer.bias, normalize=MEAN)
    out_mean = conv_forward(layer_mean, query, support, nl, features)
    counts = nl.counts.astype(float)
    nz = counts > 0
    assert np.allclose(out_mean[nz], out_sum[nz] / counts[nz, None])
