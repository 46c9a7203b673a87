import numpy as np
import pytest

from pne.errors import DegenerateInputError
from pne.geometry import PointCloud, cell_average_subsample
from pne.network import (
    ClassificationNetwork,
    EmbeddingSpec,
    Encoder,
    EncoderConfig,
    LayerNorm,
    Linear,
    MetaformerBlock,
    NeighborhoodSpec,
    SegmentationNetwork,
    default_input_features,
    load_params,
    save_params,
)


def make_config(**overrides):
    base = dict(
        initial_cell=0.3,
        widths=[4, 6],
        blocks_per_level=[1, 1],
        neighborhood=NeighborhoodSpec(kind="ball_query", scale=2.0),
        embedding=EmbeddingSpec(kind="kp", correlation="gaussian"),
        embed_dim=4,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def random_cloud(n=60, seed=0, labeled=False):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=n) if labeled else None
    return PointCloud(rng.uniform(-1, 1, size=(n, 3)), labels=labels)


def test_layernorm_statistics():
    rng = np.random.default_rng(1)
    ln = LayerNorm(8)
    x = rng.standard_normal((10, 8)) * 3 + 5
    y = ln.forward(x)
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-10)
    assert np.allclose(y.var(axis=1), 1.0, atol=1e-4)


def test_linear_forward():
    lin = Linear(np.array([[2.0], [0.0]]), np.array([1.0]))
    out = lin.forward(np.array([[3.0, 5.0]]))
    assert out[0, 0] == pytest.approx(7.0)


def test_drop_path_zero_is_identity():
    rng = np.random.default_rng(2)
    cfg = make_config()
    enc = Encoder(cfg, seed=0)
    block = enc.levels[0][0]
    assert block.drop_path_rate == 0.0
    cloud = random_cloud()
    prep = enc.prepare(cloud)
    x = rng.standard_normal((len(prep.clouds[0]), 4))
    out_eval = block.forward(prep, x, training=False)
    out_train = block.forward(prep, x, training=True, rng=rng)
    assert np.array_equal(out_eval, out_train)


def test_drop_path_branch_unbiased():
    """The per-branch keep factor is 0 or 1/(1-rate) with unit expectation,
    and a surviving branch reproduces the eval residual scaled accordingly."""
    cfg = make_config(drop_path_max=0.5, widths=[4], blocks_per_level=[2])
    enc = Encoder(cfg, seed=3)
    block = enc.levels[0][1]  # deepest block gets the max rate
    assert block.drop_path_rate == pytest.approx(0.5)

    rng = np.random.default_rng(5)
    draws = np.array([block._draw_keep(True, rng) for _ in range(10000)])
    assert set(np.unique(draws)) == {0.0, 2.0}
    se = draws.std() / np.sqrt(len(draws))
    assert abs(draws.mean() - 1.0) < 3 * se
    assert block._draw_keep(False, rng) == 1.0

    # a draw that keeps both branches matches eval with residuals doubled
    cloud = random_cloud(40, seed=4)
    prep = enc.prepare(cloud)
    x = rng.standard_normal((len(prep.clouds[0]), 4))
    for seed in range(50):
        r = np.random.default_rng(seed)
        out = block.forward(prep, x, training=True, rng=r)
        k1, k2, _ = block._cache
        if k1 == 2.0 and k2 == 0.0:
            mixed = x + 2.0 * block.mixer.forward(prep, block.norm1.forward(x))
            assert np.allclose(out, mixed)
            break
    else:
        pytest.fail("never drew keep-mixer/drop-mlp in 50 tries")


def test_encoder_level_counts_match_bruteforce():
    cloud = random_cloud(200, seed=6)
    cfg = make_config(widths=[4, 6, 8], blocks_per_level=[1, 1, 1], initial_cell=0.25)
    enc = Encoder(cfg, seed=0)
    prep = enc.prepare(cloud)
    cur = cloud.positions
    for lvl in range(3):
        cell = 0.25 * 2.0**lvl
        cells = {tuple(c) for c in np.floor(cur / cell).astype(int)}
        assert len(prep.clouds[lvl]) == len(cells)
        cur = prep.clouds[lvl].positions


def test_default_input_features():
    cloud = random_cloud(30, seed=7)
    f = default_input_features(cloud)
    assert f.shape == (30, 2)
    assert np.all(f[:, 0] == 1.0)
    assert f[:, 1].min() == 0.0


def test_empty_cloud_rejected():
    enc = Encoder(make_config(), seed=0)
    with pytest.raises(DegenerateInputError):
        enc.prepare(PointCloud(np.zeros((0, 3))))


def test_classification_logits_shape_and_determinism():
    cloud = random_cloud(80, seed=8)
    net = ClassificationNetwork(make_config(), num_classes=5, seed=9)
    prep = net.prepare(cloud)
    a = net.forward(prep, training=False)
    b = net.forward(prep, training=False)
    assert a.shape == (1, 5)
    assert np.array_equal(a, b)


def test_translation_invariance_with_aligned_cells():
    """Shifting the cloud by an exact multiple of every pyramid cell leaves
    the logits unchanged within 1e-8 (embeddings see only offsets)."""
    cloud = random_cloud(80, seed=10)
    cfg = make_config(initial_cell=0.25)
    net = ClassificationNetwork(cfg, num_classes=3, seed=11)
    base = net.forward(net.prepare(cloud), training=False)
    # shift by the coarsest cell (a multiple of every finer cell)
    shift = np.array([0.5, -1.0, 2.0])  # multiples of 0.25 and 0.5
    moved = PointCloud(cloud.positions + shift)
    out = net.forward(net.prepare(moved), training=False)
    assert np.abs(base - out).max() < 1e-8


def test_single_point_pooling_identity():
    cloud = PointCloud(np.array([[0.1, 0.1, 0.1]]))
    net = ClassificationNetwork(make_config(widths=[4], blocks_per_level=[1]),
                                num_classes=2, seed=12)
    prep = net.prepare(cloud)
    logits = net.forward(prep, training=False)
    feats = net._cache[-1]
    manual = net.head.forward(feats)
    assert np.allclose(logits, manual)


def test_zero_head_weights():
    cloud = random_cloud(40, seed=13)
    net = ClassificationNetwork(make_config(), num_classes=3, seed=14)
    net.head.weights[...] = 0.0
    net.head.bias[...] = np.array([1.0, 2.0, 3.0])
    logits = net.forward(net.prepare(cloud), training=False)
    assert np.allclose(logits, [[1.0, 2.0, 3.0]])


def test_segmentation_logits_per_level0_point():
    cloud = random_cloud(100, seed=15, labeled=True)
    net = SegmentationNetwork(make_config(), num_classes=4, seed=16)
    prep = net.prepare(cloud)
    logits = net.forward(prep, training=False)
    assert logits.shape == (len(prep.clouds[0]), 4)
    # targets: majority labels on the first down-scaled cloud
    assert prep.clouds[0].labels is not None


def test_segmentation_level0_labels_majority():
    cloud = random_cloud(100, seed=17, labeled=True)
    sub, parents = cell_average_subsample(
        PointCloud(cloud.positions, labels=cloud.labels), 0.3)
    net = SegmentationNetwork(make_config(), num_classes=4, seed=18)
    prep = net.prepare(cloud)
    assert np.array_equal(prep.clouds[0].labels, sub.labels)


def test_params_and_grads_aligned():
    net = ClassificationNetwork(make_config(), num_classes=3, seed=19)
    params = net.params()
    grads = net.grads()
    assert set(params) == set(grads)
    for k in params:
        assert params[k].shape == grads[k].shape
    net.zero_grads()
    assert all(np.all(g == 0.0) for g in net.grads().values())


def test_save_load_roundtrip(tmp_path):
    net = ClassificationNetwork(make_config(), num_classes=3, seed=20)
    params = net.params()
    path = tmp_path / "model.bin"
    save_params(path, params)
    loaded = load_params(path)
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k], params[k])


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_params(path)


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(widths=[4], blocks_per_level=[1, 1])
    with pytest.raises(ValueError):
        make_config(initial_cell=0.0)
    with pytest.raises(ValueError):
        MetaformerBlock(None, 4, np.random.default_rng(0), drop_path_rate=1.0)


def test_knn_neighborhood_variant():
    cloud = random_cloud(60, seed=21)
    cfg = make_config(neighborhood=NeighborhoodSpec(kind="knn", k=4))
    net = ClassificationNetwork(cfg, num_classes=3, seed=22)
    logits = net.forward(net.prepare(cloud), training=False)
    assert logits.shape == (1, 3)


@pytest.mark.parametrize("spec", [
    EmbeddingSpec(kind="kp", correlation="box"),
    EmbeddingSpec(kind="kp", correlation="triangular"),
    EmbeddingSpec(kind="kp", correlation="gaussian", placement="grid", grid_m=2),
    EmbeddingSpec(kind="mlp", activation="relu", mlp_dim=5),
    EmbeddingSpec(kind="mlp", activation="sin", mlp_dim=5),
    EmbeddingSpec(kind="identity"),
])
def test_all_embedding_specs_run(spec):
    cloud = random_cloud(50, seed=23)
    net = ClassificationNetwork(make_config(embedding=spec), num_classes=2, seed=24)
    logits = net.forward(net.prepare(cloud), training=False)
    assert np.all(np.isfinite(logits))
