"""Aggregated gradient verification: every analytic gradient in the package
against the central finite-difference oracle.

Each check is one report row: component name, number of probes, the maximum
relative error and whether it passed its tolerance. Non-differentiable loci
(Triangular kinks, ReLU hyperplanes) are excluded per the documented
convention; Box offset gradients are asserted exactly zero instead.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics
from .embeddings import (
    IdentityEmbedding,
    KernelPointEmbedding,
    MlpEmbedding,
    default_kernel_layout,
    icosahedron_kernel_points,
)
from .geometry import PointCloud, ball_query
from .network import ClassificationNetwork, EmbeddingSpec, EncoderConfig, NeighborhoodSpec, SegmentationNetwork
from .pointconv import ConvSite, _backward_site, _forward_site, init_conv_layer, make_site
from .training import cross_entropy

H = 1e-5
TOL_LOCAL = 1e-4      # embeddings and conv layer
TOL_NETWORK = 1e-3    # whole-network parameter gradients
TOL_LOSS = 1e-6       # cross entropy
KINK_MARGIN = 1e-3    # exclusion distance around non-differentiable loci


@dataclass
class CheckRow:
    component: str
    probes: int
    max_rel_error: float
    tolerance: float
    passed: bool


def _rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _batched_fd_jacobian(embed_fn, offsets, h=H):
    """(N, E, 3) finite-difference Jacobian; one coordinate of every probe
    is perturbed at once, so six evaluations cover the whole batch."""
    cols = []
    for c in range(3):
        dp = np.zeros_like(offsets)
        dp[:, c] = h
        cols.append((embed_fn(offsets + dp) - embed_fn(offsets - dp)) / (2.0 * h))
    return np.stack(cols, axis=2)


def _make_embeddings(seed):
    shell, sigma = default_kernel_layout("ball_query", 1.0, 1.0)
    kps = icosahedron_kernel_points(shell)
    rng = np.random.default_rng(seed)

    def mlp(act, omega):
        w = rng.uniform(-1.5, 1.5, size=(8, 3))
        b = rng.uniform(-0.3, 0.3, size=8)
        return MlpEmbedding(w, b, act, frequency_scale=omega)

    return {
        "box": KernelPointEmbedding(kps, sigma, "box"),
        "triangular": KernelPointEmbedding(kps, sigma, "triangular"),
        "gaussian": KernelPointEmbedding(kps, sigma, "gaussian"),
        "mlp_relu": mlp(numerics.RELU, 1.0),
        "mlp_gelu": mlp(numerics.GELU, 1.0),
        "mlp_sin": mlp(numerics.SIN, np.pi),
        "identity": IdentityEmbedding(),
    }


def _kink_mask(emb, offsets):
    """True for probe rows safely away from non-differentiable loci."""
    if isinstance(emb, KernelPointEmbedding) and emb.correlation == "triangular":
        d = np.linalg.norm(offsets[:, None, :] - emb.kernel_points[None, :, :], axis=2)
        return (np.abs(d - emb.sigma).min(axis=1) > KINK_MARGIN) & (d.min(axis=1) > KINK_MARGIN)
    if isinstance(emb, MlpEmbedding) and emb.activation == numerics.RELU:
        pre = emb._pre(offsets)
        return np.abs(pre).min(axis=1) > KINK_MARGIN
    return np.ones(len(offsets), dtype=bool)


def check_embedding_jacobians(n_probes=1000, seed=0):
    rows = []
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-1.0, 1.0, size=(n_probes, 3))
    for name, emb in _make_embeddings(seed + 1).items():
        if name == "box":
            jac = emb.jacobian_offsets(offsets)
            err = float(np.abs(jac).max())
            rows.append(CheckRow(f"embedding[{name}].offsets_zero", n_probes, err,
                                 0.0, err == 0.0))
            continue
        mask = _kink_mask(emb, offsets)
        jac = emb.jacobian_offsets(offsets)[mask]
        fd = _batched_fd_jacobian(emb.embed, offsets)[mask]
        err = _rel_error(jac, fd)
        rows.append(CheckRow(f"embedding[{name}].offsets", int(mask.sum()), err,
                             TOL_LOCAL, err < TOL_LOCAL))
    return rows


def check_embedding_params(n_probes=200, seed=1):
    """MLP weight/bias gradients of a random linear functional of embed."""
    rows = []
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-1.0, 1.0, size=(n_probes, 3))
    embs = _make_embeddings(seed + 1)
    for name in ("mlp_relu", "mlp_gelu", "mlp_sin"):
        emb = embs[name]
        mask = _kink_mask(emb, offsets)
        probes = offsets[mask]
        v = rng.standard_normal((len(probes), emb.raw_dim))
        grads = emb.gradient_params(probes, v)
        for pname, param in emb.params().items():
            def loss(flat, pname=pname, param=param):
                saved = param.copy()
                param[...] = flat.reshape(param.shape)
                out = float(np.sum(v * emb.embed(probes)))
                param[...] = saved
                return np.array([out])

            fd = numerics.finite_diff_jacobian(loss, param.ravel(), h=H).reshape(param.shape)
            err = _rel_error(grads[pname], fd)
            rows.append(CheckRow(f"embedding[{name}].{pname}", len(probes), err,
                                 TOL_LOCAL, err < TOL_LOCAL))
    return rows


_CONV_EMB_KINDS = ("box", "triangular", "gaussian", "mlp_relu", "mlp_gelu",
                   "mlp_sin", "identity")


def _conv_instance(seed):
    """Small cross-cloud geometry shared by the conv checks."""
    rng = np.random.default_rng(seed)
    support = PointCloud(rng.uniform(-1.0, 1.0, size=(12, 3)))
    query = PointCloud(rng.uniform(-1.0, 1.0, size=(6, 3)))
    nl = ball_query(query, support, 1.2)
    return query, support, nl, rng


def check_conv_gradients(seed=2):
    rows = []
    for name, emb in _make_embeddings(seed).items():
        query, support, nl, rng = _conv_instance(seed + 3)
        layer = init_conv_layer(emb, 3, 2, embed_dim=4, seed=seed + 5)
        features = rng.standard_normal((len(support), 3))
        site = make_site(query, support, nl)
        out, cache = _forward_site(layer, site, features)
        v = rng.standard_normal(out.shape)
        g = _backward_site(layer, site, features, v, cache, with_offsets=True)

        def loss_with(param, flat):
            saved = param.copy()
            param[...] = flat.reshape(param.shape)
            val = float(np.sum(v * _forward_site(layer, site, features)[0]))
            param[...] = saved
            return np.array([val])

        checks = [("kernel", layer.kernel, g.d_kernel),
                  ("projection", layer.projection, g.d_projection),
                  ("bias", layer.bias, g.d_bias)]
        for pname, param in layer.embedding.params().items():
            checks.append((f"emb.{pname}", param, g.d_embedding_params[pname]))
        for pname, param, analytic in checks:
            fd = numerics.finite_diff_jacobian(
                lambda flat, p=param: loss_with(p, flat), param.ravel(), h=H
            ).reshape(param.shape)
            err = _rel_error(analytic, fd)
            rows.append(CheckRow(f"conv[{name}].{pname}", param.size, err,
                                 TOL_LOCAL, err < TOL_LOCAL))

        def feat_loss(flat):
            f = flat.reshape(features.shape)
            return np.array([float(np.sum(v * _forward_site(layer, site, f)[0]))])

        fd = numerics.finite_diff_jacobian(feat_loss, features.ravel(), h=H)
        err = _rel_error(g.d_features, fd.reshape(features.shape))
        rows.append(CheckRow(f"conv[{name}].features", features.size, err,
                             TOL_LOCAL, err < TOL_LOCAL))

        if name == "box":
            err = float(np.abs(g.d_offsets).max())
            rows.append(CheckRow(f"conv[{name}].offsets_zero", site.offsets.size, err,
                                 0.0, err == 0.0))
        else:
            def off_loss(flat):
                s2 = ConvSite(neighbors=site.neighbors,
                              offsets=flat.reshape(site.offsets.shape),
                              query_ids=site.query_ids, counts=site.counts,
                              num_support=site.num_support)
                return np.array([float(np.sum(v * _forward_site(layer, s2, features)[0]))])

            fd = numerics.finite_diff_jacobian(off_loss, site.offsets.ravel(), h=H)
            mask = _kink_mask(layer.embedding, site.offsets)
            err = _rel_error(g.d_offsets[mask], fd.reshape(site.offsets.shape)[mask])
            rows.append(CheckRow(f"conv[{name}].offsets", int(mask.sum()), err,
                                 TOL_LOCAL, err < TOL_LOCAL))
    return rows


def check_cross_entropy(seed=3):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((8, 5))
    labels = rng.integers(0, 5, size=8)
    _, d_logits = cross_entropy(logits, labels)
    fd = numerics.finite_diff_jacobian(
        lambda flat: np.array([cross_entropy(flat.reshape(logits.shape), labels)[0]]),
        logits.ravel(), h=H,
    ).reshape(logits.shape)
    err = _rel_error(d_logits, fd)
    return [CheckRow("loss.cross_entropy", logits.size, err, TOL_LOSS, err < TOL_LOSS)]


def _toy_config():
    return EncoderConfig(
        initial_cell=0.3,
        widths=[4, 6],
        blocks_per_level=[1, 1],
        neighborhood=NeighborhoodSpec(kind="ball_query", scale=2.0),
        embedding=EmbeddingSpec(kind="kp", correlation="gaussian"),
        embed_dim=4,
    )


def _network_param_check(model, prep, labels, name):
    params = model.params()
    model.zero_grads()
    logits = model.forward(prep, training=False)
    _, d_logits = cross_entropy(logits, labels)
    model.backward(d_logits)
    grads = model.grads()

    def loss(flat):
        pos = 0
        for p in params.values():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        out = model.forward(prep, training=False)
        return np.array([cross_entropy(out, labels)[0]])

    flat0 = np.concatenate([p.ravel() for p in params.values()])
    fd = numerics.finite_diff_jacobian(loss, flat0, h=H).ravel()
    loss(flat0)  # restore
    analytic = np.concatenate([grads[k].ravel() for k in params])
    err = _rel_error(analytic, fd)
    return CheckRow(name, flat0.size, err, TOL_NETWORK, err < TOL_NETWORK)


def check_network_gradients(seed=4):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(-1.0, 1.0, size=(40, 3)),
                       labels=rng.integers(0, 3, size=40))
    rows = []

    cls = ClassificationNetwork(_toy_config(), num_classes=3, seed=seed)
    prep = cls.prepare(cloud)
    rows.append(_network_param_check(cls, prep, [1], "network[classification].params"))

    seg = SegmentationNetwork(_toy_config(), num_classes=3, seed=seed + 1)
    prep = seg.prepare(cloud)
    rows.append(_network_param_check(seg, prep, prep.clouds[0].labels,
                                     "network[segmentation].params"))
    return rows


def gradient_check_report(seed=0, n_probes=1000):
    """Every finite-difference suite in one report (list of CheckRow)."""
    rows = []
    rows += check_embedding_jacobians(n_probes=n_probes, seed=seed)
    rows += check_embedding_params(seed=seed + 1)
    rows += check_conv_gradients(seed=seed + 2)
    rows += check_cross_entropy(seed=seed + 3)
    rows += check_network_gradients(seed=seed + 4)
    return rows


def format_report(rows):
    lines = []
    for row in rows:
        status = "pass" if row.passed else "FAIL"
        lines.append(f"{status}  {row.component:40s} probes={row.probes:6d} "
                     f"max_rel_error={row.max_rel_error:.3e} tol={row.tolerance:g}")
    failed = [r.component for r in rows if not r.passed]
    if failed:
        lines.append(f"FAILED: {', '.join(failed)}")
    else:
        lines.append(f"all {len(rows)} components passed")
    return "\n".join(lines)
