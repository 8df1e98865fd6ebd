"""The full finite-difference suite: every primitive, the lifting module, one
set abstraction layer, one feature propagation layer and each fusion model on
a micro-chunk. Everything runs in float64."""
from __future__ import annotations

import numpy as np

from .lift import Aggregator, AggregatorConfig
from .net2d import Unet2d, Unet2dConfig
from .nn import Tensor, check_gradients, ops
from .pointnet2 import (BackboneConfig, FeaturePropagation, Fusion, FusionModel, SetAbstraction,
                        build_geometry)

MICRO_BACKBONE = BackboneConfig(
    centroid_counts=(32, 16, 8, 4), radii=(0.3, 0.5, 0.8, 1.2), group_sizes=(8, 8, 4, 4),
    sa_mlps=((8, 8), (8, 12), (12, 12), (12, 12)), fp_mlps=((12,), (12,), (8,), (8,)),
    head_channels=8, num_classes=4)


def _leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _probe(rng, out):
    """Scalar readout <out, r> with a fixed random ``r``."""
    r = rng.normal(size=out.shape)
    return lambda t: ops.reduce_sum(ops.reshape(ops.mul(t, r), (-1,)), 0)


def _check(name, build, leaves, rng, max_entries=None):
    readout = _probe(rng, build())
    res = check_gradients(lambda: readout(build()), leaves, max_entries=max_entries,
                          rng=np.random.default_rng(0))
    worst = max(res, key=lambda r: r.max_rel_error)
    worst.name = name
    worst.num_checked = sum(r.num_checked for r in res)
    return worst


def primitive_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    out.append(_check("add", lambda: ops.add(a, b), [a, b], rng))
    out.append(_check("sub", lambda: ops.sub(a, b), [a, b], rng))
    out.append(_check("mul", lambda: ops.mul(a, b), [a, b], rng))
    out.append(_check("relu", lambda: ops.relu(a), [a], rng))
    out.append(_check("reshape", lambda: ops.reshape(a, (2, 6)), [a], rng))
    out.append(_check("transpose", lambda: ops.transpose(a, (1, 0)), [a], rng))
    c = _leaf(rng, 3, 2)
    out.append(_check("concat", lambda: ops.concat([a, c], axis=1), [a, c], rng))
    w, bias = _leaf(rng, 4, 5), _leaf(rng, 5)
    x3 = _leaf(rng, 2, 3, 4)
    out.append(_check("linear", lambda: ops.linear(x3, w, bias), [x3, w, bias], rng))
    idx = rng.integers(0, 3, size=(5, 2))
    out.append(_check("gather_rows", lambda: ops.gather_rows(a, idx), [a], rng))
    rows = _leaf(rng, 6, 4)
    dst = np.array([0, 2, 2, 1, 0, 2])
    out.append(_check("scatter_add_rows", lambda: ops.scatter_add_rows(rows, dst, 3), [rows], rng))
    out.append(_check("reduce_sum", lambda: ops.reduce_sum(x3, 1), [x3], rng))
    out.append(_check("reduce_mean", lambda: ops.reduce_mean(x3, 1), [x3], rng))
    out.append(_check("reduce_max", lambda: ops.reduce_max(x3, 1), [x3], rng))
    img = _leaf(rng, 2, 4, 6, 3)
    k3, k1, kb = _leaf(rng, 3, 3, 3, 5), _leaf(rng, 1, 1, 3, 5), _leaf(rng, 5)
    out.append(_check("conv2d_3x3", lambda: ops.conv2d(img, k3, kb), [img, k3, kb], rng))
    out.append(_check("conv2d_1x1", lambda: ops.conv2d(img, k1, kb), [img, k1, kb], rng))
    out.append(_check("maxpool2d", lambda: ops.maxpool2d(img), [img], rng))
    kt = _leaf(rng, 3, 2, 2, 4)
    kt_b = _leaf(rng, 4)
    out.append(_check("conv_transpose2d", lambda: ops.conv_transpose2d(img, kt, kt_b),
                      [img, kt, kt_b], rng))
    g, be = _leaf(rng, 3), _leaf(rng, 3)
    for training in (True, False):
        rm, rv = rng.normal(size=3), rng.random(3) + 0.5

        def bn(training=training, rm=rm, rv=rv):
            return ops.batchnorm(img, g, be, rm.copy(), rv.copy(), training, axis=-1)
        out.append(_check(f"batchnorm_{'train' if training else 'eval'}", bn, [img, g, be], rng))
    logits = _leaf(rng, 7, 4)
    labels = np.array([0, 3, 1, 1, 65535, 2, 0])
    cw = rng.random(4) + 0.5
    res = check_gradients(lambda: ops.softmax_cross_entropy(logits, labels, cw, 65535), [logits])
    res[0].name = "softmax_cross_entropy"
    out.append(res[0])
    return out


def aggregator_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    sparse = rng.random((10, 3))
    dense = rng.random((14, 3))
    feats = _leaf(rng, 14, 5)
    out = []
    for pooling in ("sum", "max", "mean"):
        for use_mlp in (True, False):
            cfg = AggregatorConfig(k=3, mlp_channels=(8, 6), pooling=pooling, use_mlp=use_mlp)
            agg = Aggregator(5, cfg, np.random.default_rng(seed + 1), dtype=np.float64)
            idx, dist = agg.neighbours(sparse, dense)
            leaves = [feats] + agg.parameters()
            out.append(_check(f"aggregate_{pooling}{'' if use_mlp else '_nomlp'}",
                              lambda agg=agg, idx=idx, dist=dist: agg(feats, idx, dist), leaves, rng))
    return out


def layer_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    pos = rng.random((32, 3))
    geom = build_geometry(pos, BackboneConfig(centroid_counts=(8, 4), radii=(0.4, 0.8),
                                              group_sizes=(6, 4), sa_mlps=((8, 8), (8,)),
                                              fp_mlps=((8,), (8,))))
    feats = _leaf(rng, 32, 4)
    sa = SetAbstraction(4, (8, 8), np.random.default_rng(seed + 1), dtype=np.float64)
    res = [_check("set_abstraction", lambda: sa(feats, geom.groups[0], geom.rel[0]),
                  [feats] + sa.parameters(), rng)]
    coarse = _leaf(rng, 8, 6)
    fp = FeaturePropagation(6 + 4, (8, 7), np.random.default_rng(seed + 2), dtype=np.float64)
    res.append(_check("feature_propagation",
                      lambda: fp(coarse, feats, geom.interp_idx[0], geom.interp_w[0]),
                      [coarse, feats] + fp.parameters(), rng))
    return res


def model_checks(seed: int = 0, max_entries: int = 12) -> list:
    rng = np.random.default_rng(seed)
    pos = rng.random((64, 3))
    geom = build_geometry(pos, MICRO_BACKBONE)
    y = rng.integers(0, MICRO_BACKBONE.num_classes, 64)
    out = []
    for fusion in Fusion:
        m = FusionModel(fusion, MICRO_BACKBONE, lifted_channels=5,
                        rng=np.random.default_rng(seed + 1), dtype=np.float64)
        lifted = _leaf(rng, 64, 5) if fusion.needs_lifted else None
        rgb = rng.random((64, 3)) if fusion == Fusion.XYZ_RGB else None
        leaves = m.parameters() + ([lifted] if lifted is not None else [])
        res = check_gradients(lambda: ops.softmax_cross_entropy(m(geom, pos, lifted, rgb), y),
                              leaves, max_entries=max_entries, rng=np.random.default_rng(0))
        worst = max(res, key=lambda r: r.max_rel_error)
        worst.name = f"model_{fusion.value}"
        worst.num_checked = sum(r.num_checked for r in res)
        out.append(worst)
    net = Unet2d(Unet2dConfig(input_size=(8, 8), stage_channels=(3, 4), feature_dim=4,
                              num_classes=3), np.random.default_rng(seed + 3), dtype=np.float64)
    img = rng.random((2, 8, 8, 3))
    lab = rng.integers(0, 3, 2 * 8 * 8)
    res = check_gradients(
        lambda: ops.softmax_cross_entropy(ops.reshape(net(img)[1], (-1, 3)), lab),
        net.parameters(), max_entries=max_entries, rng=np.random.default_rng(0))
    worst = max(res, key=lambda r: r.max_rel_error)
    worst.name = "unet2d"
    worst.num_checked = sum(r.num_checked for r in res)
    out.append(worst)
    return out


def run_suite(seed: int = 0) -> list:
    return primitive_checks(seed) + aggregator_checks(seed) + layer_checks(seed) + model_checks(seed)


def format_table(results, tol: float = 1e-4) -> str:
    lines = [f"{'check':<28}{'entries':>8}{'max rel err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<28}{r.num_checked:>8}{r.max_rel_error:>14.3e}  "
                     f"{'ok' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)
