"""Central-difference gradient-check suite over every differentiable op,
every composite layer, and every backbone end to end.

Unit-level checks run the full coordinate set at tolerance 1e-4; the
whole-backbone checks sample coordinates per parameter tensor and use the
looser 1e-3 (depth compounds truncation error). Each check runs on
several seeded random instances and reports the worst relative error.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check
from .backbones import BackboneConfig, build_backbone
from .fewshot_graph import (
    GnnClassifier,
    PairScorer,
    graph_conv,
    learn_adjacency,
)
from .layers import (
    AAConv2d,
    AttentionGate,
    BatchNorm,
    FireModule,
    InceptionModule,
    MultiHeadSelfAttention2d,
    RecurrentResidualUnit,
)

UNIT_TOL = 1e-4
BACKBONE_TOL = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    seconds: float


def _objective(rng, forward):
    """Deterministic scalar objective: fixed random weights times a
    recomputed forward pass (grad_check mutates inputs in place)."""
    with ag.no_grad():
        shape = forward().shape
    weights = Tensor(rng.normal(size=shape))

    def f(*_inputs):
        return ag.sum_(ag.mul(forward(), weights))

    return f


def _separated(rng, shape, gap=0.05):
    """Values with pairwise gaps (keeps argmax/relu kinks away from eps)."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * (4.0 * gap) + rng.uniform(0, gap, size=n)
    return (vals - vals.mean()).reshape(shape)


def _away_from_zero(rng, shape, margin=0.05):
    return rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _randomize_biases(layer, rng, scale=0.1):
    """Zero-init biases put ReLU-dead regions exactly on the kink, where the
    analytic subgradient and the central difference legitimately disagree;
    checking at a generic point avoids that measure-zero special case."""
    for name, p in layer.named_parameters().items():
        if name.endswith(".bias") or name.endswith(".beta"):
            p.data[...] = rng.normal(size=p.data.shape) * scale


# --- op-level checks --------------------------------------------------------

def check_add_mul_sub(rng):
    a = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    f = _objective(rng, lambda: ag.add(ag.mul(a, b), ag.sub(a, b)))
    return grad_check(f, [a, b], eps=EPS)


def check_matmul(rng):
    m, k, n = rng.integers(2, 5, size=3)
    a = Tensor(rng.normal(size=(m, k)), requires_grad=True)
    b = Tensor(rng.normal(size=(k, n)), requires_grad=True)
    f = _objective(rng, lambda: ag.matmul(a, b))
    return grad_check(f, [a, b], eps=EPS)


def check_matmul_batched(rng):
    a = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    f = _objective(rng, lambda: ag.matmul(a, b))
    return grad_check(f, [a, b], eps=EPS)


def check_conv2d(rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    f = _objective(rng, lambda: ag.conv2d(x, w, b, stride=stride, padding=padding))
    return grad_check(f, [x, w, b], eps=EPS)


def check_maxpool2d(rng):
    x = Tensor(_separated(rng, (1, 2, 6, 6)), requires_grad=True)
    f = _objective(rng, lambda: ag.maxpool2d(x, 2, 2))
    return grad_check(f, [x], eps=EPS)


def check_maxpool2d_padded(rng):
    x = Tensor(_separated(rng, (1, 2, 5, 5)), requires_grad=True)
    f = _objective(rng, lambda: ag.maxpool2d(x, 3, 1, padding=1))
    return grad_check(f, [x], eps=EPS)


def check_relu(rng):
    x = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    f = _objective(rng, lambda: ag.relu(x))
    return grad_check(f, [x], eps=EPS)


def check_leaky_relu(rng):
    x = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    f = _objective(rng, lambda: ag.leaky_relu(x, 0.1))
    return grad_check(f, [x], eps=EPS)


def check_sigmoid(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    f = _objective(rng, lambda: ag.sigmoid(x))
    return grad_check(f, [x], eps=EPS)


def check_softmax(rng):
    x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    axis = int(rng.integers(0, 3))
    f = _objective(rng, lambda: ag.softmax(x, axis))
    return grad_check(f, [x], eps=EPS)


def check_abs(rng):
    x = Tensor(_away_from_zero(rng, (4, 3)), requires_grad=True)
    f = _objective(rng, lambda: ag.abs_(x))
    return grad_check(f, [x], eps=EPS)


def check_batchnorm_2d(rng):
    bn = BatchNorm("bn", 3)
    x = Tensor(rng.normal(size=(5, 3)) * 2.0, requires_grad=True)
    f = _objective(rng, lambda: bn(x))
    return grad_check(f, [x, bn.gamma, bn.beta], eps=EPS)


def check_batchnorm_4d(rng):
    bn = BatchNorm("bn", 2)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)) * 2.0, requires_grad=True)
    f = _objective(rng, lambda: bn(x))
    return grad_check(f, [x, bn.gamma, bn.beta], eps=EPS)


def check_layout_ops(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)

    def forward():
        cat = ag.concat([x, y], axis=1)           # [2,5,4]
        t = ag.transpose(cat, (1, 0, 2))          # [5,2,4]
        nar = ag.narrow(t, 0, 1, 3)               # [3,2,4]
        return ag.flatten(nar)

    return grad_check(_objective(rng, forward), [x, y], eps=EPS)


def check_upsample(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    f = _objective(rng, lambda: ag.upsample_nearest2d(x, 2))
    return grad_check(f, [x], eps=EPS)


def check_linear(rng):
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    f = _objective(rng, lambda: ag.linear(x, w, b))
    return grad_check(f, [x, w, b], eps=EPS)


def check_mean(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    f = _objective(rng, lambda: ag.mean_(x, axis=(2, 3)))
    return grad_check(f, [x], eps=EPS)


def check_cross_entropy(rng):
    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    return grad_check(lambda z: ag.cross_entropy(z, labels), [logits], eps=EPS)


# --- layer-level checks -----------------------------------------------------

def check_mhsa(rng):
    layer = MultiHeadSelfAttention2d("mhsa", 4, rng, heads=2, d_k=3, d_v=3)
    x = Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True)
    f = _objective(rng, lambda: layer(x))
    return grad_check(f, [x] + layer.parameters(), eps=EPS)


def check_aa_conv(rng):
    layer = AAConv2d("aa", 3, 2, rng, heads=1, d_k=2, d_v=2)
    x = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    f = _objective(rng, lambda: layer(x))
    return grad_check(f, [x] + layer.parameters(), eps=EPS)


def check_recurrent_unit(rng):
    layer = RecurrentResidualUnit("rru", 2, rng, t_steps=2)
    _randomize_biases(layer, rng)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    f = _objective(rng, lambda: layer(x))
    return grad_check(f, [x] + layer.parameters(), eps=EPS, filter_kinks=True)


def check_attention_gate(rng):
    layer = AttentionGate("gate", 3, 2, rng)
    _randomize_biases(layer, rng)
    g = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    f = _objective(rng, lambda: layer(g, x))
    return grad_check(f, [g, x] + layer.parameters(), eps=EPS, filter_kinks=True)


def check_fire_module(rng):
    layer = FireModule("fire", 4, 2, 4, rng, bypass="simple")
    _randomize_biases(layer, rng)
    x = Tensor(rng.normal(size=(1, 4, 5, 5)), requires_grad=True)
    f = _objective(rng, lambda: layer(x))
    return grad_check(f, [x] + layer.parameters(), eps=EPS, filter_kinks=True)


def check_inception_module(rng):
    layer = InceptionModule("inc", 3, rng)
    _randomize_biases(layer, rng)
    x = Tensor(rng.normal(size=(1, 3, 7, 7)), requires_grad=True)
    f = _objective(rng, lambda: layer(x))
    return grad_check(f, [x] + layer.parameters(), eps=EPS,
                      sample_per_tensor=24, rng=rng, filter_kinks=True)


def check_learn_adjacency(rng):
    scorer = PairScorer("psi", 5, rng)
    # random biases keep the all-zero diagonal pair rows off the exact
    # leaky-relu kink, where central differences are undefined
    scorer.lin1.bias.data[...] = rng.normal(size=scorer.lin1.bias.shape) * 0.3
    scorer.lin2.bias.data[...] = rng.normal(size=scorer.lin2.bias.shape) * 0.3
    feats = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    f = _objective(rng, lambda: learn_adjacency(feats, scorer))
    return grad_check(f, [feats] + scorer.parameters(), eps=EPS, filter_kinks=True)


def check_graph_conv(rng):
    feats = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    adj = Tensor(rng.dirichlet(np.ones(4), size=4), requires_grad=True)
    w_id = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w_adj = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    f = _objective(rng, lambda: graph_conv(feats, adj, w_id, w_adj))
    return grad_check(f, [feats, adj, w_id, w_adj], eps=EPS, filter_kinks=True)


def check_gnn_classifier(rng):
    gnn = GnnClassifier("gnn", rng, embed_dim=6, hidden=5, rounds=2)
    # activate the belief-propagation path and move pair scores off the
    # exact kink so every parameter sees a measurable gradient
    for r in range(gnn.rounds):
        gnn.theta_msg[r].data[...] = rng.uniform(0.2, 0.6)
        scorer = gnn.scorers[r]
        scorer.lin1.bias.data[...] = rng.normal(size=scorer.lin1.bias.shape) * 0.3
        scorer.lin2.bias.data[...] = rng.normal(size=scorer.lin2.bias.shape) * 0.3
    emb = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    labels = np.array([0, 1, 2])

    def f(*_inputs):
        logits = gnn(emb, labels, n_way=3)
        return ag.cross_entropy(logits, np.array([1]))

    return grad_check(f, [emb] + gnn.parameters(), eps=EPS, filter_kinks=True)


# --- backbone-level checks --------------------------------------------------

def _check_backbone(kind, rng, sample=8):
    cfg = BackboneConfig(kind=kind, width=1)
    model = build_backbone(cfg, rng)
    _randomize_biases(model, rng)
    x = Tensor(rng.uniform(0.0, 1.0, size=(2, 1, 28, 28)))
    f = _objective(rng, lambda: model(x))
    # smaller step at network depth: kink grazes scale with eps while f64
    # roundoff stays orders below the 1e-3 tolerance
    return grad_check(f, model.parameters(), eps=1e-6,
                      sample_per_tensor=sample, rng=rng, filter_kinks=True)


def make_backbone_check(kind):
    def check(rng):
        return _check_backbone(kind, rng)

    check.__name__ = f"check_backbone_{kind}"
    return check


UNIT_CHECKS = [
    ("op.add_mul_sub", check_add_mul_sub),
    ("op.matmul", check_matmul),
    ("op.matmul_batched", check_matmul_batched),
    ("op.conv2d", check_conv2d),
    ("op.maxpool2d", check_maxpool2d),
    ("op.maxpool2d_padded", check_maxpool2d_padded),
    ("op.relu", check_relu),
    ("op.leaky_relu", check_leaky_relu),
    ("op.sigmoid", check_sigmoid),
    ("op.softmax", check_softmax),
    ("op.abs", check_abs),
    ("op.batchnorm_2d", check_batchnorm_2d),
    ("op.batchnorm_4d", check_batchnorm_4d),
    ("op.layout", check_layout_ops),
    ("op.upsample_nearest", check_upsample),
    ("op.linear", check_linear),
    ("op.mean", check_mean),
    ("op.cross_entropy", check_cross_entropy),
    ("layer.mhsa_2d", check_mhsa),
    ("layer.aa_conv", check_aa_conv),
    ("layer.recurrent_residual_unit", check_recurrent_unit),
    ("layer.attention_gate", check_attention_gate),
    ("layer.fire_module", check_fire_module),
    ("layer.inception_module", check_inception_module),
    ("gnn.learn_adjacency", check_learn_adjacency),
    ("gnn.graph_conv", check_graph_conv),
    ("gnn.classifier", check_gnn_classifier),
]

BACKBONE_CHECKS = [
    (f"backbone.{kind}", make_backbone_check(kind))
    for kind in ("unet", "attention_unet", "squeeze", "inception", "r2u")
]


def run_suite(instances=5, log=None):
    """Run every check on ``instances`` seeded trials; returns CheckResults."""
    results = []
    groups = [(UNIT_CHECKS, UNIT_TOL), (BACKBONE_CHECKS, BACKBONE_TOL)]
    for checks, tol in groups:
        for name, fn in checks:
            t0 = time.perf_counter()
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng([zlib.crc32(name.encode()), i])
                report = fn(rng)
                worst = max(worst, report.max_rel_err)
            result = CheckResult(name=name, max_rel_err=worst, tolerance=tol,
                                 passed=worst < tol,
                                 seconds=time.perf_counter() - t0)
            results.append(result)
            if log:
                status = "PASS" if result.passed else "FAIL"
                log(f"{status}  {name:<32} max rel err {worst:.3e} (tol {tol:g})")
    return results


def suite_passed(results):
    return all(r.passed for r in results)
