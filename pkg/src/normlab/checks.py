"""Finite-difference verification suites for ops, normalization and models.

Every registered differentiable operation has a check case here; the
coverage test in the suite fails if an op is added without one. Cases
build small random instances, run one backward pass, and compare each
tracked leaf's adjoint against the central-difference oracle.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import nn
from . import norm
from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4
FD_STEP = 1e-6


@dataclass
class CheckResult:
    component: str
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def rel_error(got: np.ndarray, want: np.ndarray, floor: float = 1e-3) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(got), np.abs(want)))
    return float(np.max(np.abs(got - want) / denom))


def compare_to_fd(loss_fn, leaves: dict[str, Tensor], step: float = FD_STEP) -> float:
    """Worst relative error of backward() against fd_gradient over `leaves`.

    ``loss_fn`` must be a deterministic function of the leaves' current
    ``.data`` contents.
    """
    for p in leaves.values():
        p.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for name, p in leaves.items():
        def f(t, p=p):
            saved = p.data
            p.data = t.data
            try:
                return loss_fn()
            finally:
                p.data = saved

        fd = T.fd_gradient(f, Tensor(p.data), step)
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, rel_error(got, fd.data))
    return worst


def _leaf(rng, shape, scale=1.0, offset=0.0):
    return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True)


def _probe_loss(out_fn, probe_shape, rng):
    probe = Tensor(rng.standard_normal(probe_shape))
    return lambda: T.reduce_sum(T.mul(out_fn(), probe))


def _away_from_zero(arr, margin=0.2):
    return arr + margin * np.sign(arr) + (arr == 0) * margin


# --- one case builder per registered op -----------------------------------

def _case_add(rng):
    a, b = _leaf(rng, (2, 3, 1, 2)), _leaf(rng, (2, 1, 4, 2))
    return _probe_loss(lambda: T.add(a, b), (2, 3, 4, 2), rng), {"a": a, "b": b}


def _case_sub(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 1))
    return _probe_loss(lambda: T.sub(a, b), (3, 4), rng), {"a": a, "b": b}


def _case_mul(rng):
    a, b = _leaf(rng, (2, 5)), _leaf(rng, (2, 5))
    return _probe_loss(lambda: T.mul(a, b), (2, 5), rng), {"a": a, "b": b}


def _case_div(rng):
    a = _leaf(rng, (3, 4))
    b = Tensor(_away_from_zero(rng.standard_normal((3, 4)), 0.5), requires_grad=True)
    return _probe_loss(lambda: T.div(a, b), (3, 4), rng), {"a": a, "b": b}


def _case_relu(rng):
    x = Tensor(_away_from_zero(rng.standard_normal((4, 5))), requires_grad=True)
    return _probe_loss(lambda: T.relu(x), (4, 5), rng), {"x": x}


def _case_tanh(rng):
    x = _leaf(rng, (3, 4))
    return _probe_loss(lambda: T.tanh(x), (3, 4), rng), {"x": x}


def _case_sigmoid(rng):
    x = _leaf(rng, (3, 4))
    return _probe_loss(lambda: T.sigmoid(x), (3, 4), rng), {"x": x}


def _case_exp(rng):
    x = _leaf(rng, (3, 4))
    return _probe_loss(lambda: T.exp(x), (3, 4), rng), {"x": x}


def _case_log(rng):
    x = Tensor(0.5 + np.abs(rng.standard_normal((3, 4))), requires_grad=True)
    return _probe_loss(lambda: T.log(x), (3, 4), rng), {"x": x}


def _case_sqrt(rng):
    x = Tensor(0.5 + np.abs(rng.standard_normal((3, 4))), requires_grad=True)
    return _probe_loss(lambda: T.sqrt(x), (3, 4), rng), {"x": x}


def _case_softplus(rng):
    x = _leaf(rng, (3, 4), scale=2.0)
    return _probe_loss(lambda: T.softplus(x), (3, 4), rng), {"x": x}


def _case_sum(rng):
    x = _leaf(rng, (2, 3, 4))
    return _probe_loss(lambda: T.reduce_sum(x, axes=(0, 2)), (1, 3, 1), rng), {"x": x}


def _case_mean(rng):
    x = _leaf(rng, (2, 3, 4))
    return _probe_loss(lambda: T.reduce_mean(x, axes=(1,)), (2, 1, 4), rng), {"x": x}


def _case_max(rng):
    x = _leaf(rng, (2, 3, 4))
    return _probe_loss(lambda: T.reduce_max(x, axes=(2,)), (2, 3, 1), rng), {"x": x}


def _case_reshape(rng):
    x = _leaf(rng, (2, 6))
    return _probe_loss(lambda: T.reshape(x, (3, 4)), (3, 4), rng), {"x": x}


def _case_transpose(rng):
    x = _leaf(rng, (3, 5))
    return _probe_loss(lambda: T.transpose(x), (5, 3), rng), {"x": x}


def _case_broadcast_to(rng):
    x = _leaf(rng, (2, 1, 3))
    return _probe_loss(lambda: T.broadcast_to(x, (2, 4, 3)), (2, 4, 3), rng), {"x": x}


def _case_concat(rng):
    a, b = _leaf(rng, (2, 3, 2, 2)), _leaf(rng, (2, 2, 2, 2))
    return _probe_loss(lambda: T.concat_channels(a, b), (2, 5, 2, 2), rng), {"a": a, "b": b}


def _case_matmul(rng):
    a, b = _leaf(rng, (4, 3)), _leaf(rng, (3, 5))
    return _probe_loss(lambda: T.matmul(a, b), (4, 5), rng), {"a": a, "b": b}


def _case_embedding(rng):
    table = _leaf(rng, (6, 3))
    ids = rng.integers(0, 6, size=5)
    return _probe_loss(lambda: T.embedding(table, ids), (5, 3), rng), {"table": table}


def _case_conv2d(rng):
    k = int(rng.choice([1, 3]))
    pad = 1 if k == 3 else 0
    x = _leaf(rng, (2, 2, 4, 3))
    w = _leaf(rng, (3, 2, k, k), scale=0.5)
    b = _leaf(rng, (3,))
    return (_probe_loss(lambda: T.conv2d(x, w, b, pad), (2, 3, 4, 3), rng),
            {"x": x, "w": w, "b": b})


def _case_softmax_xent(rng):
    logits = _leaf(rng, (4, 3))
    labels = rng.integers(0, 3, size=4)
    return lambda: nn.softmax_xent(logits, labels), {"logits": logits}


OP_CASES = {
    "add": _case_add, "sub": _case_sub, "mul": _case_mul, "div": _case_div,
    "relu": _case_relu, "tanh": _case_tanh, "sigmoid": _case_sigmoid,
    "exp": _case_exp, "log": _case_log, "sqrt": _case_sqrt,
    "softplus": _case_softplus, "sum": _case_sum, "mean": _case_mean,
    "max": _case_max, "reshape": _case_reshape, "transpose": _case_transpose,
    "broadcast_to": _case_broadcast_to, "concat": _case_concat,
    "matmul": _case_matmul,
    "embedding": _case_embedding, "conv2d": _case_conv2d,
    "softmax_xent": _case_softmax_xent,
}


def check_ops(trials: int = 20, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, build in OP_CASES.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for _ in range(trials):
            loss_fn, leaves = build(rng)
            worst = max(worst, compare_to_fd(loss_fn, leaves))
        results.append(CheckResult("ops", name, worst, TOLERANCE))
    return results


# --- normalization ----------------------------------------------------------

def _norm_case(domain, affine, rng):
    ch = 4
    x = _leaf(rng, (2, ch, 3, 2))
    layer = norm.NormLayer(ch, domain, affine=affine,
                           cond_dim=3 if affine == "conditional" else None)
    leaves = {"x": x}
    c = None
    if affine == "conditional":
        layer.conditional.w_gamma = _leaf(rng, (3, ch), scale=0.3)
        layer.conditional.w_beta = _leaf(rng, (3, ch), scale=0.3)
        c = _leaf(rng, (2, 3))
        leaves["c"] = c
        leaves.update(dict(layer.conditional.named_parameters("cond.")))
    elif affine == "fixed":
        leaves["gamma"] = layer.gamma
        leaves["beta"] = layer.beta
    probe = Tensor(rng.standard_normal((2, ch, 3, 2)))

    def loss_fn():
        out = layer(x, c) if c is not None else layer(x)
        return T.reduce_sum(T.mul(out, probe))

    return loss_fn, leaves


def check_norm(trials: int = 3, seed: int = 0) -> list[CheckResult]:
    domains = [("batch", norm.BATCH), ("layer", norm.LAYER),
               ("instance", norm.INSTANCE), ("group", norm.group(2))]
    results = []
    for dname, domain in domains:
        for affine in ("none", "fixed", "conditional"):
            rng = np.random.default_rng([seed, zlib.crc32((dname + affine).encode())])
            worst = 0.0
            for _ in range(trials):
                loss_fn, leaves = _norm_case(domain, affine, rng)
                worst = max(worst, compare_to_fd(loss_fn, leaves))
            results.append(CheckResult("norm", f"{dname}/{affine}", worst, TOLERANCE))
    return results


# --- composite models --------------------------------------------------------

def _jitter_params(module, rng, scale=0.05):
    # Zero-initialized biases can park ReLU inputs exactly on the kink,
    # where central differences measure the half-slope and no subgradient
    # choice matches. Check the chain rule at a generic point instead.
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)


def _film_case(rng):
    net = nn.FilmNetwork("all_gn", vocab=8, rng=rng, stem_width=4, block_width=4,
                         num_blocks=2, classifier_width=6, fc_width=6,
                         token_embed_dim=3, gru_hidden=4, num_answers=2, groups=2)
    _jitter_params(net, rng)
    images = _leaf(rng, (2, 1, 5, 5), scale=0.5, offset=0.5)
    tokens = np.array([[0, 5, 1], [2, 6, 3]])
    labels = np.array([0, 1])
    leaves = {"images": images}
    leaves.update(dict(net.named_parameters()))
    return lambda: nn.softmax_xent(net(images, tokens), labels), leaves


def _proto_case(rng):
    emb = nn.ConditionedEmbedder("all_gn", rng, stem_width=4, block_width=4,
                                 num_blocks=1, head_width=4, embed_dim=3,
                                 cond_dim=3, groups=2)
    head = nn.ProtoHead(emb, ten_hidden=3, rng=rng)
    _jitter_params(head, rng)
    sx = _leaf(rng, (4, 1, 5, 5), scale=0.5, offset=0.5)
    sy = np.array([0, 0, 1, 1])
    qx = _leaf(rng, (2, 1, 5, 5), scale=0.5, offset=0.5)
    qy = np.array([0, 1])
    leaves = {"support": sx, "query": qx}
    leaves.update(dict(head.named_parameters()))
    return (lambda: nn.softmax_xent(head.prototype_logits(sx, sy, qx, 2), qy)), leaves


def _gru_case(rng):
    enc = nn.GruEncoder(vocab=6, embed_dim=3, hidden=4, rng=rng)
    tokens = np.array([[0, 3, 5], [2, 1, 4]])
    probe = Tensor(rng.standard_normal((2, 4)))
    leaves = dict(enc.named_parameters())
    return (lambda: T.reduce_sum(T.mul(enc.encode_batch(tokens), probe))), leaves


MODEL_CASES = {"film_net": _film_case, "proto_head": _proto_case, "gru": _gru_case}


def check_models(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, build in MODEL_CASES.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        loss_fn, leaves = build(rng)
        worst = compare_to_fd(loss_fn, leaves)
        results.append(CheckResult("models", name, worst, TOLERANCE))
    return results


SCOPES = ("ops", "norm", "models")


def run_checks(scope: str = "all", seed: int = 0, op_trials: int = 20) -> list[CheckResult]:
    if scope not in SCOPES + ("all",):
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    results = []
    if scope in ("ops", "all"):
        results += check_ops(trials=op_trials, seed=seed)
    if scope in ("norm", "all"):
        results += check_norm(seed=seed)
    if scope in ("models", "all"):
        results += check_models(seed=seed)
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"[{status}] {r.component:<7} {r.name:<22} "
                     f"max rel err {r.max_rel_error:.3e} (tol {r.tolerance:.0e})")
    worst = max(results, key=lambda r: r.max_rel_error)
    lines.append(f"worst: {worst.component}/{worst.name} at {worst.max_rel_error:.3e}; "
                 f"{sum(not r.passed for r in results)} failing of {len(results)}")
    return "\n".join(lines)
