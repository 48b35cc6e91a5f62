"""Index-set feature normalization with fixed or conditional de-normalization.

One statistics operator covers the four classic schemes. For an activation
tensor indexed by (n, c, h, w), the statistics domain picks which positions
share a (mean, std) pair:

    batch     all positions with the same channel
    layer     all positions within the same sample
    instance  all positions with the same (sample, channel)
    group     all positions with the same (sample, channel-group of C/G)

Layer and instance are the G=1 and G=C endpoints of the group scheme.
Per set: mu = mean, sigma = sqrt(biased variance + eps). Normalization is
(x - mu) / sigma, followed by gamma * xhat + beta where (gamma, beta) are
either free per-channel parameters or affine functions of a conditioning
vector. Batch-domain layers additionally keep an exponential moving average
of batch statistics for use in eval mode; every other domain behaves
identically in train and eval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

DOMAIN_KINDS = ("batch", "layer", "instance", "group")


class NormConfigError(ValueError):
    """Invalid statistics-domain or layer configuration."""


class NormStateError(RuntimeError):
    """Layer used in a mode its state cannot support (e.g. eval before any update)."""


@dataclass(frozen=True)
class StatDomain:
    """Which index set shares normalization statistics.

    ``groups`` is meaningful only for kind="group"; group G=1 denotes the
    same partition as layer and G=C the same as instance.
    """

    kind: str
    groups: int = 1

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise NormConfigError(f"unknown statistics domain {self.kind!r}")
        if self.groups < 1:
            raise NormConfigError("groups must be a positive integer")
        if self.kind != "group" and self.groups != 1:
            raise NormConfigError(f"groups is only configurable for the group domain")

    def effective_groups(self, channels: int) -> int:
        """Groups as a channel partition: batch/layer -> 1, instance -> C."""
        if self.kind == "group":
            if channels % self.groups != 0:
                raise NormConfigError(
                    f"channel count {channels} not divisible by {self.groups} groups")
            return self.groups
        if self.kind == "instance":
            return channels
        return 1


BATCH = StatDomain("batch")
LAYER = StatDomain("layer")
INSTANCE = StatDomain("instance")


def group(groups: int) -> StatDomain:
    return StatDomain("group", groups)


@dataclass
class NormStats:
    """Per-set statistics expanded to the source tensor's shape.

    All positions in the same set carry the same (mu, sigma) values;
    ``m`` is the number of positions per set.
    """

    mu: Tensor
    sigma: Tensor
    m: int


@dataclass
class RunningStats:
    """EMA of batch statistics; variance is stored biased, without eps."""

    mu: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    count: int = 0


def index_sets(domain: StatDomain, shape) -> list[list[tuple[int, int, int, int]]]:
    """Partition all (n,c,h,w) positions of `shape` into statistics sets.

    Set order is deterministic: channels for batch, samples for layer,
    (sample, channel) for instance, (sample, group) for group.
    """
    if len(shape) != 4:
        raise NormConfigError(f"expected a 4-axis shape, got {list(shape)}")
    n, c, h, w = (int(s) for s in shape)
    g = domain.effective_groups(c)
    per_group = c // g

    if domain.kind == "batch":
        keys = [[(i_n, i_c, i_h, i_w) for i_n in range(n) for i_h in range(h) for i_w in range(w)]
                for i_c in range(c)]
        return [sorted(k) for k in keys]

    sets = []
    for i_n in range(n):
        for i_g in range(g):
            members = [(i_n, i_c, i_h, i_w)
                       for i_c in range(i_g * per_group, (i_g + 1) * per_group)
                       for i_h in range(h) for i_w in range(w)]
            sets.append(members)
    return sets


def compute_stats(x: Tensor, domain: StatDomain, eps: float) -> NormStats:
    """Per-set mean and sqrt(biased variance + eps), differentiable through x."""
    if x.ndim != 4:
        raise NormConfigError(f"expected a 4-axis tensor, got {x.ndim} axes")
    if eps < 0:
        raise NormConfigError("eps must be non-negative")
    n, c, h, w = x.shape

    if domain.kind == "batch":
        mu = T.reduce_mean(x, axes=(0, 2, 3))
        diff = T.sub(x, T.broadcast_to(mu, x.shape))
        var = T.reduce_mean(T.mul(diff, diff), axes=(0, 2, 3))
        sigma = T.sqrt(var + eps) if eps else T.sqrt(var)
        m = n * h * w
        return NormStats(mu=T.broadcast_to(mu, x.shape),
                         sigma=T.broadcast_to(sigma, x.shape), m=m)

    g = domain.effective_groups(c)
    rest = (c // g) * h * w
    x2 = T.reshape(x, (n * g, rest))
    mu2 = T.reduce_mean(x2, axes=(1,))
    diff = T.sub(x2, T.broadcast_to(mu2, x2.shape))
    var2 = T.reduce_mean(T.mul(diff, diff), axes=(1,))
    sigma2 = T.sqrt(var2 + eps) if eps else T.sqrt(var2)
    mu = T.reshape(T.broadcast_to(mu2, x2.shape), x.shape)
    sigma = T.reshape(T.broadcast_to(sigma2, x2.shape), x.shape)
    return NormStats(mu=mu, sigma=sigma, m=rest)


def normalize(x: Tensor, stats: NormStats) -> Tensor:
    """(x - mu) / sigma, elementwise against expanded statistics."""
    if stats.mu.shape != x.shape or stats.sigma.shape != x.shape:
        raise NormConfigError("statistics were computed for a different shape")
    return T.div(T.sub(x, stats.mu), stats.sigma)


def batch_moments(x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Detached per-channel batch mean and biased variance (for running stats)."""
    mu = x.data.mean(axis=(0, 2, 3))
    var = ((x.data - mu.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mu, var


def update_running(running: RunningStats, batch_mu: np.ndarray,
                   batch_var: np.ndarray, momentum: float | None = None) -> RunningStats:
    """EMA update: new = momentum * old + (1 - momentum) * batch."""
    mom = running.momentum if momentum is None else momentum
    return replace(running,
                   mu=mom * running.mu + (1.0 - mom) * batch_mu,
                   var=mom * running.var + (1.0 - mom) * batch_var,
                   momentum=mom,
                   count=running.count + 1)


class ConditionalAffine:
    """Affine generators mapping a conditioning vector to per-channel (gamma, beta).

    gamma(c) = c @ w_gamma + b_gamma and beta(c) = c @ w_beta + b_beta.
    At initialization the weight matrices are zero and b_gamma = 1,
    b_beta = 0, so zero conditioning is the identity modulation.
    """

    def __init__(self, channels: int, cond_dim: int):
        self.channels = channels
        self.cond_dim = cond_dim
        self.w_gamma = Tensor(np.zeros((cond_dim, channels)), requires_grad=True)
        self.b_gamma = Tensor(np.ones(channels), requires_grad=True)
        self.w_beta = Tensor(np.zeros((cond_dim, channels)), requires_grad=True)
        self.b_beta = Tensor(np.zeros(channels), requires_grad=True)

    def named_parameters(self, prefix: str = ""):
        for name in ("w_gamma", "b_gamma", "w_beta", "b_beta"):
            yield (f"{prefix}{name}", getattr(self, name))


def cond_affine(c: Tensor, params: ConditionalAffine) -> tuple[Tensor, Tensor]:
    """Generate (gamma, beta) from conditioning ``c`` of shape [D] or [N,D]."""
    single = c.ndim == 1
    c2 = T.reshape(c, (1, c.shape[0])) if single else c
    if c2.ndim != 2 or c2.shape[1] != params.cond_dim:
        raise T.ShapeError(
            f"conditioning dim {list(c.shape)} does not match generator dim {params.cond_dim}")
    gamma = T.add(T.matmul(c2, params.w_gamma),
                  T.broadcast_to(T.reshape(params.b_gamma, (1, params.channels)), (c2.shape[0], params.channels)))
    beta = T.add(T.matmul(c2, params.w_beta),
                 T.broadcast_to(T.reshape(params.b_beta, (1, params.channels)), (c2.shape[0], params.channels)))
    if single:
        gamma = T.reshape(gamma, (params.channels,))
        beta = T.reshape(beta, (params.channels,))
    return gamma, beta


class NormLayer:
    """One normalization layer: domain + eps + mode + affine source.

    ``affine`` is None, a (gamma, beta) pair of per-channel Tensors, or a
    ConditionalAffine generator. Batch-domain layers own RunningStats and
    use them exclusively in eval mode; other domains recompute statistics
    from the input in both modes.
    """

    def __init__(self, channels: int, domain: StatDomain, eps: float = 1e-5,
                 affine: str = "fixed", cond_dim: int | None = None,
                 momentum: float = 0.9):
        if eps <= 0:
            raise NormConfigError("eps must be positive")
        domain.effective_groups(channels)  # validate divisibility now
        self.channels = channels
        self.domain = domain
        self.eps = eps
        self.training = True
        self.gamma: Tensor | None = None
        self.beta: Tensor | None = None
        self.conditional: ConditionalAffine | None = None
        if affine == "fixed":
            self.gamma = Tensor(np.ones(channels), requires_grad=True)
            self.beta = Tensor(np.zeros(channels), requires_grad=True)
        elif affine == "conditional":
            if cond_dim is None:
                raise NormConfigError("conditional affine requires cond_dim")
            self.conditional = ConditionalAffine(channels, cond_dim)
        elif affine != "none":
            raise NormConfigError(f"unknown affine kind {affine!r}")
        self.affine_kind = affine
        self.running: RunningStats | None = None
        if domain.kind == "batch":
            self.running = RunningStats(mu=np.zeros(channels), var=np.zeros(channels),
                                        momentum=momentum)

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self, prefix: str = ""):
        if self.gamma is not None:
            yield (f"{prefix}gamma", self.gamma)
            yield (f"{prefix}beta", self.beta)
        if self.conditional is not None:
            yield from self.conditional.named_parameters(prefix)

    def extra_state(self) -> dict[str, np.ndarray]:
        if self.running is None:
            return {}
        return {"running_mu": self.running.mu,
                "running_var": self.running.var,
                "running_count": np.array([float(self.running.count)])}

    def load_extra_state(self, state: dict[str, np.ndarray]) -> None:
        if self.running is None:
            return
        self.running = replace(self.running,
                               mu=state["running_mu"].copy(),
                               var=state["running_var"].copy(),
                               count=int(state["running_count"][0]))

    def forward(self, x: Tensor, c: Tensor | None = None) -> Tensor:
        return norm_forward(self, x, c)

    def __call__(self, x: Tensor, c: Tensor | None = None) -> Tensor:
        return norm_forward(self, x, c)


def _eval_batch_stats(layer: NormLayer, shape) -> NormStats:
    running = layer.running
    if running.count == 0:
        raise NormStateError("eval-mode batch normalization before any running-stats update")
    c = layer.channels
    mu = Tensor(np.ascontiguousarray(
        np.broadcast_to(running.mu.reshape(1, c, 1, 1), shape)))
    sigma = Tensor(np.ascontiguousarray(
        np.broadcast_to(np.sqrt(running.var + layer.eps).reshape(1, c, 1, 1), shape)))
    return NormStats(mu=mu, sigma=sigma, m=int(shape[0] * shape[2] * shape[3]))


def norm_forward(layer: NormLayer, x: Tensor, c: Tensor | None = None) -> Tensor:
    """Normalize and de-normalize one tensor through a NormLayer.

    ``c`` must be given exactly when the layer's affine source is
    conditional; shape [D] broadcasts one modulation to all samples,
    [N,D] modulates per sample. 2-axis inputs [N,F] are treated as
    [N,F,1,1] feature maps.
    """
    if layer.conditional is not None and c is None:
        raise NormConfigError("conditional layer called without conditioning input")
    if layer.conditional is None and c is not None:
        raise NormConfigError("unconditional layer called with conditioning input")

    squeeze = x.ndim == 2
    if squeeze:
        x4 = T.reshape(x, (x.shape[0], x.shape[1], 1, 1))
    elif x.ndim == 4:
        x4 = x
    else:
        raise NormConfigError(f"norm_forward expects [N,C,H,W] or [N,F], got {x.ndim} axes")
    if x4.shape[1] != layer.channels:
        raise NormConfigError(f"layer has {layer.channels} channels, input has {x4.shape[1]}")

    if layer.domain.kind == "batch" and not layer.training:
        stats = _eval_batch_stats(layer, x4.shape)
    else:
        stats = compute_stats(x4, layer.domain, layer.eps)
        if layer.domain.kind == "batch":
            mu_b, var_b = batch_moments(x4)
            layer.running = update_running(layer.running, mu_b, var_b)

    xhat = normalize(x4, stats)
    out = _apply_affine(layer, xhat, c)
    if squeeze:
        out = T.reshape(out, x.shape)
    return out


def _apply_affine(layer: NormLayer, xhat: Tensor, c: Tensor | None) -> Tensor:
    n, ch = xhat.shape[0], xhat.shape[1]
    if layer.affine_kind == "none":
        return xhat
    if layer.conditional is not None:
        gamma, beta = cond_affine(c, layer.conditional)
        if gamma.ndim == 1:
            gamma = T.reshape(gamma, (1, ch, 1, 1))
            beta = T.reshape(beta, (1, ch, 1, 1))
        else:
            if gamma.shape[0] not in (1, n):
                raise T.ShapeError(
                    f"per-sample conditioning batch {gamma.shape[0]} does not match input {n}")
            gamma = T.reshape(gamma, (gamma.shape[0], ch, 1, 1))
            beta = T.reshape(beta, (beta.shape[0], ch, 1, 1))
    else:
        gamma = T.reshape(layer.gamma, (1, ch, 1, 1))
        beta = T.reshape(layer.beta, (1, ch, 1, 1))
    return T.add(T.mul(xhat, T.broadcast_to(gamma, xhat.shape)),
                 T.broadcast_to(beta, xhat.shape))
