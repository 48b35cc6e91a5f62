"""Models and optimizers: conditioned residual networks, a GRU question
encoder, a prototype-based few-shot head, classification loss, Adam/SGD.

Conditioning follows the deviation-from-identity convention everywhere:
conditional affine generators start at gamma=1, beta=0, so zero
conditioning leaves normalized activations unchanged and freshly
initialized residual blocks are identity maps.
"""

from __future__ import annotations

import math

import numpy as np

from . import norm
from . import tensor as T
from .norm import NormLayer, StatDomain
from .tensor import Tensor

VARIANTS = ("all_gn", "gn_bn_stem", "gn_bn_stem_noclf", "all_bn")


class Module:
    """Minimal parameter container: walks Tensor/submodule attributes."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, NormLayer, norm.ConditionalAffine)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, NormLayer, norm.ConditionalAffine)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}{name}.")
            else:
                yield f"{prefix}{name}", child

    def train(self, mode: bool = True):
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_extra_state(self):
        """Non-parameter state (running statistics) of all descendants."""
        for name, mod in self.named_modules():
            getter = getattr(mod, "extra_state", None)
            if getter is None:
                continue
            for key, arr in getter().items():
                yield f"{name}.{key}", (mod, key, arr)


def describe_norm_layers(root: Module) -> list[dict]:
    """Report domain/affine wiring of every NormLayer under ``root``."""
    out = []
    for name, mod in root.named_modules():
        if isinstance(mod, NormLayer):
            out.append({"name": name,
                        "domain": mod.domain.kind,
                        "groups": mod.domain.groups,
                        "affine": mod.affine_kind})
    return out


def _affine_tensor(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = T.matmul(x, w)
    bias = T.reshape(b, (1, b.shape[0]))
    return T.add(out, T.broadcast_to(bias, out.shape))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 w_std: float | None = None):
        std = math.sqrt(2.0 / in_dim) if w_std is None else w_std
        self.w = Tensor(rng.standard_normal((in_dim, out_dim)) * std, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return _affine_tensor(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 w_std: float | None = None):
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        fan_in = in_ch * kernel * kernel
        std = math.sqrt(2.0 / fan_in) if w_std is None else w_std
        self.w = Tensor(rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std,
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.pad = 1 if kernel == 3 else 0

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, self.pad)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.standard_normal((vocab, dim)) / math.sqrt(dim),
                            requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


# --------------------------------------------------------------------------
# GRU question encoder
# --------------------------------------------------------------------------

class GruEncoder(Module):
    """Standard GRU over a token sequence; the final hidden state is the
    question embedding.

    h_t = (1 - z_t) * h_{t-1} + z_t * tanh(W_h x + U_h (r_t * h_{t-1}) + b_h)
    with update gate z and reset gate r as sigmoid-gated affine maps.
    """

    def __init__(self, vocab: int, embed_dim: int, hidden: int, rng: np.random.Generator):
        self.vocab = vocab
        self.hidden = hidden
        self.embed = Embedding(vocab, embed_dim, rng)

        def mat(din, dout):
            return Tensor(rng.standard_normal((din, dout)) / math.sqrt(din),
                          requires_grad=True)

        self.w_z, self.u_z = mat(embed_dim, hidden), mat(hidden, hidden)
        self.w_r, self.u_r = mat(embed_dim, hidden), mat(hidden, hidden)
        self.w_h, self.u_h = mat(embed_dim, hidden), mat(hidden, hidden)
        self.b_z = Tensor(np.zeros(hidden), requires_grad=True)
        self.b_r = Tensor(np.zeros(hidden), requires_grad=True)
        self.b_h = Tensor(np.zeros(hidden), requires_grad=True)

    def encode_batch(self, tokens: np.ndarray) -> Tensor:
        """Encode [N, T] token ids to [N, hidden] final states."""
        tokens = np.asarray(tokens)
        n, steps = tokens.shape
        h = Tensor(np.zeros((n, self.hidden)))
        for t in range(steps):
            x = self.embed(tokens[:, t])
            z = T.sigmoid(T.add(_affine_tensor(x, self.w_z, self.b_z), T.matmul(h, self.u_z)))
            r = T.sigmoid(T.add(_affine_tensor(x, self.w_r, self.b_r), T.matmul(h, self.u_r)))
            cand = T.tanh(T.add(_affine_tensor(x, self.w_h, self.b_h),
                                T.matmul(T.mul(r, h), self.u_h)))
            h = T.add(T.mul(T.sub(T.Tensor(np.ones((n, self.hidden))), z), h),
                      T.mul(z, cand))
        return h


def gru_encode(tokens, enc: GruEncoder) -> Tensor:
    """Encode a single token sequence to the final hidden state [hidden]."""
    tokens = list(tokens)
    if not tokens:
        return Tensor(np.zeros(enc.hidden))
    ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    return T.reshape(enc.encode_batch(ids), (enc.hidden,))


# --------------------------------------------------------------------------
# FiLM-style conditioned residual network
# --------------------------------------------------------------------------

def coordinate_maps(n: int, h: int, w: int) -> Tensor:
    """Constant x/y position channels in [-1, 1], shape [N, 2, H, W]."""
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    grid = np.stack([np.repeat(ys[:, None], w, axis=1),
                     np.repeat(xs[None, :], h, axis=0)])
    return Tensor(np.broadcast_to(grid, (n, 2, h, w)).copy())


class FilmBlock(Module):
    """Residual block whose normalization is modulated by a conditioning vector.

    out = x + relu(cond_norm(conv3x3(relu(conv1x1(x))), c)). Input and
    output channel counts are equal so the residual addition is well formed.
    With coordinates enabled, two constant position channels are appended
    before the 1x1 convolution (spatial relations are not expressible from
    translation-equivariant features alone).
    """

    def __init__(self, channels: int, cond_dim: int, domain: StatDomain,
                 eps: float, rng: np.random.Generator, with_coords: bool = False):
        self.with_coords = with_coords
        in_ch = channels + 2 if with_coords else channels
        self.conv_1x1 = Conv2d(in_ch, channels, 1, rng)
        self.conv_3x3 = Conv2d(channels, channels, 3, rng)
        self.cond_norm = NormLayer(channels, domain, eps=eps,
                                   affine="conditional", cond_dim=cond_dim)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        h = x
        if self.with_coords:
            n, _, hh, ww = x.shape
            h = T.concat_channels(x, coordinate_maps(n, hh, ww))
        h = T.relu(self.conv_1x1(h))
        h = self.cond_norm(self.conv_3x3(h), c)
        return T.add(x, T.relu(h))


def _norm_or_none(channels, domain_kind, groups, eps):
    if domain_kind is None:
        return None
    if domain_kind == "batch":
        return NormLayer(channels, norm.BATCH, eps=eps)
    return NormLayer(channels, norm.group(groups), eps=eps)


class FilmNetwork(Module):
    """Stem -> conditioned residual core -> classifier, wired per variant.

    Variants select where batch-domain layers survive the group substitution:
    all_gn (none), gn_bn_stem (stem + classifier), gn_bn_stem_noclf (stem
    only, classifier unnormalized), all_bn (everywhere, the baseline).
    """

    def __init__(self, variant: str, vocab: int, rng: np.random.Generator,
                 in_channels: int = 1, stem_width: int = 32, block_width: int = 32,
                 num_blocks: int = 4, classifier_width: int = 64, fc_width: int = 64,
                 token_embed_dim: int = 32, gru_hidden: int = 64, num_answers: int = 2,
                 groups: int = 4, eps: float = 1e-5):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        stem_kind = "group" if variant == "all_gn" else "batch"
        block_kind = "batch" if variant == "all_bn" else "group"
        clf_kind = {"all_gn": "group", "gn_bn_stem": "batch",
                    "gn_bn_stem_noclf": None, "all_bn": "batch"}[variant]
        block_domain = norm.BATCH if block_kind == "batch" else norm.group(groups)

        self.gru = GruEncoder(vocab, token_embed_dim, gru_hidden, rng)
        self.stem_conv1 = Conv2d(in_channels, stem_width, 3, rng)
        self.stem_norm1 = _norm_or_none(stem_width, stem_kind, groups, eps)
        self.stem_conv2 = Conv2d(stem_width, block_width, 3, rng)
        self.stem_norm2 = _norm_or_none(block_width, stem_kind, groups, eps)
        self.blocks = [FilmBlock(block_width, gru_hidden, block_domain, eps, rng,
                                 with_coords=True)
                       for _ in range(num_blocks)]
        self.clf_conv = Conv2d(block_width + 2, classifier_width, 1, rng)
        self.fc_hidden = Linear(classifier_width, fc_width, rng)
        self.clf_norm = _norm_or_none(fc_width, clf_kind, groups, eps)
        # small final-layer init keeps initial logits near uniform
        self.fc_out = Linear(fc_width, num_answers, rng, w_std=0.1 / math.sqrt(fc_width))

    def __call__(self, images: Tensor, tokens: np.ndarray) -> Tensor:
        n = images.shape[0]
        if np.asarray(tokens).shape[0] != n:
            raise T.ShapeError(f"batch mismatch: {n} images, {len(tokens)} questions")
        c = self.gru.encode_batch(tokens)

        h = T.relu(self.stem_norm1(self.stem_conv1(images))
                   if self.stem_norm1 else self.stem_conv1(images))
        h = T.relu(self.stem_norm2(self.stem_conv2(h))
                   if self.stem_norm2 else self.stem_conv2(h))
        for block in self.blocks:
            h = block(h, c)
        h = T.concat_channels(h, coordinate_maps(h.shape[0], h.shape[2], h.shape[3]))
        h = self.clf_conv(h)
        h = T.reduce_max(h, axes=(2, 3))
        h = T.reshape(h, (n, h.shape[1]))
        h = self.fc_hidden(h)
        if self.clf_norm is not None:
            h = self.clf_norm(h)
        h = T.relu(h)
        return self.fc_out(h)


def film_block_forward(block: FilmBlock, x: Tensor, c: Tensor) -> Tensor:
    return block(x, c)


def film_forward(net: FilmNetwork, images: Tensor, tokens: np.ndarray) -> Tensor:
    return net(images, tokens)


# --------------------------------------------------------------------------
# prototype-based few-shot head
# --------------------------------------------------------------------------

class ConditionedEmbedder(Module):
    """Small conditioned convnet mapping images to embedding vectors."""

    def __init__(self, variant: str, rng: np.random.Generator, in_channels: int = 1,
                 stem_width: int = 16, block_width: int = 16, num_blocks: int = 2,
                 head_width: int = 32, embed_dim: int = 32, cond_dim: int = 32,
                 groups: int = 4, eps: float = 1e-5):
        if variant not in ("all_gn", "all_bn"):
            raise ValueError("embedder variant must be all_gn or all_bn")
        kind = "group" if variant == "all_gn" else "batch"
        domain = norm.group(groups) if kind == "group" else norm.BATCH
        self.cond_dim = cond_dim
        self.embed_dim = embed_dim
        self.stem = Conv2d(in_channels, stem_width, 3, rng)
        self.stem_norm = _norm_or_none(stem_width, kind, groups, eps)
        self.widen = Conv2d(stem_width, block_width, 3, rng) if block_width != stem_width else None
        self.blocks = [FilmBlock(block_width, cond_dim, domain, eps, rng)
                       for _ in range(num_blocks)]
        self.head = Conv2d(block_width, head_width, 1, rng)
        self.fc = Linear(head_width, embed_dim, rng, w_std=0.1 / math.sqrt(head_width))

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        h = T.relu(self.stem_norm(self.stem(x)) if self.stem_norm else self.stem(x))
        if self.widen is not None:
            h = T.relu(self.widen(h))
        for block in self.blocks:
            h = block(h, c)
        h = T.relu(self.head(h))
        h = T.reduce_mean(h, axes=(2, 3))
        h = T.reshape(h, (h.shape[0], h.shape[1]))
        return self.fc(h)


class TaskEncoder(Module):
    """Task embedding network: mean prototype -> conditioning vector."""

    def __init__(self, embed_dim: int, hidden: int, cond_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(embed_dim, hidden, rng)
        self.fc2 = Linear(hidden, cond_dim, rng)

    def __call__(self, mean_proto: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(mean_proto)))


class ProtoHead(Module):
    """Nearest-prototype classifier with a learned task conditioning loop.

    Class templates are mean support embeddings; a task code derived from
    the unconditioned templates modulates the embedder for the final
    distance computation. Logits are squared Euclidean distances scaled
    by a learned positive factor alpha (softplus-parameterized, init 1).
    """

    def __init__(self, embedder: ConditionedEmbedder, ten_hidden: int,
                 rng: np.random.Generator):
        self.embedder = embedder
        self.ten = TaskEncoder(embedder.embed_dim, ten_hidden, embedder.cond_dim, rng)
        # softplus(raw) == 1
        self.alpha_raw = Tensor(np.array([math.log(math.e - 1.0)]), requires_grad=True)

    def alpha(self) -> Tensor:
        return T.softplus(self.alpha_raw)

    def prototype_logits(self, support_x: Tensor, support_y: np.ndarray,
                         query_x: Tensor, ways: int) -> Tensor:
        support_y = np.asarray(support_y)
        counts = np.bincount(support_y, minlength=ways)
        if support_y.size == 0 or np.any(counts == 0):
            missing = [int(m) for m in np.flatnonzero(counts == 0)]
            raise ValueError(f"support set is missing classes {missing}")
        n_support = support_x.shape[0]

        assign = np.zeros((ways, n_support))
        assign[support_y, np.arange(n_support)] = 1.0 / counts[support_y]
        assign_t = Tensor(assign)

        zero_c = Tensor(np.zeros((1, self.embedder.cond_dim)))
        protos0 = T.matmul(assign_t, self.embedder(support_x, zero_c))
        mean_proto = T.matmul(Tensor(np.full((1, ways), 1.0 / ways)), protos0)
        gamma_task = self.ten(mean_proto)

        protos = T.matmul(assign_t, self.embedder(support_x, gamma_task))
        e_q = self.embedder(query_x, gamma_task)

        sq_q = T.reduce_sum(T.mul(e_q, e_q), axes=(1,))
        sq_p = T.transpose(T.reduce_sum(T.mul(protos, protos), axes=(1,)))
        cross = T.matmul(e_q, T.transpose(protos))
        d2 = T.add(T.broadcast_to(sq_q, cross.shape),
                   T.sub(T.broadcast_to(sq_p, cross.shape), 2.0 * cross))
        alpha = T.reshape(self.alpha(), (1, 1))
        return T.mul(T.broadcast_to(alpha, d2.shape), -1.0 * d2)


def prototype_logits(head: ProtoHead, support_x: Tensor, support_y: np.ndarray,
                     query_x: Tensor, ways: int) -> Tensor:
    return head.prototype_logits(support_x, support_y, query_x, ways)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

T._register("softmax_xent")


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise T.ShapeError("softmax_xent expects [N, classes] logits")
    n, a = logits.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"expected {n} labels, got {list(labels.shape)}")
    if labels.min() < 0 or labels.max() >= a:
        raise ValueError(f"label out of range [0, {a})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    data = np.array([-logp[np.arange(n), labels].mean()])

    def vjp(g):
        onehot = np.zeros_like(z)
        onehot[np.arange(n), labels] = 1.0
        return (g.reshape(1, 1) * (probs - onehot) / n,)

    return T._result(data, "softmax_xent", (logits,), vjp)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct rows; ties break toward the lowest index."""
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; eps defaults to 1e-5 for training stability."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-5):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise T.NumericsError(f"non-finite gradient for parameter {name!r}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    """Plain SGD with optional momentum, for ablations."""

    def __init__(self, named_params, lr: float, momentum: float = 0.0):
        self.params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.vel = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise T.NumericsError(f"non-finite gradient for parameter {name!r}")
            self.vel[i] = self.momentum * self.vel[i] + g
            p.data -= self.lr * self.vel[i]


def adam_step(opt: Adam, *_args) -> None:
    """Apply one optimizer step (parameters and state are held by ``opt``)."""
    opt.step()
