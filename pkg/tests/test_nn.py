"""Model zoo: hand values, scalar oracles, composite gradient checks."""

import math

import numpy as np
import pytest

from normlab import nn
from normlab import norm as N
from normlab import tensor as T
from normlab.tensor import Tensor


def rel_err(got, want, floor=1e-3):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(got), np.abs(want)))
    return float(np.max(np.abs(got - want) / denom))


# --------------------------------------------------------------------------
# GRU
# --------------------------------------------------------------------------

def test_gru_empty_sequence_returns_zero_state():
    enc = nn.GruEncoder(vocab=5, embed_dim=3, hidden=4, rng=np.random.default_rng(0))
    out = nn.gru_encode([], enc)
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_gru_all_zero_parameters_single_step():
    enc = nn.GruEncoder(vocab=5, embed_dim=3, hidden=4, rng=np.random.default_rng(0))
    for _, p in enc.named_parameters():
        p.data[...] = 0.0
    out = nn.gru_encode([2], enc)
    # h = (1 - sigmoid(0)) * 0 + sigmoid(0) * tanh(0) = 0
    np.testing.assert_array_equal(out.data, np.zeros(4))


def gru_scalar_oracle(enc, tokens):
    """Step-by-step GRU recurrence in plain numpy."""
    def sig(a):
        return 1.0 / (1.0 + np.exp(-a))

    h = np.zeros(enc.hidden)
    for tok in tokens:
        x = enc.embed.table.data[tok]
        z = sig(x @ enc.w_z.data + h @ enc.u_z.data + enc.b_z.data)
        r = sig(x @ enc.w_r.data + h @ enc.u_r.data + enc.b_r.data)
        cand = np.tanh(x @ enc.w_h.data + (r * h) @ enc.u_h.data + enc.b_h.data)
        h = (1.0 - z) * h + z * cand
    return h


def test_gru_matches_scalar_recurrence():
    enc = nn.GruEncoder(vocab=7, embed_dim=4, hidden=5, rng=np.random.default_rng(3))
    tokens = [1, 6, 3]
    got = nn.gru_encode(tokens, enc).data
    want = gru_scalar_oracle(enc, tokens)
    assert rel_err(got, want, floor=1e-9) <= 1e-12


def test_gru_hidden_state_stays_bounded():
    enc = nn.GruEncoder(vocab=9, embed_dim=4, hidden=6, rng=np.random.default_rng(5))
    for _, p in enc.named_parameters():
        p.data *= 5.0  # exaggerate
    out = nn.gru_encode([0, 1, 2, 3, 4, 5, 6, 7, 8] * 3, enc).data
    assert np.all(np.abs(out) < 1.0)


def test_gru_out_of_vocabulary_token():
    enc = nn.GruEncoder(vocab=5, embed_dim=3, hidden=4, rng=np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        nn.gru_encode([5], enc)


# --------------------------------------------------------------------------
# FiLM block and network
# --------------------------------------------------------------------------

def test_film_block_zero_init_is_identity():
    rng = np.random.default_rng(7)
    block = nn.FilmBlock(4, cond_dim=3, domain=N.group(2), eps=1e-5, rng=rng)
    for conv in (block.conv_1x1, block.conv_3x3):
        conv.w.data[...] = 0.0
        conv.b.data[...] = 0.0
    x = rng.standard_normal((2, 4, 5, 5))
    out = block(Tensor(x), Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("width", [4, 8])
def test_film_block_preserves_shape(width):
    rng = np.random.default_rng(11)
    block = nn.FilmBlock(width, cond_dim=3, domain=N.group(2), eps=1e-5, rng=rng)
    x = Tensor(rng.standard_normal((2, width, 6, 5)))
    assert block(x, Tensor(np.zeros((2, 3)))).shape == (2, width, 6, 5)


def test_film_block_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    block = nn.FilmBlock(4, cond_dim=2, domain=N.group(2), eps=1e-5, rng=rng)
    x = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
    c = Tensor(rng.standard_normal((2, 2)), requires_grad=True)

    loss = T.reduce_mean(nn.film_block_forward(block, x, c))
    T.backward(loss)
    fd_x = T.fd_gradient(lambda t: T.reduce_mean(block(t, Tensor(c.data))), x, 1e-6)
    fd_c = T.fd_gradient(lambda t: T.reduce_mean(block(Tensor(x.data), t)), c, 1e-6)
    assert rel_err(x.grad, fd_x.data) <= 1e-4
    assert rel_err(c.grad, fd_c.data) <= 1e-4

    grads = {name: p.grad.copy() for name, p in block.named_parameters()}
    for name, p in block.named_parameters():
        def f(t, p=p):
            saved = p.data
            p.data = t.data
            try:
                return T.reduce_mean(block(Tensor(x.data), Tensor(c.data)))
            finally:
                p.data = saved
        fd = T.fd_gradient(f, Tensor(p.data), 1e-6)
        assert rel_err(grads[name], fd.data) <= 1e-4, name


def _micro_film(variant, seed=0):
    return nn.FilmNetwork(variant, vocab=8, rng=np.random.default_rng(seed),
                          stem_width=4, block_width=4, num_blocks=2,
                          classifier_width=8, fc_width=8, token_embed_dim=3,
                          gru_hidden=4, num_answers=2, groups=2)


def test_film_untrained_loss_near_chance():
    net = _micro_film("all_gn")
    img = Tensor(np.random.default_rng(1).random((1, 1, 6, 6)))
    logits = net(img, np.array([[0, 6, 1]]))
    assert np.all(np.isfinite(logits.data))
    loss = nn.softmax_xent(logits, np.array([0]))
    assert abs(loss.item() - math.log(2)) <= 0.3


def test_film_group_variant_is_permutation_equivariant():
    rng = np.random.default_rng(17)
    net = _micro_film("all_gn")
    imgs = rng.random((4, 1, 6, 6))
    toks = np.array([[0, 6, 1], [1, 7, 2], [2, 5, 3], [3, 4, 0]])
    base = net(Tensor(imgs), toks).data
    perm = np.array([2, 0, 3, 1])
    permuted = net(Tensor(imgs[perm]), toks[perm]).data
    assert rel_err(permuted, base[perm], floor=1e-9) <= 1e-12


def test_film_batch_variant_depends_on_batch_composition():
    rng = np.random.default_rng(19)
    net = _micro_film("all_bn")
    imgs = rng.random((4, 1, 6, 6))
    toks = np.array([[0, 6, 1]] * 4)
    base = net(Tensor(imgs), toks).data
    other = imgs.copy()
    other[1:] += 2.0
    mixed = net(Tensor(other), toks).data
    assert np.max(np.abs(mixed[0] - base[0])) > 1e-3


def test_film_batch_mismatch_is_error():
    net = _micro_film("all_gn")
    with pytest.raises(T.ShapeError):
        net(Tensor(np.ones((2, 1, 6, 6))), np.array([[0, 6, 1]]))


VARIANT_WIRING = {
    "all_gn": {"stem": ("group", "group"), "block": "group", "clf": "group"},
    "gn_bn_stem": {"stem": ("batch", "batch"), "block": "group", "clf": "batch"},
    "gn_bn_stem_noclf": {"stem": ("batch", "batch"), "block": "group", "clf": None},
    "all_bn": {"stem": ("batch", "batch"), "block": "batch", "clf": "batch"},
}


@pytest.mark.parametrize("variant", nn.VARIANTS)
def test_variant_norm_wiring(variant):
    net = _micro_film(variant)
    layers = {d["name"]: d for d in nn.describe_norm_layers(net)}
    want = VARIANT_WIRING[variant]

    assert layers["stem_norm1"]["domain"] == want["stem"][0]
    assert layers["stem_norm2"]["domain"] == want["stem"][1]
    assert layers["stem_norm1"]["affine"] == "fixed"
    for i in range(2):
        blk = layers[f"blocks.{i}.cond_norm"]
        assert blk["domain"] == want["block"]
        assert blk["affine"] == "conditional"
    if want["clf"] is None:
        assert "clf_norm" not in layers
    else:
        assert layers["clf_norm"]["domain"] == want["clf"]
        assert layers["clf_norm"]["affine"] == "fixed"
    if variant == "all_gn":
        assert all(d["domain"] != "batch" for d in layers.values())


def test_init_loss_close_to_log_answers_over_seeds():
    rng = np.random.default_rng(23)
    losses = []
    for seed in range(20):
        net = _micro_film("all_gn", seed=seed)
        imgs = Tensor(rng.random((8, 1, 6, 6)))
        toks = rng.integers(0, 4, size=(8, 3))
        toks[:, 1] += 4
        labels = rng.integers(0, 2, size=8)
        losses.append(nn.softmax_xent(net(imgs, toks), labels).item())
    assert all(abs(lv - math.log(2)) <= 0.1 * math.log(2) for lv in losses)


# --------------------------------------------------------------------------
# prototype head
# --------------------------------------------------------------------------

class _PixelEmbedder:
    """Stub embedder: first `embed_dim` pixels, ignoring conditioning."""

    def __init__(self, embed_dim=2, cond_dim=2):
        self.embed_dim = embed_dim
        self.cond_dim = cond_dim

    def __call__(self, x, c):
        flat = T.reshape(x, (x.shape[0], x.shape[1] * x.shape[2] * x.shape[3]))
        w = np.zeros((flat.shape[1], self.embed_dim))
        w[:self.embed_dim, :self.embed_dim] = np.eye(self.embed_dim)
        return T.matmul(flat, Tensor(w))

    def named_parameters(self, prefix=""):
        return iter(())

    def train(self, mode=True):
        return self


def _stub_head():
    head = nn.ProtoHead.__new__(nn.ProtoHead)
    head.embedder = _PixelEmbedder()
    head.ten = nn.TaskEncoder(2, 2, 2, np.random.default_rng(0))
    head.alpha_raw = Tensor(np.array([math.log(math.e - 1.0)]), requires_grad=True)
    return head


def _img(vec):
    arr = np.zeros((1, 2, 1))
    arr[0, :, 0] = vec
    return arr


def test_prototype_logits_hand_computed_two_way_one_shot():
    head = _stub_head()
    support = Tensor(np.stack([_img([1.0, 0.0]), _img([0.0, 1.0])]))
    query = Tensor(np.stack([_img([0.9, 0.1])]))
    logits = head.prototype_logits(support, np.array([0, 1]), query, ways=2).data
    d0 = (0.9 - 1.0) ** 2 + 0.1 ** 2
    d1 = 0.9 ** 2 + (0.1 - 1.0) ** 2
    np.testing.assert_allclose(logits, [[-d0, -d1]], atol=1e-10)


def test_prototype_logits_equidistant_symmetry():
    head = _stub_head()
    support = Tensor(np.stack([_img([1.0, 0.0]), _img([0.0, 1.0])]))
    query = Tensor(np.stack([_img([0.5, 0.5])]))
    logits = head.prototype_logits(support, np.array([0, 1]), query, ways=2).data
    assert abs(logits[0, 0] - logits[0, 1]) <= 1e-12


def test_alpha_scaling_scales_logits():
    head = _stub_head()
    support = Tensor(np.stack([_img([1.0, 0.0]), _img([0.0, 1.0])]))
    query = Tensor(np.stack([_img([0.3, 0.2])]))
    base = head.prototype_logits(support, np.array([0, 1]), query, ways=2).data
    t = 2.5
    # raise alpha from 1 to t via the softplus inverse
    head.alpha_raw = Tensor(np.array([math.log(math.exp(t) - 1.0)]), requires_grad=True)
    scaled = head.prototype_logits(support, np.array([0, 1]), query, ways=2).data
    np.testing.assert_allclose(scaled, t * base, atol=1e-10)
    assert np.argmax(scaled) == np.argmax(base)


def _micro_head(seed=0, variant="all_gn"):
    rng = np.random.default_rng(seed)
    emb = nn.ConditionedEmbedder(variant, rng, stem_width=4, block_width=4,
                                 num_blocks=1, head_width=4, embed_dim=4,
                                 cond_dim=3, groups=2)
    return nn.ProtoHead(emb, ten_hidden=4, rng=rng)


def test_duplicating_support_leaves_logits_unchanged():
    rng = np.random.default_rng(29)
    head = _micro_head()
    sx = rng.random((4, 1, 5, 5))
    sy = np.array([0, 0, 1, 1])
    qx = Tensor(rng.random((3, 1, 5, 5)))
    base = head.prototype_logits(Tensor(sx), sy, qx, ways=2).data
    doubled = head.prototype_logits(Tensor(np.concatenate([sx, sx])),
                                    np.concatenate([sy, sy]), qx, ways=2).data
    assert rel_err(doubled, base, floor=1e-9) <= 1e-12


def test_missing_support_class_is_error():
    head = _micro_head()
    x = Tensor(np.random.default_rng(0).random((2, 1, 5, 5)))
    with pytest.raises(ValueError):
        head.prototype_logits(x, np.array([0, 0]), x, ways=2)


def test_episode_init_loss_close_to_log_ways():
    losses = []
    for seed in range(20):
        head = _micro_head(seed=seed)
        rng = np.random.default_rng(1000 + seed)
        ways = 5
        sx = Tensor(rng.random((ways * 2, 1, 5, 5)))
        sy = np.repeat(np.arange(ways), 2)
        qx = Tensor(rng.random((ways, 1, 5, 5)))
        logits = head.prototype_logits(sx, sy, qx, ways)
        losses.append(nn.softmax_xent(logits, np.arange(ways)).item())
    assert all(abs(lv - math.log(5)) <= 0.1 * math.log(5) for lv in losses)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def test_xent_uniform_logits():
    loss = nn.softmax_xent(Tensor(np.zeros((4, 2))), np.zeros(4, dtype=int))
    assert abs(loss.item() - math.log(2)) <= 1e-12


def test_xent_confident_correct_logit():
    logits = Tensor(np.array([[1000.0, 0.0]]))
    loss = nn.softmax_xent(logits, np.array([0]))
    assert loss.item() <= 1e-12


def test_xent_gradient_closed_form():
    rng = np.random.default_rng(31)
    z = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, size=5)
    logits = Tensor(z, requires_grad=True)
    T.backward(nn.softmax_xent(logits, labels))
    ez = np.exp(z - z.max(axis=1, keepdims=True))
    probs = ez / ez.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(z)
    onehot[np.arange(5), labels] = 1.0
    np.testing.assert_allclose(logits.grad, (probs - onehot) / 5, atol=1e-10)


def test_xent_label_out_of_range():
    with pytest.raises(ValueError):
        nn.softmax_xent(Tensor(np.zeros((1, 2))), np.array([2]))


def test_composite_graph_gradient_conv_norm_matmul_xent():
    rng = np.random.default_rng(37)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    conv = nn.Conv2d(2, 3, 3, rng)
    layer = N.NormLayer(3, N.group(3), affine="fixed")
    w_out = Tensor(rng.standard_normal((3, 2)) * 0.5, requires_grad=True)
    labels = np.array([0, 1])

    def forward(xv):
        h = layer(T.conv2d(xv, conv.w, conv.b, 1))
        h = T.reduce_max(h, axes=(2, 3))
        h = T.reshape(h, (2, 3))
        return nn.softmax_xent(T.matmul(h, w_out), labels)

    loss = forward(x)
    T.backward(loss)
    fd = T.fd_gradient(lambda t: forward(t), x, 1e-6)
    assert rel_err(x.grad, fd.data) <= 1e-4


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = nn.Adam([("p", p)], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = nn.Adam([("p", p)], lr=0.01, eps=1e-5)
    p.grad = np.array([0.5])
    opt.step()
    want = -0.01 * 0.5 / (0.5 + 1e-5)
    np.testing.assert_allclose(p.data, [want], rtol=1e-12)


def test_adam_trajectory_matches_scalar_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-5
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = nn.Adam([("p", p)], lr=lr, beta1=b1, beta2=b2, eps=eps)
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        g = 2.0 * theta  # gradient of theta^2
        p.grad = np.array([2.0 * p.data[0]])
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - theta) <= 1e-12


def test_adam_nan_gradient_names_parameter():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = nn.Adam([("blocks.0.conv.w", p)], lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(T.NumericsError, match="blocks.0.conv.w"):
        opt.step()


def test_sgd_momentum_step():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = nn.SGD([("p", p)], lr=0.1, momentum=0.5)
    p.grad = np.array([1.0])
    opt.step()
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.1 - 0.1 * 1.5], rtol=1e-12)
