import numpy as np

from splat4d.gradcheck import TOLERANCE, _fd, _rel, check_head
from splat4d.head import LN_EPS, ToyMotionHead, toy_head_backward, toy_head_forward


def _head(cond_std=0.0, seed=0, in_dim=10):
    rng = np.random.default_rng(seed)
    return ToyMotionHead.init(in_dim, hidden=12, n_freqs=4, rng=rng, cond_std=cond_std), rng


def test_zero_initialised_output():
    head, rng = _head(cond_std=0.5)
    feats = rng.normal(size=(20, 10))
    for t in (0.0, 0.3, 1.0):
        dx, da, _ = toy_head_forward(head, feats, t)
        assert not np.any(dx) and not np.any(da)


def test_zero_conditioning_ignores_time():
    head, rng = _head()
    head.params["W3"] = rng.normal(size=head.params["W3"].shape)
    feats = rng.normal(size=(8, 10))
    a = toy_head_forward(head, feats, 0.1)[0]
    b = toy_head_forward(head, feats, 0.9)[0]
    np.testing.assert_array_equal(a, b)


def test_identity_conditioning_is_layer_norm():
    head, rng = _head()
    feats = rng.normal(size=(5, 10))
    _, _, cache = toy_head_forward(head, feats, 0.4)
    p = head.params
    h = cache["x"] @ p["W1"] + p["b1"]
    ln = (h - h.mean(1, keepdims=True)) / np.sqrt(h.var(1, keepdims=True) + LN_EPS)
    np.testing.assert_allclose(cache[1][1], ln, atol=1e-10)
    np.testing.assert_allclose(cache[1][4], np.tanh(ln), atol=1e-10)


def test_conditioning_makes_output_time_dependent():
    head, rng = _head(cond_std=0.5)
    head.params["W3"] = rng.normal(size=head.params["W3"].shape)
    feats = rng.normal(size=(8, 10))
    assert np.abs(toy_head_forward(head, feats, 0.1)[0] - toy_head_forward(head, feats, 0.9)[0]).max() > 1e-3


def test_scalar_time_matches_per_row_time():
    head, rng = _head(cond_std=0.5)
    head.params["W3"] = rng.normal(size=head.params["W3"].shape)
    feats = rng.normal(size=(6, 10))
    a, aa, ca = toy_head_forward(head, feats, 0.35)
    b, bb, cb = toy_head_forward(head, feats, np.full(6, 0.35))
    np.testing.assert_allclose(a, b, atol=1e-12)
    gx, ga = rng.normal(size=(6, 3)), rng.normal(size=(6, 7))
    ga_s, gb_s = toy_head_backward(head, ca, gx, ga), toy_head_backward(head, cb, gx, ga)
    for k in ga_s:
        np.testing.assert_allclose(ga_s[k], gb_s[k], atol=1e-10)


def test_scalar_time_gradients_match_finite_differences():
    head, rng = _head(cond_std=0.5, seed=3)
    head.params["W3"] = rng.normal(0, 0.3, head.params["W3"].shape)
    feats = rng.normal(size=(5, 10))
    gx = rng.normal(size=(5, 3))

    def loss():
        return (toy_head_forward(head, feats, 0.6)[0] * gx).sum()

    g = toy_head_backward(head, toy_head_forward(head, feats, 0.6)[2], gx)
    for k in ("W1", "scale_W1", "shift_W2", "W3"):
        assert _rel(_fd(loss, head.params[k]), g[k]) < TOLERANCE


def test_finite_difference_suite():
    errors = check_head()
    assert max(errors.values()) < TOLERANCE, errors
