"""Finite-difference verification of every loss and network layer.

Each component is checked over many seeded random instances against central
differences; the worst relative error across instances is reported. The
``perturb`` hook multiplies one component's analytic gradient by 1.001 so the
check harness itself can be shown to catch wrong gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, nets
from .errors import ConfigError
from .ndcore import Rng, finite_diff_check, sigmoid


@dataclass
class ComponentResult:
    name: str
    max_relative_error: float
    passed: bool


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    # keep ReLU-style kinks farther than the finite-difference step
    return np.where(np.abs(x) < margin, x + np.sign(x + 0.5) * margin, x)


def _check_margin(rng: Rng, tol: float, fault: bool):
    n, d = 3, 4
    left = rng.normal(size=(n, d))
    right = rng.normal(size=(n, d))
    y = (rng.uniform(size=n) < 0.5).astype(float)
    m = 0.5 + rng.uniform()

    def f(x):
        flat = x.reshape(2 * n, d)
        res = losses.margin_contrastive_loss(
            losses.LabeledPairBatch(flat[:n], flat[n:], y, m)
        )
        grad = np.concatenate([res.grad_left, res.grad_right]).ravel()
        return res.value, grad * (1.001 if fault else 1.0)

    return finite_diff_check(f, np.concatenate([left, right]).ravel(), tol)


def _check_nt_xent(rng: Rng, tol: float, fault: bool):
    n, d = 2 + int(rng.uniform() * 2), 4
    views = rng.normal(size=(2 * n, d))
    tau = 0.3 + rng.uniform()

    def f(x):
        res = losses.nt_xent_loss(losses.ViewBatch(x.reshape(2 * n, d), tau))
        return res.value, res.grad_views.ravel() * (1.001 if fault else 1.0)

    return finite_diff_check(f, views.ravel(), tol)


def _check_preference(rng: Rng, tol: float, fault: bool):
    p, d = 3, 4
    first = rng.normal(size=(p, d))
    second = rng.normal(size=(p, d))
    ref = rng.normal(size=d)
    y = (rng.uniform(size=p) < 0.5).astype(float)

    def f(x):
        a = x[: p * d].reshape(p, d)
        b = x[p * d : 2 * p * d].reshape(p, d)
        r = x[2 * p * d :]
        res = losses.preference_loss(losses.PreferenceBatch(a, b, r, y))
        grad = np.concatenate(
            [res.grad_first.ravel(), res.grad_second.ravel(), res.grad_reference]
        )
        return res.value, grad * (1.001 if fault else 1.0)

    x0 = np.concatenate([first.ravel(), second.ravel(), ref])
    return finite_diff_check(f, x0, tol)


def _check_combined(rng: Rng, tol: float, fault: bool):
    n, p, d = 2, 3, 4
    views = rng.normal(size=(2 * n, d))
    first = rng.normal(size=(p, d))
    second = rng.normal(size=(p, d))
    ref = rng.normal(size=d)
    y = (rng.uniform(size=p) < 0.5).astype(float)
    tau = 0.5 + rng.uniform() * 0.5
    alpha = rng.uniform(0.1, 0.9)
    sizes = [2 * n * d, p * d, p * d, d]
    splits = np.cumsum(sizes)[:-1]

    def f(x):
        v, a, b, r = np.split(x, splits)
        nt = losses.nt_xent_loss(losses.ViewBatch(v.reshape(2 * n, d), tau))
        pro = losses.preference_loss(
            losses.PreferenceBatch(a.reshape(p, d), b.reshape(p, d), r, y)
        )
        res = losses.combined_loss(nt, pro, losses.CombinedWeight(alpha))
        grad = np.concatenate(
            [
                res.grad_views.ravel(),
                res.grad_first.ravel(),
                res.grad_second.ravel(),
                res.grad_reference,
            ]
        )
        return res.value, grad * (1.001 if fault else 1.0)

    x0 = np.concatenate([views.ravel(), first.ravel(), second.ravel(), ref])
    return finite_diff_check(f, x0, tol)


def _layer_param_check(layer_f, x0, tol, fault):
    def f(x):
        value, grad = layer_f(x)
        return value, grad * (1.001 if fault else 1.0)

    return finite_diff_check(f, x0, tol)


def _check_dense(rng: Rng, tol: float, fault: bool):
    b, d_in, d_out = 3, 5, 4
    layer = nets.Dense(d_in, d_out, rng.substream("init"))
    x = rng.normal(size=(b, d_in))
    proj = rng.normal(size=(b, d_out))
    sizes = [b * d_in, d_in * d_out, d_out]
    splits = np.cumsum(sizes)[:-1]

    def layer_f(v):
        xv, wv, bv = np.split(v, splits)
        layer.w[...] = wv.reshape(d_in, d_out)
        layer.b[...] = bv
        y = layer.forward(xv.reshape(b, d_in))
        value = float((y * proj).sum())
        layer.dw[...] = 0.0
        layer.db[...] = 0.0
        dx = layer.backward(proj)
        grad = np.concatenate([dx.ravel(), layer.dw.ravel(), layer.db])
        return value, grad

    x0 = np.concatenate([x.ravel(), layer.w.copy().ravel(), layer.b.copy()])
    return _layer_param_check(layer_f, x0, tol, fault)


def _conv_like_check(rng, tol, fault, transpose: bool):
    b, c_in, c_out, h, w = 2, 2, 3, 6, 6
    cls = nets.ConvTranspose2d if transpose else nets.Conv2d
    layer = cls(c_in, c_out, rng.substream("init"))
    x = rng.normal(size=(b, c_in, h, w))
    out_h = 2 * h if transpose else h // 2
    proj = rng.normal(size=(b, c_out, out_h, out_h))
    sizes = [x.size, layer.w.size, layer.b.size]
    splits = np.cumsum(sizes)[:-1]

    def layer_f(v):
        xv, wv, bv = np.split(v, splits)
        layer.w[...] = wv.reshape(layer.w.shape)
        layer.b[...] = bv
        y = layer.forward(xv.reshape(x.shape))
        value = float((y * proj).sum())
        layer.dw[...] = 0.0
        layer.db[...] = 0.0
        dx = layer.backward(proj)
        grad = np.concatenate([dx.ravel(), layer.dw.ravel(), layer.db])
        return value, grad

    x0 = np.concatenate([x.ravel(), layer.w.copy().ravel(), layer.b.copy()])
    return _layer_param_check(layer_f, x0, tol, fault)


def _check_relu(rng: Rng, tol: float, fault: bool):
    layer = nets.ReLU()
    x = _away_from_zero(rng.normal(size=(3, 6)))
    proj = rng.normal(size=x.shape)

    def layer_f(v):
        y = layer.forward(v.reshape(x.shape))
        return float((y * proj).sum()), layer.backward(proj).ravel()

    return _layer_param_check(layer_f, x.ravel(), tol, fault)


def _check_l2_normalize(rng: Rng, tol: float, fault: bool):
    layer = nets.L2NormalizeRows()
    x = rng.normal(size=(3, 5))
    proj = rng.normal(size=x.shape)

    def layer_f(v):
        y = layer.forward(v.reshape(x.shape))
        return float((y * proj).sum()), layer.backward(proj).ravel()

    return _layer_param_check(layer_f, x.ravel(), tol, fault)


def _check_pool(rng: Rng, tol: float, fault: bool):
    layer = nets.GlobalAvgPool()
    x = rng.normal(size=(2, 3, 4, 4))
    proj = rng.normal(size=(2, 3))

    def layer_f(v):
        y = layer.forward(v.reshape(x.shape))
        return float((y * proj).sum()), layer.backward(proj).ravel()

    return _layer_param_check(layer_f, x.ravel(), tol, fault)


def _check_dropout(rng: Rng, tol: float, fault: bool):
    layer = nets.Dropout(0.7)
    x = _away_from_zero(rng.normal(size=(3, 8)))
    proj = rng.normal(size=x.shape)
    mask_seed = int(rng.raw(1)[0])

    def layer_f(v):
        # same mask on every evaluation: the draw stream is re-seeded
        y = layer.forward(v.reshape(x.shape), train=True, rng=Rng(mask_seed))
        return float((y * proj).sum()), layer.backward(proj).ravel()

    return _layer_param_check(layer_f, x.ravel(), tol, fault)


def _check_sigmoid_map(rng: Rng, tol: float, fault: bool):
    x = rng.normal(size=(2, 1, 4, 4))
    proj = rng.normal(size=x.shape)

    def layer_f(v):
        z = v.reshape(x.shape)
        p = sigmoid(z)
        return float((p * proj).sum()), (p * (1 - p) * proj).ravel()

    return _layer_param_check(layer_f, x.ravel(), tol, fault)


def _check_softmax_ce(rng: Rng, tol: float, fault: bool):
    b, k = 3, 5
    logits = rng.normal(size=(b, k))
    labels = rng.integers(0, k, size=b)

    def layer_f(v):
        from .ndcore import softmax

        probs = softmax(v.reshape(b, k))
        loss, dlogits = nets.cross_entropy_grad(probs, labels)
        return loss, dlogits.ravel()

    return _layer_param_check(layer_f, logits.ravel(), tol, fault)


def _check_encoder(rng: Rng, tol: float, fault: bool):
    enc = nets.ConvEncoder(rng.substream("init"))
    x = rng.uniform(size=(1, 1, 8, 8))
    proj = rng.normal(size=(1, 32))
    params = enc.named_params()
    names = list(params)
    sizes = [x.size] + [params[n].size for n in names]
    splits = np.cumsum(sizes)[:-1]

    def layer_f(v):
        parts = np.split(v, splits)
        xv = parts[0].reshape(x.shape)
        for name, part in zip(names, parts[1:]):
            params[name][...] = part.reshape(params[name].shape)
        emb = enc.forward(xv)
        value = float((emb * proj).sum())
        enc.zero_grads()
        dx = enc.backward(proj)
        grads = enc.named_grads()
        grad = np.concatenate([dx.ravel()] + [grads[n].ravel() for n in names])
        return value, grad

    x0 = np.concatenate([x.ravel()] + [params[n].copy().ravel() for n in names])
    return _layer_param_check(layer_f, x0, tol, fault)


def _check_decoder(rng: Rng, tol: float, fault: bool):
    enc = nets.ConvEncoder(rng.substream("enc"))
    dec = nets.SegDecoder(rng.substream("dec"))
    _, stages = enc.forward(rng.uniform(size=(1, 1, 8, 8)), keep_stages=True)
    # small projection keeps central-difference cancellation noise below
    # tolerance on the deep chain's near-zero gradient coordinates
    proj = 0.02 * rng.normal(size=(1, 1, 8, 8))
    params = dec.named_params()
    names = list(params)
    sizes = [params[n].size for n in names]
    splits = np.cumsum(sizes)[:-1]

    def layer_f(v):
        for name, part in zip(names, np.split(v, splits)):
            params[name][...] = part.reshape(params[name].shape)
        probs = dec.forward(stages)
        value = float((probs * proj).sum())
        dec.zero_grads()
        dec.backward(probs * (1 - probs) * proj)
        grads = dec.named_grads()
        grad = np.concatenate([grads[n].ravel() for n in names])
        return value, grad

    x0 = np.concatenate([params[n].copy().ravel() for n in names])
    return _layer_param_check(layer_f, x0, tol, fault)


_COMPONENTS = {
    "loss/margin_contrastive": (_check_margin, 100),
    "loss/nt_xent": (_check_nt_xent, 100),
    "loss/preference": (_check_preference, 100),
    "loss/combined": (_check_combined, 100),
    "layer/dense": (_check_dense, 100),
    "layer/conv2d": (lambda r, t, f: _conv_like_check(r, t, f, False), 100),
    "layer/conv_transpose2d": (lambda r, t, f: _conv_like_check(r, t, f, True), 100),
    "layer/relu": (_check_relu, 100),
    "layer/l2_normalize": (_check_l2_normalize, 100),
    "layer/global_avg_pool": (_check_pool, 100),
    "layer/dropout": (_check_dropout, 100),
    "layer/sigmoid_map": (_check_sigmoid_map, 100),
    "layer/softmax_cross_entropy": (_check_softmax_ce, 100),
    "net/encoder": (_check_encoder, 1),
    "net/decoder": (_check_decoder, 1),
}


def component_names() -> list[str]:
    return list(_COMPONENTS)


def run_selfcheck(
    tolerance: float = 1e-4,
    instances: int | None = None,
    seed: int = 2024,
    perturb: str | None = None,
) -> list[ComponentResult]:
    """Check every component; returns one result per component.

    ``instances`` overrides the per-component instance counts (useful for a
    quick smoke run). ``perturb`` names a component whose analytic gradient
    is deliberately corrupted; the run must then report it as failed.
    """
    if perturb is not None and perturb not in _COMPONENTS:
        raise ConfigError(f"unknown component to perturb: {perturb}")
    results = []
    for name, (check, default_n) in _COMPONENTS.items():
        n = default_n if instances is None else max(1, min(instances, default_n))
        worst = 0.0
        ok = True
        for k in range(n):
            rng = Rng(0).substream("selfcheck", seed, name, k)
            report = check(rng, tolerance, name == perturb)
            worst = max(worst, report.max_relative_error)
            ok = ok and report.passed
        results.append(ComponentResult(name, worst, ok))
    return results
