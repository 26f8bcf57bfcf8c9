"""Central finite-difference checks shared by the learning and acceptance suites.

Each ``*_instance`` builds one random problem and returns the relative error
between the tape gradient and a central difference along a random direction.
"""

import numpy as np

from bootreg.autodiff import Tape
from bootreg.correspondence import ratio_candidates
from bootreg.features import GEOMETRIC, HEAD_SHAPES, encoder_shapes, mlp_on_tape, random_init
from bootreg.learning import (
    cosine_distance_node,
    ratio_weight_node,
    registration_loss_arrays,
    registration_loss_node,
    simsiam_loss,
)

from conftest import random_transform

EPS = 1e-6


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def unit(v):
    return v / np.linalg.norm(v)


def directional(f, x, v, eps=EPS):
    return (f(x + eps * v) - f(x - eps * v)) / (2 * eps)


def noisy_pair(rng, n):
    T = random_transform(rng)
    xp = rng.normal(size=(n, 3))
    xq = T.apply(xp) + rng.normal(scale=0.05, size=(n, 3))
    return xp, xq


def registration_instance(rng):
    """d loss / d weights of the registration loss."""
    n = int(rng.integers(8, 60))
    xp, xq = noisy_pair(rng, n)
    w = rng.uniform(0.2, 1.0, n)
    _, grad, _ = registration_loss_arrays(xp, xq, w)
    v = rng.normal(size=n)
    fd = directional(lambda z: registration_loss_arrays(xp, xq, z)[0], w, v)
    return rel_err(grad @ v, fd)


def ratio_registration_instance(rng):
    """d loss / d features through the ratio weights and the fitted transform."""
    n = 40
    xp, xq = noisy_pair(rng, n)
    f0 = rng.normal(size=(n, 8))
    f1 = f0 + rng.normal(scale=0.3, size=(n, 8))
    u0 = f0 / np.linalg.norm(f0, axis=1, keepdims=True)
    u1 = f1 / np.linalg.norm(f1, axis=1, keepdims=True)
    cand = ratio_candidates(u0, u1)
    index = np.argsort(-cand["weight"], kind="stable")[:30]
    p, q = cand["p"][index], cand["q"][index]

    def build(tape, a):
        w = ratio_weight_node(tape, tape.normalize_rows(a), tape.normalize_rows(tape.constant(f1)),
                              cand, index)
        return registration_loss_node(tape, xp[p], xq[q], w)[0]

    tape = Tape()
    a = tape.param(f0)
    tape.backward(build(tape, a))
    v = rng.normal(size=f0.shape)
    fd = directional(lambda z: float(_fresh(build, z).value), f0, v)
    return rel_err(float(np.sum(tape.grad_of(a) * v)), fd)


def _fresh(build, z):
    tape = Tape()
    return build(tape, tape.param(z))


def simsiam_instance(rng):
    """Feature and head gradients of the similarity loss.

    The targets sit behind a stop-gradient, so the feature derivative is
    taken with them held fixed; the head derivative is total.
    """
    n = int(rng.integers(5, 40))
    gp = rng.normal(size=(n, 32))
    gq = gp + rng.normal(scale=0.5, size=(n, 32))
    head = random_init(int(rng.integers(1 << 30)), HEAD_SHAPES)

    tape = Tape()
    a, b, h = tape.param(gp), tape.param(gq), tape.param(head.values)
    tape.backward(simsiam_loss(tape, a, b, h, HEAD_SHAPES))

    def fixed_targets(x, y):
        t = Tape()
        flat = t.constant(head.values)
        hx = mlp_on_tape(t, flat, HEAD_SHAPES, x, standardized=False)
        hy = mlp_on_tape(t, flat, HEAD_SHAPES, y, standardized=False)
        d = cosine_distance_node(t, hx, t.constant(gq)) + cosine_distance_node(t, hy, t.constant(gp))
        return float(t.mean(d).value)

    def by_head(values):
        t = Tape()
        return float(simsiam_loss(t, t.constant(gp), t.constant(gq), t.constant(values), HEAD_SHAPES).value)

    vp, vq, vh = rng.normal(size=gp.shape), rng.normal(size=gq.shape), rng.normal(size=head.values.shape)
    errs = [
        rel_err(float(np.sum(tape.grad_of(a) * vp)), directional(lambda z: fixed_targets(z, gq), gp, vp)),
        rel_err(float(np.sum(tape.grad_of(b) * vq)), directional(lambda z: fixed_targets(gp, z), gq, vq)),
        rel_err(float(tape.grad_of(h) @ vh), directional(by_head, head.values, vh)),
    ]
    return max(errs)


def encoder_instance(rng):
    """Parameter and input gradients of the encoder forward pass."""
    shapes = encoder_shapes(GEOMETRIC)
    params = random_init(int(rng.integers(1 << 30)), shapes)
    x = rng.normal(size=(int(rng.integers(4, 30)), shapes[0][0]))
    c = rng.normal(size=(len(x), shapes[-1][1]))

    def f(values, inputs):
        t = Tape()
        return float(np.sum(mlp_on_tape(t, t.constant(values), shapes, inputs).value * c))

    tape = Tape()
    flat, inp = tape.param(params.values), tape.param(x)
    out = mlp_on_tape(tape, flat, shapes, inp)
    tape.backward(tape.sum(tape.mul(out, c)))
    # unit directions keep the stencil from crossing ReLU kinks
    vw, vx = unit(rng.normal(size=params.values.shape)), unit(rng.normal(size=x.shape))
    return max(rel_err(float(tape.grad_of(flat) @ vw), directional(lambda z: f(z, x), params.values, vw)),
               rel_err(float(np.sum(tape.grad_of(inp) * vx)), directional(lambda z: f(params.values, z), x, vx)))
