"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np

from isingprune import tensor as T
from isingprune.model import LayerSpec, Network, NetworkSpec


def naive_conv2d(x, k, stride=1, padding=0):
    """Direct nested-loop cross-correlation."""
    B, C, H, W = x.shape
    O, _, K1, K2 = k.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - K1) // stride + 1
    Wo = (W + 2 * padding - K2) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(K1):
                            for v in range(K2):
                                acc += xp[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def naive_matmul(x, w):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for j in range(w.shape[0]):
            for k in range(x.shape[1]):
                out[i, j] += x[i, k] * w[j, k]
    return out


def grad_check(fn, arrays, eps=1e-5, coords=None, rng=None):
    """Norm-relative error between tape gradients and central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor. With ``coords`` set, only
    that many random coordinates per array are probed.
    """
    params = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = fn(params)
    T.backward(loss, tape)
    an, fd = [], []
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            up = float(fn(params).data)
            flat[i] = old - eps
            dn = float(fn(params).data)
            flat[i] = old
            fd.append((up - dn) / (2 * eps))
            an.append(p.grad.reshape(-1)[i])
    an, fd = np.array(an), np.array(fd)
    scale = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-12)
    return np.linalg.norm(an - fd) / scale


def counting_entropy(values) -> float:
    """Entropy in bits from a dictionary of counts."""
    counts = Counter(np.asarray(values).reshape(-1).tolist())
    n = sum(counts.values())
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


def brute_energy(D, rows, cols, weights, linear, bias, state):
    """O(D^2) double loop over a dense coupling matrix."""
    G = [[0.0] * D for _ in range(D)]
    for r, c, w in zip(rows, cols, weights):
        G[r][c] += w
    e = 0.0
    for d in range(D):
        for e2 in range(D):
            e -= G[d][e2] * state[d] * state[e2]
    for d in range(D):
        e -= linear[d] * state[d]
    e -= bias * sum(state)
    return e


def brute_energy_exact(D, rows, cols, weights, linear, state):
    """O(D^2) double loop in rational arithmetic with the balancing bias ``-(sum of weights) / D``.

    Returns the correctly rounded float of the exact energy.
    """
    G = [[Fraction(0)] * D for _ in range(D)]
    for r, c, w in zip(rows, cols, weights):
        G[r][c] += Fraction(float(w))
    lin = [Fraction(float(v)) for v in linear]
    bias = -(sum(sum(row) for row in G) + sum(lin)) / D
    e = Fraction(0)
    for d in range(D):
        for e2 in range(D):
            e -= G[d][e2] * state[d] * state[e2]
    for d in range(D):
        e -= lin[d] * state[d]
    e -= bias * sum(state)
    return float(e)


class ExactDenseEnergy:
    """Precomputed rational dense matrix for repeated double-loop evaluation."""

    def __init__(self, D, rows, cols, weights, linear):
        self.D = D
        self.G = [[Fraction(0)] * D for _ in range(D)]
        for r, c, w in zip(rows, cols, weights):
            self.G[r][c] += Fraction(float(w))
        self.lin = [Fraction(float(v)) for v in linear]
        self.bias = -(sum(sum(row) for row in self.G) + sum(self.lin)) / D

    def __call__(self, state):
        e = Fraction(0)
        for d in range(self.D):
            for e2 in range(self.D):
                if state[d] and state[e2]:
                    e -= self.G[d][e2]
        for d in range(self.D):
            if state[d]:
                e -= self.lin[d] + self.bias
        return float(e)


def random_spd(rng, K):
    a = rng.normal(size=(K, K))
    return a @ a.T + 0.1 * np.eye(K)


def all_states(D):
    return np.array(list(itertools.product((0, 1), repeat=D)), dtype=np.uint8)


def random_graph_arrays(D, rng, density=0.5, integer=False):
    ii, jj = np.nonzero(~np.eye(D, dtype=bool))
    keep = rng.random(ii.size) < density
    ii, jj = ii[keep], jj[keep]
    if integer:
        w = rng.integers(-8, 9, ii.size).astype(float)
        lin = rng.integers(-4, 5, D).astype(float)
    else:
        w = rng.normal(size=ii.size)
        lin = rng.normal(size=D) * (rng.random(D) < 0.3)
    return ii, jj, w, lin


def kink_margin(network, x) -> float:
    """Smallest distance of any ReLU input from 0 or of any max-pool winner from the runner-up.

    Central differences are only valid when this exceeds the probe step.
    """
    h = np.asarray(x, dtype=np.float64)
    margin = np.inf
    for k, ly in enumerate(network.spec.layers):
        w, b = network.params[2 * k].data, network.params[2 * k + 1].data
        if ly.kind == "conv":
            pre = T.conv2d(h, w, ly.stride, ly.padding).data + b[None, :, None, None]
        else:
            pre = h.reshape(h.shape[0], -1) @ w.T + b
        if ly.is_logits:
            break
        margin = min(margin, np.abs(pre).min())
        h = np.maximum(pre, 0.0)
        if ly.kind == "conv" and ly.pool:
            B, C, H, W = h.shape
            blocks = h[:, :, :H // 2 * 2, :W // 2 * 2].reshape(B, C, H // 2, 2, W // 2, 2)
            blocks = np.sort(blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4), axis=-1)
            live = blocks[..., 3] > 0
            if live.any():
                margin = min(margin, (blocks[..., 3] - blocks[..., 2])[live].min())
            h = blocks[..., 3]
    return margin


OPS = {
    "add": (lambda p: T.add(p[0], p[1]), [(3, 4), (1, 4)]),
    "sub": (lambda p: T.sub(p[0], p[1]), [(2, 3), (2, 3)]),
    "mul": (lambda p: T.mul(p[0], p[1]), [(2, 3), (3,)]),
    "reshape": (lambda p: T.reshape(p[0], (6, 2)), [(3, 4)]),
    "relu": (lambda p: T.relu(p[0]), [(4, 5)]),
    "max_pool2d": (lambda p: T.max_pool2d(p[0]), [(2, 2, 5, 4)]),
    "conv2d": (lambda p: T.conv2d(p[0], p[1], 1, 1), [(2, 2, 5, 5), (3, 2, 3, 3)]),
    "conv2d_stride": (lambda p: T.conv2d(p[0], p[1], 2, 1), [(1, 2, 5, 5), (2, 2, 3, 3)]),
    "dense": (lambda p: T.dense(p[0], p[1], p[2]), [(3, 4), (5, 4), (5,)]),
}


def small_cnn_spec():
    return NetworkSpec((1, 6, 6), (LayerSpec.conv(2, 1, pool=True), LayerSpec.conv(3, 2),
                                   LayerSpec.dense(4, 27), LayerSpec.dense(3, 4, is_logits=True)))


def loss_fn(spec, x, y):
    return lambda params: T.softmax_cross_entropy(Network(spec, params).forward(x), y)


def smooth_sample(spec, x_shape, classes, seed, margin=1e-3):
    """Random network and batch whose ReLU/max-pool kinks are at least ``margin`` away."""
    ss = np.random.SeedSequence(seed)
    while True:
        rng = np.random.default_rng(ss.spawn(1)[0])
        net = Network(spec, rng=rng)
        for p in net.params[1::2]:
            p.data[:] = rng.normal(0, 0.1, p.shape)
        x = rng.random(x_shape)
        if kink_margin(net, x) > margin:
            return net, x, rng.integers(0, classes, x_shape[0])
