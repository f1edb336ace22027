"""Pruning graph over units and its Ising energy.

Edge weights:

* two kernels d != d' of the same conv layer: KL(N_d || N_d') - 1 (both
  ordered pairs are edges);
* kernel d of conv layer l to kernel d' of conv layer l + 1: H_d - 1;
* hidden unit d of dense layer l to unit d' of dense layer l + 1: A_d - 1;
* everything else, including the conv -> dense boundary: no edge.

Units of the last hidden layer connect to the (always active) logits layer.
That contribution is kept as a per-unit linear term ``linear[d] = A_d - 1``
rather than as an edge, since logits units carry no state.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np

from . import stats as st
from .errors import ConsistencyError, InputError, NumericalError
from .model import CONV, DENSE, Network, UnitRegistry

_tags = itertools.count(1)


@dataclass
class BatchStats:
    """Per-unit statistics of one batch.

    ``entropy`` is NaN for dense units and ``activity`` is NaN for conv units.
    ``kernels`` maps each conv layer index to the (means, covariances) of its
    kernels.
    """

    entropy: np.ndarray
    activity: np.ndarray
    kernels: dict[int, tuple[np.ndarray, np.ndarray]]


def gather_stats(network: Network, x, eps: float = st.DEFAULT_EPS) -> BatchStats:
    """Unmasked, gradient-free forward pass on ``x`` and the per-unit measures."""
    _, acts = network.forward(x, None, collect=True)
    reg = network.registry
    D = reg.D
    ent = np.full(D, np.nan)
    act = np.full(D, np.nan)
    kernels = {}
    for a, l in zip(acts, sorted(reg.layer_slices)):
        sl = reg.layer_slices[l]
        if network.spec.layers[l].kind == CONV:
            ent[sl] = st.channel_entropies(a)
            kernels[l] = st.fit_layer_distributions(network.params[2 * l].data, eps)
        else:
            act[sl] = st.dense_activation_measure(a.mean(axis=0))
    return BatchStats(ent, act, kernels)


@dataclass
class PruningGraph:
    D: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    linear: np.ndarray
    bias: float
    gamma_sum: float
    tag: int = 0
    balanced: bool = True  # bias is exactly -(sum of all weights) / D, not an externally set value

    @cached_property
    def _exact(self):
        """Weights as integers W with w = W * 2**k, for exact energy sums."""
        vals = np.concatenate([self.weights, self.linear])
        if not np.all(np.isfinite(vals)) or not math.isfinite(self.bias):
            raise NumericalError("graph weights must be finite")
        mant, expo = np.frexp(vals)
        mant = (mant * 2.0**53).astype(np.int64).tolist()
        expo = (expo.astype(np.int64) - 53).tolist()
        k = min((e for m, e in zip(mant, expo) if m), default=0)
        ints = [m << (e - k) if m else 0 for m, e in zip(mant, expo)]
        E = self.rows.size
        return k, np.array(ints[:E], dtype=object), np.array(ints[E:], dtype=object), sum(ints)

    @property
    def edges(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.weights.tolist()))

    def matrix(self) -> np.ndarray:
        """Dense D x D coupling matrix (row = source d, column = target d')."""
        m = np.zeros((self.D, self.D))
        np.add.at(m, (self.rows, self.cols), self.weights)
        return m


def compute_bias(gamma_sum: float, D: int) -> float:
    """Bias that makes the all-active state have zero energy."""
    if D < 1:
        raise InputError("bias needs at least one unit (D >= 1)")
    return -(gamma_sum / D)


def make_graph(D: int, rows, cols, weights, linear=None) -> PruningGraph:
    """Assemble a graph from explicit edges, filling in the balancing bias."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    linear = np.zeros(D) if linear is None else np.asarray(linear, dtype=np.float64)
    if np.any(rows == cols):
        raise InputError("self-edges are not allowed")
    gamma_sum = float(weights.sum() + linear.sum())
    bias = compute_bias(gamma_sum, D) if D > 0 else 0.0
    return PruningGraph(D, rows, cols, weights, linear, bias, gamma_sum, next(_tags))


def build_graph(registry: UnitRegistry, stats: BatchStats, kl_ceiling: float | None = None) -> PruningGraph:
    """Edge weights from batch statistics, then the balancing bias.

    ``kl_ceiling`` optionally clips the within-layer KL values before the -1
    shift. The last hidden layer always feeds the logits layer.
    """
    D = registry.D
    if stats.entropy.shape != (D,) or stats.activity.shape != (D,):
        raise ConsistencyError(f"batch stats cover {stats.entropy.size} units, registry has {D}")
    hidden = sorted(registry.layer_slices)
    kinds = {l: registry.entries[registry.layer_slices[l].start].kind for l in hidden}
    rows, cols, ws = [], [], []
    linear = np.zeros(D)
    for k, l in enumerate(hidden):
        sl = registry.layer_slices[l]
        idx = np.arange(sl.start, sl.stop)
        nxt = hidden[k + 1] if k + 1 < len(hidden) else None
        if kinds[l] == CONV:
            if l not in stats.kernels:
                raise ConsistencyError(f"missing kernel distributions for conv layer {l}")
            mu, cov = stats.kernels[l]
            if mu.shape[0] != idx.size:
                raise ConsistencyError(f"layer {l}: {mu.shape[0]} kernel records for {idx.size} units")
            h = stats.entropy[sl]
            if not np.all(np.isfinite(h)):
                raise ConsistencyError(f"missing entropy record in conv layer {l}")
            kl = st.pairwise_kl(mu, cov)
            if kl_ceiling is not None:
                kl = np.minimum(kl, kl_ceiling)
            ii, jj = np.nonzero(~np.eye(idx.size, dtype=bool))
            rows.append(idx[ii]); cols.append(idx[jj]); ws.append(kl[ii, jj] - 1.0)
            if nxt is not None and kinds[nxt] == CONV:
                nidx = np.arange(registry.layer_slices[nxt].start, registry.layer_slices[nxt].stop)
                src = np.repeat(idx, nidx.size)
                rows.append(src); cols.append(np.tile(nidx, idx.size)); ws.append(np.repeat(h - 1.0, nidx.size))
        else:
            a = stats.activity[sl]
            if not np.all(np.isfinite(a)):
                raise ConsistencyError(f"missing activation record in dense layer {l}")
            if nxt is None:
                linear[sl] = a - 1.0
            elif kinds[nxt] == DENSE:
                nidx = np.arange(registry.layer_slices[nxt].start, registry.layer_slices[nxt].stop)
                rows.append(np.repeat(idx, nidx.size)); cols.append(np.tile(nidx, idx.size))
                ws.append(np.repeat(a - 1.0, nidx.size))
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    return make_graph(D, cat(rows, np.int64), cat(cols, np.int64), cat(ws, np.float64), linear)


def energies(graph: PruningGraph, states) -> np.ndarray:
    """Energy ``-sum_e w_e s_d s_d' - sum_d lin_d s_d - b n`` of each row of a (P, D) binary matrix.

    Every value is the correctly rounded result of the exact sum, with the
    balancing bias taken as the exact ``-(sum of weights) / D``. Energies are
    therefore independent of term order and batch shape, and the all-active
    state scores exactly 0.
    """
    S = np.asarray(states)
    if S.ndim != 2 or S.shape[1] != graph.D:
        raise InputError(f"states must have shape (P, {graph.D}), got {S.shape}")
    if graph.D == 0:
        return np.zeros(S.shape[0])
    k, W, L, G = graph._exact
    S = S.astype(bool)
    pairs = S[:, graph.rows] & S[:, graph.cols]
    scale = Fraction(2) ** k
    bias = Fraction(-G, graph.D) * scale if graph.balanced else Fraction(graph.bias)
    out = np.empty(S.shape[0])
    for i in range(S.shape[0]):
        active = sum(W[pairs[i]].tolist()) + sum(L[S[i]].tolist())
        out[i] = float(-active * scale - bias * int(S[i].sum())) + 0.0  # no negative zeros
    return out


def energy(graph: PruningGraph, state) -> float:
    s = np.asarray(state)
    if s.shape != (graph.D,):
        raise InputError(f"state length {s.size} does not match D = {graph.D}")
    return float(energies(graph, s[None, :])[0])


def local_fields(graph: PruningGraph, state) -> np.ndarray:
    """h_d such that flipping bit d changes the energy by ``-h_d * (s_new - s_old)``."""
    s = np.asarray(state, dtype=np.float64)
    h = np.zeros(graph.D)
    np.add.at(h, graph.rows, graph.weights * s[graph.cols])
    np.add.at(h, graph.cols, graph.weights * s[graph.rows])
    return h + graph.linear + graph.bias


def flip_delta(graph: PruningGraph, state, d: int) -> float:
    s = np.asarray(state)
    sign = 1.0 - 2.0 * s[d]
    return float(-local_fields(graph, s)[d] * sign)


def dump_graph(graph: PruningGraph, path) -> None:
    """Text dump: one ``d d' gamma`` line per edge, ``d out gamma`` per logits link, then ``bias b``."""
    lines = [f"# D={graph.D}"]
    lines += [f"{d} {e} {w!r}" for d, e, w in graph.edges]
    lines += [f"{d} out {w!r}" for d, w in enumerate(graph.linear.tolist()) if w != 0.0]
    lines.append(f"bias {graph.bias!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path) -> PruningGraph:
    rows, cols, ws = [], [], []
    linear = {}
    bias = None
    D = None
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0].startswith("#"):
            if line.lstrip("# ").startswith("D="):
                D = int(line.lstrip("# ")[2:])
            continue
        if parts[0] == "bias":
            bias = float(parts[1])
        elif parts[1] == "out":
            linear[int(parts[0])] = float(parts[2])
        else:
            rows.append(int(parts[0])); cols.append(int(parts[1])); ws.append(float(parts[2]))
    if D is None:
        D = max([*rows, *cols, *linear, -1]) + 1
    lin = np.zeros(D)
    for d, w in linear.items():
        lin[d] = w
    g = make_graph(D, rows, cols, ws, lin)
    if bias is not None and bias != g.bias:
        g.bias, g.balanced = bias, False
    return g
