"""Differentiable sorting networks.

A sorting network is a fixed schedule of compare-exchange layers.  Relaxing
each compare-exchange with a sigmoid-shaped ``f`` turns every layer into a
symmetric doubly stochastic matrix ``P_t``; their product
``Q = P_L ... P_1`` is a relaxed permutation matrix with
``sorted_values = Q @ values``.  Row ``k`` of ``Q`` is the distribution over
which input element lands at rank ``k`` (ascending order).

Two evaluation paths exist:

* :func:`soft_sort_rows` - a fused numba kernel over many rows, used in
  training.  Its backward pass recomputes the forward per row.
* :func:`swap_layer` / :func:`soft_sort_reference` - explicit ``P_t``
  matrices assembled from autodiff primitives.  Slow, but independent of the
  fused kernel; tests compare the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PHI_EPS = 1e-3
_KIND_CODES = {"arctan": 0, "logistic": 1}

# per-pair layer modes: soft relaxed swap, forced keep, forced exchange
SOFT, KEEP, EXCHANGE = -1, 1, 0


@dataclass(frozen=True)
class RelaxFamily:
    """Sigmoid used to relax a compare-exchange.

    ``arctan``:   f(x) = atan(beta x) / pi + 1/2
    ``logistic``: f(x) = sigmoid(beta x / (|x| + eps) ** lam); ``lam = 0``
    is the plain logistic, ``lam = 0.25`` the default. ``eps = 1e-3`` keeps
    the curvature near ties bounded.
    """

    kind: str = "logistic"
    steepness: float = 100.0
    lam: float = 0.25

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown relaxation kind {self.kind!r}")
        if not self.steepness > 0:
            raise ValueError("steepness must be positive")
        if not 0 <= self.lam < 1:
            raise ValueError("lam must lie in [0, 1)")

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    def with_steepness(self, beta: float) -> "RelaxFamily":
        return RelaxFamily(self.kind, float(beta), self.lam)


def relax_fn(x, family: RelaxFamily):
    """Evaluate the relaxation on a float or array."""
    x = np.asarray(x, dtype=np.float64)
    # both branches avoid forming 1 - (something close to 1) in the lower tail
    if family.kind == "arctan":
        y = family.steepness * x
        with np.errstate(divide="ignore"):
            out = np.where(y >= 0, np.arctan(y) / np.pi + 0.5, -np.arctan(1.0 / y) / np.pi)
    else:
        z = family.steepness * x / (np.abs(x) + PHI_EPS) ** family.lam
        e = np.exp(-np.abs(z))
        out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def relax(x: Tensor, family: RelaxFamily) -> Tensor:
    """Relaxation built from autodiff primitives (differentiable in ``x``)."""
    if family.kind == "arctan":
        return ad.add(ad.mul(ad.arctan(ad.mul(x, family.steepness)), 1.0 / math.pi), 0.5)
    z = ad.mul(x, family.steepness)
    if family.lam:
        z = ad.mul(z, ad.power(ad.add(ad.abs(x), PHI_EPS), -family.lam))
    return ad.sigmoid(z)


# --------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class SortingNetwork:
    kind: str
    length: int
    padded_length: int
    layers: tuple  # tuple of tuples of (i, j) pairs, i < j, over padded positions
    modes: tuple = field(repr=False)  # per layer, per pair: SOFT / KEEP / EXCHANGE

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def sentinels(self) -> range:
        return range(self.length, self.padded_length)


def _odd_even_layers(n: int) -> list:
    return [[(i, i + 1) for i in range(t % 2, n - 1, 2)] for t in range(n)]


def _bitonic_layers(n: int) -> list:
    layers = []
    k = 2
    while k <= n:
        layers.append([(b + i, b + k - 1 - i) for b in range(0, n, k) for i in range(k // 2)])
        j = k // 4
        while j >= 1:
            layers.append([(i, i + j) for i in range(n) if not i & j])
            j //= 2
        k *= 2
    return layers


def _sentinel_modes(layers, length: int, padded: int) -> tuple:
    # Sentinels (+inf) lose every comparison against real values and keep
    # their place against each other, so their route is value independent.
    is_sentinel = np.arange(padded) >= length
    modes = []
    for layer in layers:
        row = []
        for i, j in layer:
            si, sj = is_sentinel[i], is_sentinel[j]
            if sj:
                row.append(KEEP)
            elif si:
                row.append(EXCHANGE)
                is_sentinel[i], is_sentinel[j] = sj, si
            else:
                row.append(SOFT)
        modes.append(tuple(row))
    return tuple(modes)


@lru_cache(maxsize=None)
def build_network(kind: str, length: int) -> SortingNetwork:
    """Compare-exchange schedule of an ``odd_even`` or ``bitonic`` network."""
    if length < 1:
        raise ValueError("network length must be >= 1")
    if kind == "odd_even":
        padded = length
        layers = _odd_even_layers(length)
    elif kind == "bitonic":
        padded = 1 << (length - 1).bit_length()
        layers = _bitonic_layers(padded) or [[]]
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    layers = tuple(tuple(layer) for layer in layers)
    return SortingNetwork(kind, length, padded, layers, _sentinel_modes(layers, length, padded))


@lru_cache(maxsize=None)
def _network_arrays(net: SortingNetwork):
    width = max((len(layer) for layer in net.layers), default=0)
    L = net.num_layers
    I = np.zeros((L, max(width, 1)), dtype=np.int64)
    J = np.zeros_like(I)
    M = np.full_like(I, KEEP)
    for t, (layer, modes) in enumerate(zip(net.layers, net.modes)):
        for p, ((i, j), m) in enumerate(zip(layer, modes)):
            I[t, p], J[t, p], M[t, p] = i, j, m
    return I, J, M


# --------------------------------------------------------------------------
# oracle


def hard_sort_oracle(values):
    """Stable ascending sort; returns (sorted values, permutation matrix)."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    perm = np.zeros((len(values), len(values)))
    perm[np.arange(len(values)), order] = 1.0
    return values[order], perm


# --------------------------------------------------------------------------
# fused kernels


@numba.njit(cache=True, inline="always")
def _f(x, code, beta, lam):
    if code == 0:
        y = beta * x
        if y >= 0:
            return math.atan(y) / math.pi + 0.5
        return -math.atan(1.0 / y) / math.pi
    z = beta * x / (abs(x) + PHI_EPS) ** lam
    e = math.exp(-abs(z))
    return 1.0 / (1.0 + e) if z >= 0 else e / (1.0 + e)


@numba.njit(cache=True, inline="always")
def _df(x, code, beta, lam):
    if code == 0:
        bx = beta * x
        return beta / (math.pi * (1.0 + bx * bx))
    ax = abs(x) + PHI_EPS
    e = math.exp(-abs(beta * x / ax**lam))
    return e / ((1.0 + e) * (1.0 + e)) * beta * ax ** (-lam - 1.0) * (ax - lam * abs(x))


@numba.njit(cache=True)
def _pad_row(row, padded, out):
    n = row.shape[0]
    big = 0.0
    for k in range(n):
        out[k] = row[k]
        if abs(row[k]) > big:
            big = abs(row[k])
    for k in range(n, padded):
        out[k] = 2.0 * big + 1.0  # value is never compared softly


@numba.njit(cache=True)
def _forward_kernel(values, I, J, M, counts, padded, code, beta, lam):
    n, R = values.shape
    L = I.shape[0]
    perms = np.zeros((n, R, R), dtype=values.dtype)
    out_vals = np.zeros((n, R), dtype=values.dtype)
    v = np.zeros(padded, dtype=values.dtype)
    Q = np.zeros((padded, padded), dtype=values.dtype)
    lo = np.zeros(padded, dtype=np.int64)
    hi = np.zeros(padded, dtype=np.int64)
    for r in range(n):
        _pad_row(values[r], padded, v)
        Q[:, :] = 0.0
        for k in range(padded):
            Q[k, k] = 1.0
            lo[k] = k
            hi[k] = k + 1
        for t in range(L):
            for p in range(counts[t]):
                mode = M[t, p]
                if mode == 1:
                    continue
                i = I[t, p]
                j = J[t, p]
                a = 0.0
                b = 1.0
                if mode == -1:
                    a = _f(v[j] - v[i], code, beta, lam)
                    b = _f(v[i] - v[j], code, beta, lam)
                vi = v[i]
                vj = v[j]
                v[i] = a * vi + b * vj
                v[j] = b * vi + a * vj
                l0 = min(lo[i], lo[j])
                h0 = max(hi[i], hi[j])
                for k in range(l0, h0):
                    qi = Q[i, k]
                    qj = Q[j, k]
                    Q[i, k] = a * qi + b * qj
                    Q[j, k] = b * qi + a * qj
                lo[i] = l0
                lo[j] = l0
                hi[i] = h0
                hi[j] = h0
        for k in range(R):
            out_vals[r, k] = v[k]
            for c in range(R):
                perms[r, k, c] = Q[k, c]
    return perms, out_vals


@numba.njit(cache=True)
def _backward_kernel(values, gperm, I, J, M, counts, padded, code, beta, lam):
    n, R = values.shape
    L, W = I.shape
    grad = np.zeros((n, R), dtype=values.dtype)
    vh = np.zeros((L + 1, padded), dtype=values.dtype)
    # H[t] keeps the rows touched by layer t as they were before the layer,
    # only over the columns the layer reads (the pair's joint support).
    H = np.zeros((L, padded, padded), dtype=values.dtype)
    span_lo = np.zeros((L, W), dtype=np.int64)
    span_hi = np.zeros((L, W), dtype=np.int64)
    Q = np.zeros((padded, padded), dtype=values.dtype)
    lo = np.zeros(padded, dtype=np.int64)
    hi = np.zeros(padded, dtype=np.int64)
    G = np.zeros((padded, padded), dtype=values.dtype)
    gv = np.zeros(padded, dtype=values.dtype)
    for r in range(n):
        _pad_row(values[r], padded, vh[0])
        Q[:, :] = 0.0
        for k in range(padded):
            Q[k, k] = 1.0
            lo[k] = k
            hi[k] = k + 1
        for t in range(L):
            vh[t + 1, :] = vh[t]
            v = vh[t + 1]
            Ht = H[t]
            for p in range(counts[t]):
                mode = M[t, p]
                if mode == 1:
                    continue
                i = I[t, p]
                j = J[t, p]
                a = 0.0
                b = 1.0
                if mode == -1:
                    a = _f(vh[t, j] - vh[t, i], code, beta, lam)
                    b = _f(vh[t, i] - vh[t, j], code, beta, lam)
                vi = v[i]
                vj = v[j]
                v[i] = a * vi + b * vj
                v[j] = b * vi + a * vj
                l0 = min(lo[i], lo[j])
                h0 = max(hi[i], hi[j])
                span_lo[t, p] = l0
                span_hi[t, p] = h0
                for k in range(l0, h0):
                    qi = Q[i, k]
                    qj = Q[j, k]
                    Ht[i, k] = qi
                    Ht[j, k] = qj
                    Q[i, k] = a * qi + b * qj
                    Q[j, k] = b * qi + a * qj
                lo[i] = l0
                lo[j] = l0
                hi[i] = h0
                hi[j] = h0
        # reverse sweep; columns outside a pair's span are never read again
        for k in range(padded):
            for c in range(padded):
                G[k, c] = gperm[r, k, c] if (k < R and c < R) else 0.0
            gv[k] = 0.0
        for t in range(L - 1, -1, -1):
            vp = vh[t]
            Ht = H[t]
            for p in range(counts[t]):
                mode = M[t, p]
                if mode == 1:
                    continue
                i = I[t, p]
                j = J[t, p]
                a = 0.0
                b = 1.0
                if mode == -1:
                    a = _f(vp[j] - vp[i], code, beta, lam)
                    b = _f(vp[i] - vp[j], code, beta, lam)
                da = (gv[i] - gv[j]) * (vp[i] - vp[j])
                for k in range(span_lo[t, p], span_hi[t, p]):
                    gi = G[i, k]
                    gj = G[j, k]
                    da += (gi - gj) * (Ht[i, k] - Ht[j, k])
                    G[i, k] = a * gi + b * gj
                    G[j, k] = b * gi + a * gj
                gvi = gv[i]
                gvj = gv[j]
                gv[i] = a * gvi + b * gvj
                gv[j] = b * gvi + a * gvj
                if mode == -1:
                    dd = da * _df(vp[j] - vp[i], code, beta, lam)
                    gv[j] += dd
                    gv[i] -= dd
        for k in range(R):
            grad[r, k] = gv[k]
    return grad


def _kernel_args(net: SortingNetwork, family: RelaxFamily):
    I, J, M = _network_arrays(net)
    counts = np.array([len(layer) for layer in net.layers], dtype=np.int64)
    return I, J, M, counts, net.padded_length, family.code, float(family.steepness), float(family.lam)


def _fwd_soft_sort(values, net, family):
    if values.ndim != 2 or values.shape[1] != net.length:
        raise ad.ShapeError(f"soft_sort: rows of length {net.length} expected, got {values.shape}")
    perms, _ = _forward_kernel(np.ascontiguousarray(values), *_kernel_args(net, family))
    return perms, None


def _vjp_soft_sort(g, saved, values, net, family):
    g = np.ascontiguousarray(g, dtype=values.dtype)
    return (_backward_kernel(np.ascontiguousarray(values), g, *_kernel_args(net, family)),)


ad.register("soft_sort_perm", _fwd_soft_sort, _vjp_soft_sort)


@dataclass
class RelaxedSortResult:
    sorted_values: Tensor
    perm: Tensor


def soft_sort_rows(values: Tensor, network: SortingNetwork, family: RelaxFamily) -> RelaxedSortResult:
    """Relaxed sort of every row of an ``n x R`` tensor.

    Returns sorted rows (``n x R``) and relaxed permutations (``n x R x R``).
    """
    values = ad.as_tensor(values)
    perm = ad.apply_primitive("soft_sort_perm", values, net=network, family=family)
    n, R = values.shape
    sorted_values = ad.reshape(ad.matmul(perm, ad.reshape(values, (n, R, 1))), (n, R))
    return RelaxedSortResult(sorted_values, perm)


def soft_sort(values: Tensor, network: SortingNetwork, family: RelaxFamily) -> RelaxedSortResult:
    """Relaxed sort of a single length-R row."""
    values = ad.as_tensor(values)
    if values.ndim != 1 or values.shape[0] != network.length:
        raise ad.ShapeError(f"soft_sort: length {network.length} expected, got shape {values.shape}")
    res = soft_sort_rows(ad.reshape(values, (1, network.length)), network, family)
    R = network.length
    return RelaxedSortResult(ad.reshape(res.sorted_values, (R,)), ad.reshape(res.perm, (R, R)))


# --------------------------------------------------------------------------
# explicit-matrix reference path


def swap_layer(values: Tensor, layer, family: RelaxFamily, modes=None):
    """One relaxed compare-exchange layer as an explicit matrix.

    Returns ``(P @ values, P)`` where ``P`` is identity except on the pair
    entries: ``P_ii = P_jj = f(d_j - d_i)`` and ``P_ij = P_ji = 1 - P_ii``.
    """
    values = ad.as_tensor(values)
    R = values.shape[0]
    layer = list(layer)
    modes = [SOFT] * len(layer) if modes is None else list(modes)
    seen = set()
    for i, j in layer:
        if not (0 <= i < j < R):
            raise IndexError(f"swap_layer: pair ({i}, {j}) out of range for length {R}")
        if i in seen or j in seen:
            raise ValueError(f"swap_layer: pairs overlap at ({i}, {j})")
        seen.update((i, j))

    dtype = values.dtype
    base = np.eye(R, dtype=dtype)
    soft = [(i, j) for (i, j), m in zip(layer, modes) if m == SOFT]
    for (i, j), m in zip(layer, modes):
        if m == EXCHANGE:
            base[[i, j], [i, j]] = 0.0
            base[i, j] = base[j, i] = 1.0
    if not soft:
        P = Tensor(base)
        return ad.matmul(P, values), P

    m = len(soft)
    gi = np.zeros((m, R), dtype=dtype)
    gj = np.zeros((m, R), dtype=dtype)
    for p, (i, j) in enumerate(soft):
        gi[p, i] = 1.0
        gj[p, j] = 1.0
        base[i, i] = base[j, j] = 0.0
    d = ad.matmul(Tensor(gj - gi), values)  # d_j - d_i per pair
    a = relax(d, family)
    b = relax(ad.neg(d), family)
    # P = base + sum_p a_p (e_i e_i' + e_j e_j') + b_p (e_i e_j' + e_j e_i')
    ones = Tensor(np.ones((R, 1), dtype=dtype))
    rep_a = ad.matmul(ones, ad.reshape(a, (1, m)))
    rep_b = ad.matmul(ones, ad.reshape(b, (1, m)))
    Ui, Uj = Tensor(gi.T.copy()), Tensor(gj.T.copy())
    diag = ad.add(ad.matmul(ad.mul(Ui, rep_a), Tensor(gi)), ad.matmul(ad.mul(Uj, rep_a), Tensor(gj)))
    off = ad.add(ad.matmul(ad.mul(Ui, rep_b), Tensor(gj)), ad.matmul(ad.mul(Uj, rep_b), Tensor(gi)))
    P = ad.add(Tensor(base), ad.add(diag, off))
    return ad.matmul(P, values), P


def soft_sort_reference(values: Tensor, network: SortingNetwork, family: RelaxFamily) -> RelaxedSortResult:
    """Same result as :func:`soft_sort`, built from explicit layer matrices."""
    values = ad.as_tensor(values)
    R, Rp = network.length, network.padded_length
    if values.shape != (R,):
        raise ad.ShapeError(f"soft_sort_reference: length {R} expected, got shape {values.shape}")
    v = values
    if Rp > R:
        big = 2.0 * float(np.max(np.abs(values.data))) + 1.0
        v = ad.concat([values, Tensor(np.full(Rp - R, big, dtype=values.dtype))])
    Q = Tensor(np.eye(Rp, dtype=values.dtype))
    for layer, modes in zip(network.layers, network.modes):
        v, P = swap_layer(v, layer, family, modes)
        Q = ad.matmul(P, Q)
    if Rp > R:
        Q = ad.transpose(ad.gather_rows(ad.transpose(ad.gather_rows(Q, np.arange(R))), np.arange(R)))
    return RelaxedSortResult(ad.matmul(Q, values), Q)
