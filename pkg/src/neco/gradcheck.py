"""Finite-difference checks over every differentiable component (64-bit)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .loss import LossConfig, ReferenceSet, cross_entropy_perm, neco_loss
from .seeds import rng_for
from .sortnet import RelaxFamily, build_network, relax, soft_sort, swap_layer
from .views import roi_align

TOLERANCE = 1e-5
EPS = 1e-6


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, Tensor(w)))


def _doubly_stochastic(rng, R, sweeps=50):
    M = rng.uniform(0.05, 1.0, (R, R))
    for _ in range(sweeps):
        M /= M.sum(0, keepdims=True)
        M /= M.sum(1, keepdims=True)
    return M


def component_checks(seed: int = 0, sizes=(2, 4, 8, 16)):
    """Yield ``(component, fn, point)`` triples; ``fn`` maps the point to a scalar."""
    fams = (RelaxFamily("arctan", 100.0), RelaxFamily("logistic", 100.0, 0.25))

    def draw(tag, *shape):
        return rng_for(seed, "gradcheck", tag, *shape).uniform(-2, 2, shape)

    for fam in fams:
        w = draw(f"relax-w-{fam.kind}", 6)
        yield f"relax_fn[{fam.kind}]", (lambda x, fam=fam, w=w: _weighted(relax(x, fam), w)), draw(f"relax-{fam.kind}", 6)

    for R in sizes:
        layer = [(i, i + 1) for i in range(0, R - 1, 2)]
        for fam in fams:
            wv = draw("swap-wv", R)
            wp = draw("swap-wp", R, R)

            def swap_fn(x, layer=layer, fam=fam, wv=wv, wp=wp):
                v, P = swap_layer(x, layer, fam)
                return ad.add(_weighted(v, wv), _weighted(P, wp))

            yield f"swap_layer[R={R},{fam.kind}]", swap_fn, draw(f"swap-{R}", R)

    for kind in ("odd_even", "bitonic"):
        for R in sizes:
            net = build_network(kind, R)
            for fam in fams:
                wp = draw("sort-wp", R, R)
                ws = draw("sort-ws", R)

                def sort_fn(x, net=net, fam=fam, wp=wp, ws=ws):
                    res = soft_sort(x, net, fam)
                    return ad.add(_weighted(res.perm, wp), _weighted(res.sorted_values, ws))

                yield f"soft_sort[{kind},R={R},{fam.kind}]", sort_fn, draw(f"sort-{kind}-{R}", R)

    w = draw("roi-w", 49, 3)
    yield "roi_align[8x8->7x7]", (lambda t, w=w: _weighted(roi_align(t, (8, 8), (0.2, 0.1, 0.9, 0.75), out=7), w)), draw("roi", 64, 3)

    R = 4
    Qt = _doubly_stochastic(rng_for(seed, "gradcheck", "ce-t"), R)
    Qs = _doubly_stochastic(rng_for(seed, "gradcheck", "ce-s"), R)
    yield "cross_entropy_perm", (lambda q, Qt=Qt: cross_entropy_perm(Tensor(Qt), q)), Qs

    for fam in fams:
        for kind in ("bitonic", "odd_even", "none"):
            for top_k in (None, 3):
                cfg = LossConfig(network_kind=kind, top_k=top_k, num_references=6,
                                 relax_kind=fam.kind, relax_lambda=fam.lam)
                refs = ReferenceSet(Tensor(draw("refs", 6, 5)), np.zeros((6, 2), dtype=int), "inter")
                F_t = draw("ft", 4, 5)
                name = f"neco_loss[{kind},top_k={top_k or 'all'},{fam.kind}]"
                fn = lambda f, cfg=cfg, refs=refs, F_t=F_t: neco_loss(f, Tensor(F_t), refs, cfg)
                yield name, fn, draw("fs", 4, 5)


def run_gradcheck(seed: int = 0, sizes=(2, 4, 8, 16), instances: int = 10) -> list:
    """One row per component: the worst relative error over ``instances`` seeds."""
    worst: dict = {}
    for inst in range(instances):
        for name, fn, point in component_checks(seed * 1000 + inst, sizes):
            err = finite_difference_check(fn, Tensor(point), eps=EPS)
            worst[name] = max(worst.get(name, 0.0), err)
    return [{"component": k, "max_rel_err": v, "pass": bool(v <= TOLERANCE)} for k, v in worst.items()]
