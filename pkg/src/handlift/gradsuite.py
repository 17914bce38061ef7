"""Finite-difference check of every training loss on a small window batch.

Each term is checked against the parameters that can reach it through the
tape; the total is checked against all of them.  Values the model detaches
(confidences, decoded joints fed to the graph, context-frame features, the
skeleton's rigid initialisation) are held at their unperturbed values, so
the probe differentiates the same function as the tape.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .model import HandLifter
from .synthetic import generate_dataset
from .train import gather_batch

TERMS = ("hmap", "hm2d", "nll", "proj2d", "total")
OWNERS = {
    "hmap": ("hm.",),
    "hm2d": ("hm.",),
    "nll": ("graph.", "flow."),
    "proj2d": ("pfe.", "stpt.", "skel."),
    "total": ("",),
}
# The total sits around 1e4 on the micro-batch, so a 1e-5 probe loses the
# small graph/flow entries to roundoff; much past 1e-4 it starts stepping
# across kNN neighbour switches.
STEPS = {"total": 1e-4}


def micro_batch(seed, views=2, T=3):
    """A 1-window batch and a small model whose zero-initialised weights are
    perturbed so that every path carries gradient."""
    ds = generate_dataset(1, T, seed=seed, n_views=views)
    cfg = TrainConfig(T=T, K=2, M=2, views=views, batch_size=1, d_point=8, seed=seed)
    model = HandLifter(cfg, flatten=ds.profile.flatten, template=ds.template)
    rng = np.random.default_rng([seed, 99])
    for _, p in model.store:
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.05, size=p.data.shape)
    batch = gather_batch(ds, [(0, T // 2)], T, np.arange(views))
    return model, batch, ds.rig.P


def check_losses(seed, terms=TERMS, max_entries=3, tolerance=1e-4, views=2, T=3):
    """{term: grad_check report} for one seed."""
    model, batch, P = micro_batch(seed, views, T)
    out = {}
    for term in terms:
        def loss(_store, term=term):
            total, parts, _ = model.forward_train(batch, P, np.random.default_rng([seed, 7]))
            return total if term == "total" else parts[term]
        names = [n for n, _ in model.store if n.startswith(OWNERS[term])]
        out[term] = ad.grad_check(loss, model.store, step=STEPS.get(term, 1e-5),
                                  tolerance=tolerance, names=names,
                                  max_entries=max_entries, rng=np.random.default_rng(seed))
    return out
