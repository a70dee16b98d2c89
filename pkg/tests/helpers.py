"""Test helpers that drive the package itself (unlike the standalone oracles)."""

import copy

from zamba import tensor as tn
from zamba.attention import gsa_forward
from zamba.ssm import mamba_block_forward


def site_isolated_grads(model, tokens):
    """Forward where each site uses its own deep copy of the shared block; returns per-copy grads."""
    eps = model.config.norm_eps
    replicas = {j: copy.deepcopy(model.gsa) for j in range(len(model.sites))}
    for rep in replicas.values():
        for p in rep.named_parameters().values():
            p.grad = None
    x = tn.embedding(tokens[:, :-1], model.embed)
    x0 = x
    for i, layer in enumerate(model.layers):
        inp = x
        site = model.site_of_layer.get(i)
        if site is not None:
            inp = tn.add(x, gsa_forward(replicas[site], model.sites, site, x, x0))
        x = tn.add(x, mamba_block_forward(layer, tn.rmsnorm(inp, model.norms[i], eps)))
    logits = tn.matmul(tn.rmsnorm(x, model.final_norm, eps), model.head)
    tn.backward(tn.cross_entropy(logits, tokens[:, 1:]))
    return [rep.named_parameters() for rep in replicas.values()]
