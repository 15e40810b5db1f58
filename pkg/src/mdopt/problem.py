"""Adapters that expose a dataset (or any per-domain objective) to the strategies.

A problem answers three questions: how many domains there are, how to draw
minibatches for a domain, and what the loss/gradient of a batch is.  Strategies
never look inside a batch, so the same code runs on the neural CTR model and on
the analytic quadratic domains used by the diagnostics.
"""

import numpy as np

from . import nn
from .errors import DataError, DivergenceError


def _permuted_slices(n_rows, n_batches, batch_size, rng):
    """Index arrays for ``n_batches`` consecutive minibatches of a shuffled pass.

    A fresh permutation is drawn whenever the previous one is exhausted.
    """
    out = []
    perm = rng.permutation(n_rows)
    pos = 0
    for _ in range(n_batches):
        if pos >= n_rows:
            perm = rng.permutation(n_rows)
            pos = 0
        out.append(perm[pos : pos + batch_size])
        pos += batch_size
    return out


class DomainProblem:
    """Training rows of a :class:`~mdopt.data.MultiDomainDataset` for one split.

    ``grad_evals`` counts every gradient evaluation, which is how the
    complexity checks are instrumented.
    """

    def __init__(self, spec, dataset, split="train"):
        self.spec = spec
        self.n_domains = dataset.n_domains
        self._rows = []
        for dom in dataset.domains:
            idx = dom.indices(split)
            self._rows.append((dom.users[idx], dom.items[idx], dom.labels[idx].astype(np.float64)))
        self.grad_evals = 0

    def n_rows(self, domain):
        return len(self._rows[domain][2])

    def _batch(self, domain, idx):
        u, v, y = self._rows[domain]
        return nn.Batch(u[idx], v[idx], y[idx])

    def batches(self, domain, rng, n_batches, batch_size):
        n = self.n_rows(domain)
        if n == 0:
            raise DataError(f"domain {domain} has no rows in this split")
        return [self._batch(domain, idx) for idx in _permuted_slices(n, n_batches, batch_size, rng)]

    def full_batch(self, domain):
        return self._batch(domain, np.arange(self.n_rows(domain)))

    def union_batches(self, rng, batch_size):
        """One shuffled pass over all domains' rows, domain tags attached."""
        u = np.concatenate([r[0] for r in self._rows])
        v = np.concatenate([r[1] for r in self._rows])
        y = np.concatenate([r[2] for r in self._rows])
        dom = np.concatenate([np.full(len(r[2]), d) for d, r in enumerate(self._rows)])
        perm = rng.permutation(len(y))
        return [
            nn.Batch(u[idx], v[idx], y[idx], dom[idx])
            for idx in (perm[i : i + batch_size] for i in range(0, len(y), batch_size))
        ]

    def loss_and_grad(self, params, batch, sample_weight=None):
        self.grad_evals += 1
        return nn.loss_and_grad(self.spec, params, batch, sample_weight)

    def sample_losses(self, params, batch):
        logits, _, _ = nn._forward(self.spec, params, batch)
        return np.logaddexp(0.0, logits) - batch.labels * logits

    def zero_params(self):
        return nn.ParamVector.zeros(self.spec.layout)


def domain_grad(problem, params, batch, domain=None, sample_weight=None):
    """``problem.loss_and_grad`` with the domain id attached to divergence errors."""
    try:
        if sample_weight is None:
            return problem.loss_and_grad(params, batch)
        return problem.loss_and_grad(params, batch, sample_weight)
    except DivergenceError as exc:
        if exc.domain is None and domain is not None:
            raise DivergenceError(str(exc), domain=domain) from exc
        raise
