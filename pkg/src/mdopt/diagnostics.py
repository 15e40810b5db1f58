"""Gradient-conflict measurements and analytic checks of the DN/DR expansions.

Quadratic domains ``L(theta) = 1/2 (theta - c)^T A (theta - c)`` have a constant
Hessian, so the second-order identities behind Domain Negotiation and Domain
Regularization can be checked against closed forms to roundoff.
"""

import csv
import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import MdoptError
from .nn import Layout, ParamVector
from .problem import DomainProblem
from .strategies import MdrState, TrainConfig, dr_update, inner_loop, run_epoch


@dataclass(frozen=True)
class QuadDomain:
    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if A.shape != (len(c), len(c)):
            raise ValueError("A must be square and match c")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ValueError("A must be positive definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    @classmethod
    def random(cls, dim, rng, eig_range=(0.5, 2.0)):
        """Random SPD Hessian ``Q diag(lambda) Q^T`` and a standard-normal center."""
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        lam = rng.uniform(*eig_range, size=dim)
        A = (q * lam) @ q.T
        return cls((A + A.T) / 2.0, rng.normal(size=dim))

    def loss(self, theta):
        r = theta - self.c
        return 0.5 * float(r @ self.A @ r)

    def grad(self, theta):
        return self.A @ (theta - self.c)


class QuadraticProblem:
    """Quadratic domains behind the problem interface; a batch is just the domain id."""

    def __init__(self, domains):
        self.domains = list(domains)
        self.n_domains = len(self.domains)
        self.layout = Layout.flat(len(self.domains[0].c))
        self.grad_evals = 0

    def batches(self, domain, rng, n_batches, batch_size):
        return [domain] * n_batches

    def loss_and_grad(self, params, batch):
        self.grad_evals += 1
        q = self.domains[batch]
        return q.loss(params.values), ParamVector(q.grad(params.values), params.layout)

    def vector(self, values):
        return ParamVector(np.array(values, dtype=np.float64), self.layout)


def _relative(actual, predicted):
    denom = np.linalg.norm(actual)
    err = np.linalg.norm(actual - predicted)
    return float(err / denom) if denom > 0 else float(err)


def dn_predicted_delta(domains, theta0, alpha):
    """``-alpha (sum_i g_i - alpha sum_i sum_{j<i} H_i g_j)`` at ``theta0``, visiting in list order."""
    gbar = [q.grad(theta0) for q in domains]
    cross = np.zeros_like(theta0)
    for i, q in enumerate(domains):
        for j in range(i):
            cross += q.A @ gbar[j]
    return -alpha * (np.sum(gbar, axis=0) - alpha * cross)


def _quad_inner_delta(domains, theta0, alpha):
    problem = QuadraticProblem(domains)
    cfg = TrainConfig(alpha=alpha, inner_steps_per_domain=1, strategy="dn")
    theta = problem.vector(theta0)
    end = inner_loop(theta, problem, range(len(domains)), cfg, np.random.default_rng(0))
    return end.values - theta0


def dn_taylor_residual(domains, theta0, alpha):
    """Relative gap between the real DN inner-loop delta and its second-order prediction."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    actual = _quad_inner_delta(domains, theta0, alpha)
    return _relative(actual, dn_predicted_delta(domains, theta0, alpha))


def dn_exact_delta(domains, theta0, alpha):
    """All-order closed form of the inner-loop delta on quadratics.

    ``g_i = gbar_i - alpha H_i sum_{j<i} g_j`` holds exactly for quadratics, so
    the recursion (unlike the truncated prediction) has no remainder.
    """
    gs = []
    for q in domains:
        g = q.grad(theta0)
        if gs:
            g = g - alpha * q.A @ np.sum(gs, axis=0)
        gs.append(g)
    return -alpha * np.sum(gs, axis=0)


def neural_taylor_residual(spec, params, batches, alpha, hvp_eps=1e-4):
    """The same residual for the neural model, one fixed batch per domain.

    Hessian-vector products come from central finite differences.
    """

    def grad(p, b):
        return nn.loss_and_grad(spec, p, b)[1]

    gbar = [grad(params, b) for b in batches]
    theta = params
    for b in batches:
        theta = theta.axpy(-alpha, grad(theta, b))
    actual = theta - params
    cross = params.zeros_like()
    for i, b in enumerate(batches):
        for j in range(i):
            cross = cross + nn.hvp(spec, params, b, gbar[j], hvp_eps)
    total = params.zeros_like()
    for g in gbar:
        total = total + g
    predicted = (total - cross * alpha) * (-alpha)
    return _relative(actual.values, predicted.values)


def innergrad_expectation_check(d1, d2, theta0, alpha=0.5, fd_step=1.0):
    """Max abs gap between the order-averaged second-order DN term and half the
    gradient of the inner product of the two domain gradients.

    The left side is read off real inner loops in both visit orders:
    ``(delta + alpha (g1 + g2)) / alpha^2 = H_second g_first``.  The right side is
    a central finite difference of ``<g1(theta), g2(theta)>``, exact for the
    quadratic it differentiates.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    first = alpha * (d1.grad(theta0) + d2.grad(theta0))
    h2g1 = (_quad_inner_delta([d1, d2], theta0, alpha) + first) / alpha**2
    h1g2 = (_quad_inner_delta([d2, d1], theta0, alpha) + first) / alpha**2
    lhs = 0.5 * (h1g2 + h2g1)
    rhs = 0.5 * innergrad_reference(d1, d2, theta0, fd_step)
    return float(np.max(np.abs(lhs - rhs)))


def innergrad_reference(d1, d2, theta0, fd_step=1.0):
    """Central-difference gradient of ``<g1, g2>`` at ``theta0``."""
    dim = len(theta0)
    out = np.empty(dim)
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = fd_step
        plus = d1.grad(theta0 + e) @ d2.grad(theta0 + e)
        minus = d1.grad(theta0 - e) @ d2.grad(theta0 - e)
        out[k] = (plus - minus) / (2.0 * fd_step)
    return out


def dr_predicted_delta(d_target, d_aux, theta0, alpha):
    gi = d_target.grad(theta0)
    gj = d_aux.grad(theta0)
    return -alpha * (gj + gi - alpha * d_target.A @ gj)


def dr_identity_check(d_target, d_aux, theta0, alpha):
    """Relative gap between a real DR two-step delta and its closed form."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    problem = QuadraticProblem([d_target, d_aux])
    zero = problem.vector(np.zeros_like(theta0))
    state = MdrState(zero, (problem.vector(theta0), zero.copy()))
    cfg = TrainConfig(alpha=alpha, gamma=1.0, k=1, strategy="mamdr")
    new = dr_update(state, 0, problem, cfg, np.random.default_rng(0))
    actual = new.values - theta0
    return _relative(actual, dr_predicted_delta(d_target, d_aux, theta0, alpha))


# -- conflict measurement on the neural model ----------------------------------


@dataclass
class GradientReport:
    grads: list
    inner: np.ndarray
    cosine: np.ndarray
    conflict_rate: float

    @classmethod
    def from_grads(cls, grads):
        if len(grads) < 2:
            raise MdoptError("conflict measurement needs at least 2 domains")
        G = np.stack([g.values if isinstance(g, ParamVector) else np.asarray(g, float) for g in grads])
        inner = G @ G.T
        inner = (inner + inner.T) / 2.0
        norms = np.sqrt(np.diag(inner))
        with np.errstate(invalid="ignore", divide="ignore"):
            cosine = inner / np.outer(norms, norms)
        cosine = np.where(np.outer(norms, norms) > 0, cosine, 0.0)
        iu = np.triu_indices(len(grads), 1)
        rate = float(np.mean(inner[iu] < 0))
        return cls(list(grads), inner, cosine, rate)

    @property
    def mean_cosine(self):
        iu = np.triu_indices(len(self.grads), 1)
        return float(np.mean(self.cosine[iu]))

    def pair_rows(self, epoch=0):
        n = len(self.grads)
        for i, j in itertools.combinations(range(n), 2):
            yield {"epoch": epoch, "pair_i": i, "pair_j": j, "inner": float(self.inner[i, j]), "cosine": float(self.cosine[i, j])}


def probe_batches(dataset, batch_size=None, batch_seed=0, split="train"):
    """One fixed batch per domain; ``batch_size=None`` takes the whole split.

    Every domain uses the same index draw.
    """
    out = []
    for dom in dataset.domains:
        idx = dom.indices(split)
        if len(idx) == 0:
            raise MdoptError(f"domain {dom.domain_id} has no {split} rows")
        take = idx
        if batch_size is not None:
            rng = np.random.default_rng(batch_seed)
            take = idx[rng.permutation(len(idx))[:batch_size]]
        out.append(nn.Batch(dom.users[take], dom.items[take], dom.labels[take]))
    return out


def measure_conflict(spec, params, dataset, batch_seed=0, batch_size=None, batches=None):
    """Per-domain gradients of ``params`` on fixed probe batches, and their pairwise geometry."""
    if dataset is not None and dataset.n_domains < 2:
        raise MdoptError("conflict measurement needs at least 2 domains")
    batches = batches or probe_batches(dataset, batch_size, batch_seed)
    grads = [nn.loss_and_grad(spec, params, b)[1] for b in batches]
    return GradientReport.from_grads(grads)


def track_inner_products(strategy, dataset, cfg, epochs, spec, probe_seed=0, probe_size=None, state=None):
    """Mean pairwise cosine of per-domain gradients of the shared vector, per epoch.

    Probe batches are drawn once, so the series reflects parameter movement.
    """
    cfg = replace(cfg, strategy=strategy)
    problem = DomainProblem(spec, dataset)
    state = state or MdrState.initial(spec, dataset.n_domains, cfg.seed)
    probes = probe_batches(dataset, probe_size, probe_seed)
    series, reports = [], []
    for epoch in range(epochs):
        state = run_epoch(state, problem, cfg, epoch)
        rep = measure_conflict(spec, state.shared, None, batches=probes)
        series.append(rep.mean_cosine)
        reports.append(rep)
    return series, reports, state


def write_pair_csv(reports, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ["epoch", "pair_i", "pair_j", "inner", "cosine"], lineterminator="\n")
        writer.writeheader()
        for epoch, rep in enumerate(reports):
            for row in rep.pair_rows(epoch):
                writer.writerow(row)


def write_summary(path, conflict_rate, mean_cosine, taylor_residual, **extra):
    payload = {"conflict_rate": conflict_rate, "mean_cosine": mean_cosine, "taylor_residual": taylor_residual}
    payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def quadratic_selftest(seed=0, dim=8):
    """Run every quadratic oracle; returns ``{check_name: residual}``."""
    rng = np.random.default_rng(seed)
    out = {}
    for n in (2, 3):
        doms = [QuadDomain.random(dim, rng) for _ in range(n)]
        theta0 = rng.normal(size=dim)
        for alpha in (1e-2, 1e-3):
            out[f"dn_taylor_n{n}_alpha{alpha:g}"] = dn_taylor_residual(doms, theta0, alpha)
            out[f"dn_exact_n{n}_alpha{alpha:g}"] = _relative(
                _quad_inner_delta(doms, theta0, alpha), dn_exact_delta(doms, theta0, alpha)
            )
    d1, d2 = QuadDomain.random(dim, rng), QuadDomain.random(dim, rng)
    theta0 = rng.normal(size=dim)
    out["innergrad"] = innergrad_expectation_check(d1, d2, theta0)
    for alpha in (1e-2, 1e-3):
        out[f"dr_identity_alpha{alpha:g}"] = dr_identity_check(d1, d2, theta0, alpha)
    return out
