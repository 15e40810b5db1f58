"""Multi-domain learning procedures over shared + domain-specific parameters.

Every procedure is written against the problem interface in
:mod:`mdopt.problem`, returns new parameter vectors and never mutates its
inputs.  Optimizer moments (when Adam is selected) travel inside
``MdrState.aux`` so that an epoch is a pure function of its inputs.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .nn import Layout, ParamVector, combine, init_params
from .optim import Stepper, outer_step
from .problem import domain_grad

STRATEGIES = (
    "joint",
    "finetune",
    "alternate",
    "dn",
    "mamdr",
    "weighted_loss",
    "pcgrad",
    "reptile",
    "fomaml",
    "mldg",
)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-3
    beta: float = 0.1
    gamma: float = 0.1
    k: int = 5
    epochs: int = 10
    batch_size: int = 256
    inner_steps_per_domain: int = 1
    seed: int = 0
    strategy: str = "mamdr"
    optimizer: str = "sgd"
    finetune_epochs: int = 1
    mldg_beta: float = 1.0
    select_best: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must be in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.inner_steps_per_domain < 1:
            raise ConfigError("batch_size and inner_steps_per_domain must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.mldg_beta < 0:
            raise ConfigError("mldg_beta must be >= 0")

    def check_domains(self, n_domains):
        if self.strategy == "mamdr" and not 1 <= self.k <= n_domains - 1:
            raise ConfigError(f"k={self.k} must lie in [1, n-1] for n={n_domains} domains")
        if self.strategy in ("pcgrad", "mldg") and n_domains < 2:
            raise ConfigError(f"{self.strategy} needs at least 2 domains")


@dataclass(frozen=True)
class MdrState:
    shared: ParamVector
    specific: tuple
    spec: object = None
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "specific", tuple(self.specific))
        for s in self.specific:
            self.shared._check(s)

    @classmethod
    def initial(cls, spec, n_domains, seed=None):
        shared = init_params(spec, seed)
        return cls(shared, tuple(shared.zeros_like() for _ in range(n_domains)), spec)

    @property
    def n_domains(self):
        return len(self.specific)

    def domain_params(self, i):
        return combine(self.shared, self.specific[i])

    def params(self):
        """All parameter vectors, shared first."""
        return (self.shared, *self.specific)


FINETUNE_STREAM = 1_000_000


def epoch_rng(seed, epoch, stream=0):
    return np.random.default_rng([int(seed), int(stream), int(epoch)])


def _stepper(cfg, aux, key, lr=None):
    s = Stepper(cfg.optimizer, cfg.alpha if lr is None else lr)
    s.state = aux.get(key)
    return s


def _store(aux, key, stepper):
    if stepper.state is not None:
        aux[key] = stepper.state


def _sgd(cfg):
    return Stepper("sgd", cfg.alpha)


# -- Domain Negotiation -----------------------------------------------------


def inner_loop(theta, problem, order, cfg, rng, stepper=None):
    """Sequential per-domain descent in ``order``; returns the endpoint."""
    stepper = stepper or _sgd(cfg)
    for d in order:
        for batch in problem.batches(int(d), rng, cfg.inner_steps_per_domain, cfg.batch_size):
            _, g = domain_grad(problem, theta, batch, int(d))
            theta = stepper.step(theta, g)
    return theta


def dn_epoch(shared, problem, cfg, rng, stepper=None):
    """One Domain Negotiation epoch: shuffled inner pass, then interpolate by beta."""
    order = rng.permutation(problem.n_domains)
    endpoint = inner_loop(shared, problem, order, cfg, rng, stepper)
    return outer_step(shared, endpoint, cfg.beta)


def alternate_epoch(shared, problem, cfg, rng, stepper=None):
    """Alternate training: the shuffled sequential pass, endpoint adopted as is."""
    stepper = stepper or _sgd(cfg)
    theta = shared
    for d in rng.permutation(problem.n_domains):
        for batch in problem.batches(int(d), rng, cfg.inner_steps_per_domain, cfg.batch_size):
            _, g = domain_grad(problem, theta, batch, int(d))
            theta = stepper.step(theta, g)
    return theta


# -- Domain Regularization --------------------------------------------------


def dr_pair_endpoint(shared, specific, target, aux_domain, problem, cfg, rng, stepper=None):
    """Two steps on ``specific``: auxiliary domain first, then the target domain."""
    stepper = stepper or _sgd(cfg)
    theta = specific
    for d in (aux_domain, target):
        for batch in problem.batches(d, rng, 1, cfg.batch_size):
            _, g = domain_grad(problem, combine(shared, theta), batch, d)
            theta = stepper.step(theta, g)
    return theta


def dr_update(state, target, problem, cfg, rng, stepper=None):
    """Domain Regularization for domain ``target``; returns its new specific vector.

    ``k`` auxiliary domains are sampled without replacement from the other
    domains.  The shared parameters stay frozen.
    """
    n = state.n_domains
    if n < 2:
        raise ConfigError("domain regularization needs at least 2 domains")
    if cfg.k > n - 1:
        raise ConfigError(f"k={cfg.k} exceeds the {n - 1} available auxiliary domains")
    others = np.array([j for j in range(n) if j != target])
    sampled = rng.choice(others, size=cfg.k, replace=False)
    theta = state.specific[target]
    for j in sampled:
        endpoint = dr_pair_endpoint(state.shared, theta, target, int(j), problem, cfg, rng, stepper)
        theta = outer_step(theta, endpoint, cfg.gamma)
    return theta


def mamdr_epoch(state, problem, cfg, epoch, stream=0):
    """DN on the shared vector, then DR for every domain's specific vector."""
    rng = epoch_rng(cfg.seed, epoch, stream)
    aux = dict(state.aux)
    st = _stepper(cfg, aux, "opt.shared")
    shared = dn_epoch(state.shared, problem, cfg, rng, st)
    _store(aux, "opt.shared", st)
    state = replace(state, shared=shared)
    specific = []
    for i in range(state.n_domains):
        st = _stepper(cfg, aux, f"opt.specific.{i}")
        specific.append(dr_update(state, i, problem, cfg, rng, st))
        _store(aux, f"opt.specific.{i}", st)
    return replace(state, specific=tuple(specific), aux=aux)


def mamdr_train(state, problem, cfg):
    cfg.check_domains(state.n_domains)
    for epoch in range(cfg.epochs):
        state = mamdr_epoch(state, problem, cfg, epoch)
    return state


# -- baselines ----------------------------------------------------------------


def joint_epoch(shared, problem, cfg, rng, stepper=None):
    """Minibatch descent over the union of all domains, domain tags ignored."""
    stepper = stepper or _sgd(cfg)
    for batch in problem.union_batches(rng, cfg.batch_size):
        _, g = domain_grad(problem, shared, batch)
        shared = stepper.step(shared, g)
    return shared


def finetune(shared, problem, cfg, rng, epochs=None, steppers=None):
    """Per-domain copies of ``shared`` trained on their own domain only."""
    epochs = cfg.finetune_epochs if epochs is None else epochs
    out = []
    for d in range(problem.n_domains):
        stepper = steppers[d] if steppers else Stepper(cfg.optimizer, cfg.alpha)
        theta = shared.copy()
        n_batches = math.ceil(problem.n_rows(d) / cfg.batch_size)
        for _ in range(epochs):
            for batch in problem.batches(d, rng, n_batches, cfg.batch_size):
                _, g = domain_grad(problem, theta, batch, d)
                theta = stepper.step(theta, g)
        out.append(theta)
    return out


def log_variance_layout(n_domains):
    return Layout.flat(n_domains, "log_var")


def weighted_objective(problem, shared, log_var, batch):
    """``mean_x exp(-s_d(x)) l(x) + sum_i (B_i / B) s_i`` for one tagged batch."""
    s = log_var.values
    losses = problem.sample_losses(shared, batch)
    w = np.exp(-s[batch.domain_ids])
    frac = np.bincount(batch.domain_ids, minlength=len(s)) / len(batch)
    return float((w * losses).sum() / len(batch) + frac @ s)


def log_variance_grad(problem, shared, log_var, batch):
    """Exact gradient of :func:`weighted_objective` with respect to ``s``."""
    s = log_var.values
    n = len(s)
    losses = problem.sample_losses(shared, batch)
    counts = np.bincount(batch.domain_ids, minlength=n)
    sums = np.bincount(batch.domain_ids, weights=losses, minlength=n)
    # per domain: (B_i / B) * (-exp(-s_i) * L_i + 1) with L_i the domain mean loss
    g = (-np.exp(-s) * sums + counts) / len(batch)
    return ParamVector(g, log_var.layout)


def weighted_loss_epoch(shared, log_var, problem, cfg, rng, stepper=None, s_stepper=None, learn_s=True):
    """Joint training with learned per-domain loss weights ``exp(-s_i)``."""
    stepper = stepper or _sgd(cfg)
    s_stepper = s_stepper or _sgd(cfg)
    for batch in problem.union_batches(rng, cfg.batch_size):
        w = np.exp(-log_var.values[batch.domain_ids])
        _, g = domain_grad(problem, shared, batch, sample_weight=w)
        if learn_s:
            gs = log_variance_grad(problem, shared, log_var, batch)
            log_var = s_stepper.step(log_var, gs)
        shared = stepper.step(shared, g)
    return shared, log_var


def pcgrad_project(grads, rng):
    """Project each gradient off the others it conflicts with (random order).

    Projections are taken against the original, unprojected gradients.  A zero
    gradient is never projected onto.
    """
    out = []
    n = len(grads)
    for i in range(n):
        g = grads[i].values.copy()
        others = [j for j in range(n) if j != i]
        for j in rng.permutation(others) if others else []:
            gj = grads[j].values
            denom = gj @ gj
            dot = g @ gj
            if dot < 0 and denom > 0:
                g -= (dot / denom) * gj
        out.append(ParamVector(g, grads[i].layout))
    return out


def pcgrad_step(shared, problem, cfg, rng, stepper=None):
    if problem.n_domains < 2:
        raise ConfigError("pcgrad needs at least 2 domains")
    stepper = stepper or _sgd(cfg)
    grads = []
    for d in range(problem.n_domains):
        batch = problem.batches(d, rng, 1, cfg.batch_size)[0]
        grads.append(domain_grad(problem, shared, batch, d)[1])
    projected = pcgrad_project(grads, rng)
    mean = ParamVector(np.mean([g.values for g in projected], axis=0), shared.layout)
    return stepper.step(shared, mean)


def pcgrad_epoch(shared, problem, cfg, rng, stepper=None):
    stepper = stepper or _sgd(cfg)
    for _ in range(cfg.inner_steps_per_domain):
        shared = pcgrad_step(shared, problem, cfg, rng, stepper)
    return shared


def reptile_epoch(shared, problem, cfg, rng, stepper=None):
    """Per domain (shuffled): inner descent on that domain alone, then interpolate."""
    for d in rng.permutation(problem.n_domains):
        endpoint = inner_loop(shared, problem, [d], cfg, rng, stepper)
        shared = outer_step(shared, endpoint, cfg.beta)
    return shared


def fomaml_outer_grad(shared, problem, domain, support, query, alpha):
    """Query gradient at the parameters adapted on ``support`` (first order)."""
    phi = shared
    for batch in support:
        _, g = domain_grad(problem, phi, batch, domain)
        phi = phi.axpy(-alpha, g)
    grads = [domain_grad(problem, phi, batch, domain)[1].values for batch in query]
    return ParamVector(np.mean(grads, axis=0), shared.layout)


def fomaml_epoch(shared, problem, cfg, rng, stepper=None):
    """First-order MAML with a 50/50 support/query split by batch parity."""
    outer = []
    for d in rng.permutation(problem.n_domains):
        d = int(d)
        if hasattr(problem, "n_rows") and problem.n_rows(d) <= cfg.batch_size:
            raise DataError(f"domain {d} has too few rows for a support and a query batch")
        batches = problem.batches(d, rng, 2 * cfg.inner_steps_per_domain, cfg.batch_size)
        outer.append(fomaml_outer_grad(shared, problem, d, batches[0::2], batches[1::2], cfg.alpha).values)
    g = ParamVector(np.mean(outer, axis=0), shared.layout)
    if stepper is None:
        stepper = Stepper("sgd", cfg.beta)
    return stepper.step(shared, g)


def mldg_split(n_domains, rng):
    if n_domains < 2:
        raise ConfigError("MLDG needs at least 2 domains")
    perm = rng.permutation(n_domains)
    n_test = math.ceil(n_domains / 3)
    return [int(d) for d in perm[n_test:]], [int(d) for d in perm[:n_test]]


def mldg_update(shared, problem, train_domains, test_domains, cfg, rng):
    """First-order MLDG direction ``g_train + beta_mldg * g_test(theta - alpha g_train)``."""
    g_tr = []
    for d in train_domains:
        batch = problem.batches(d, rng, 1, cfg.batch_size)[0]
        g_tr.append(domain_grad(problem, shared, batch, d)[1].values)
    g_tr = np.mean(g_tr, axis=0)
    update = g_tr
    if cfg.mldg_beta:
        adapted = ParamVector(shared.values - cfg.alpha * g_tr, shared.layout)
        g_te = []
        for d in test_domains:
            batch = problem.batches(d, rng, 1, cfg.batch_size)[0]
            g_te.append(domain_grad(problem, adapted, batch, d)[1].values)
        update = g_tr + cfg.mldg_beta * np.mean(g_te, axis=0)
    return ParamVector(update, shared.layout)


def mldg_epoch(shared, problem, cfg, rng, stepper=None):
    stepper = stepper or _sgd(cfg)
    train_d, test_d = mldg_split(problem.n_domains, rng)
    for _ in range(cfg.inner_steps_per_domain):
        shared = stepper.step(shared, mldg_update(shared, problem, train_d, test_d, cfg, rng))
    return shared


# -- dispatch -----------------------------------------------------------------


def _shared_only(fn):
    def run(state, problem, cfg, epoch, stream=0):
        rng = epoch_rng(cfg.seed, epoch, stream)
        aux = dict(state.aux)
        st = _stepper(cfg, aux, "opt.shared")
        shared = fn(state.shared, problem, cfg, rng, st)
        _store(aux, "opt.shared", st)
        return replace(state, shared=shared, aux=aux)

    return run


def _fomaml_run(state, problem, cfg, epoch, stream=0):
    rng = epoch_rng(cfg.seed, epoch, stream)
    aux = dict(state.aux)
    # the outer update is gradient-like: rate beta for SGD, alpha for Adam
    lr = cfg.beta if cfg.optimizer == "sgd" else cfg.alpha
    st = _stepper(cfg, aux, "opt.shared", lr=lr)
    shared = fomaml_epoch(state.shared, problem, cfg, rng, st)
    _store(aux, "opt.shared", st)
    return replace(state, shared=shared, aux=aux)


def _weighted_run(state, problem, cfg, epoch, stream=0):
    rng = epoch_rng(cfg.seed, epoch, stream)
    aux = dict(state.aux)
    log_var = aux.get("log_var", ParamVector.zeros(log_variance_layout(state.n_domains)))
    st = _stepper(cfg, aux, "opt.shared")
    s_st = _stepper(cfg, aux, "opt.log_var")
    shared, log_var = weighted_loss_epoch(state.shared, log_var, problem, cfg, rng, st, s_st)
    _store(aux, "opt.shared", st)
    _store(aux, "opt.log_var", s_st)
    aux["log_var"] = log_var
    return replace(state, shared=shared, aux=aux)


EPOCH_FNS = {
    "joint": _shared_only(joint_epoch),
    "finetune": _shared_only(joint_epoch),
    "alternate": _shared_only(alternate_epoch),
    "dn": _shared_only(dn_epoch),
    "mamdr": mamdr_epoch,
    "weighted_loss": _weighted_run,
    "pcgrad": _shared_only(pcgrad_epoch),
    "reptile": _shared_only(reptile_epoch),
    "fomaml": _fomaml_run,
    "mldg": _shared_only(mldg_epoch),
}


def run_epoch(state, problem, cfg, epoch, stream=0):
    """Advance ``state`` by one epoch of ``cfg.strategy``."""
    return EPOCH_FNS[cfg.strategy](state, problem, cfg, epoch, stream)


def finalize(state, problem, cfg):
    """Post-training step: joint+finetune turns its endpoints into specific vectors."""
    if cfg.strategy != "finetune":
        return state
    rng = epoch_rng(cfg.seed, cfg.epochs, stream=FINETUNE_STREAM)
    tuned = finetune(state.shared, problem, cfg, rng)
    return replace(state, specific=tuple(t - state.shared for t in tuned))
