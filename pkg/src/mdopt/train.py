"""Epoch loop with validation tracking, shared by the CLI, sweeps and the PS simulator."""

import logging
import time
from dataclasses import dataclass, field

from .metrics import evaluate
from .problem import DomainProblem
from .strategies import MdrState, finalize, run_epoch

log = logging.getLogger(__name__)


@dataclass
class FitResult:
    state: MdrState
    final_state: MdrState
    best_epoch: int
    history: list = field(default_factory=list)


def fit(dataset, spec, cfg, state=None, eval_split="val", on_epoch=None):
    """Train ``cfg.strategy`` for ``cfg.epochs`` epochs.

    Each epoch is followed by an evaluation on ``eval_split`` (skipped when
    ``eval_split`` is None).  With ``cfg.select_best`` the returned ``state`` is
    the epoch with the best macro AUC; ``final_state`` is always the last one.
    ``on_epoch(epoch, state)`` may return a dict merged into the history row.
    """
    cfg.check_domains(dataset.n_domains)
    problem = DomainProblem(spec, dataset)
    state = state or MdrState.initial(spec, dataset.n_domains, cfg.seed)
    best, best_auc, best_epoch = finalize(state, problem, cfg), float("-inf"), -1
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        evals_before = problem.grad_evals
        state = run_epoch(state, problem, cfg, epoch)
        row = {"epoch": epoch, "grad_evals": problem.grad_evals - evals_before}
        current = finalize(state, problem, cfg)
        if eval_split is not None:
            row["macro_auc"] = evaluate(current, dataset, eval_split).macro_auc
            if row["macro_auc"] > best_auc:
                best, best_auc, best_epoch = current, row["macro_auc"], epoch
        if on_epoch is not None:
            row.update(on_epoch(epoch, state) or {})
        row["seconds"] = time.perf_counter() - t0
        history.append(row)
        log.info("epoch %d %s", epoch, row)
    final = finalize(state, problem, cfg)
    if not cfg.select_best or eval_split is None or best_epoch < 0:
        best, best_epoch = final, cfg.epochs - 1
    return FitResult(best, final, best_epoch, history)
