"""AUC and per-domain / macro-averaged evaluation."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import MetricError

log = logging.getLogger(__name__)


def auc(scores, labels):
    """Rank-based ROC AUC; tied scores count one half.

    Uses the Mann-Whitney form with average ranks, O(m log m).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class MetricReport:
    per_domain_auc: dict
    macro_auc: float
    per_domain_loss: dict
    n_eval: dict
    skipped: list = field(default_factory=list)

    def rows(self):
        for d in sorted(self.n_eval):
            n_pos, n_neg = self.n_eval[d]
            yield {
                "domain_id": d,
                "n_pos": n_pos,
                "n_neg": n_neg,
                "auc": self.per_domain_auc.get(d, float("nan")),
                "loss": self.per_domain_loss[d],
            }

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, ["domain_id", "n_pos", "n_neg", "auc", "loss"], lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            fh.write(f"macro_auc,{self.macro_auc!r}\n")
        return path


def macro_average(per_domain_auc):
    if not per_domain_auc:
        raise MetricError("no domain could be evaluated")
    return float(np.mean([per_domain_auc[d] for d in sorted(per_domain_auc)]))


def evaluate(state, dataset, split="test", spec=None):
    """Per-domain AUC/loss of ``shared + specific[d]`` on one split.

    Single-class domains are skipped (and listed in ``skipped``) instead of
    failing the whole report.
    """
    spec = spec or state.spec
    per_auc, per_loss, n_eval, skipped = {}, {}, {}, []
    for dom in dataset.domains:
        idx = dom.indices(split)
        if len(idx) == 0:
            continue
        d = dom.domain_id
        batch = nn.Batch(dom.users[idx], dom.items[idx], dom.labels[idx])
        params = state.domain_params(d)
        scores = nn.forward(spec, params, batch)
        per_loss[d] = nn.loss(spec, params, batch)
        n_pos = int(dom.labels[idx].sum())
        n_eval[d] = (n_pos, len(idx) - n_pos)
        try:
            per_auc[d] = auc(scores, batch.labels)
        except MetricError:
            log.warning("domain %d skipped: single-class %s split", d, split)
            skipped.append(d)
    return MetricReport(per_auc, macro_average(per_auc), per_loss, n_eval, skipped)
