"""Trial scoring and verification metrics: cosine scoring, EER, minDCF,
and a linear age probe for measuring residual age information.

Score files are written one trial per line as ``<label> <enroll> <test>
<score>``; result files are key-value text.
"""

import numpy as np
from dataclasses import dataclass

from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    eer: float  # percent
    eer_threshold: float
    min_dcf: float
    dcf_threshold: float
    p_target: float = 0.01
    c_fa: float = 1.0
    c_miss: float = 1.0

    def as_keyvalues(self):
        return {
            "eer_percent": self.eer,
            "eer_threshold": self.eer_threshold,
            "min_dcf": self.min_dcf,
            "dcf_threshold": self.dcf_threshold,
            "p_target": self.p_target,
            "c_fa": self.c_fa,
            "c_miss": self.c_miss,
        }


def cosine_score(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1 = np.linalg.norm(e1)
    n2 = np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise EvaluationError("cosine score undefined for zero-norm vector")
    return float(np.dot(e1, e2) / (n1 * n2))


def _rates(scores, labels):
    """Operating points (P_fa, P_miss) at thresholds between sorted scores.

    Decision rule is accept iff score >= threshold; thresholds are the sorted
    distinct scores plus one above the maximum, so the sweep includes both
    accept-all and reject-all endpoints.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != scores.shape:
        raise EvaluationError("scores and labels must align")
    n_target = int(labels.sum())
    n_nontarget = int((~labels).sum())
    if n_target == 0 or n_nontarget == 0:
        raise EvaluationError("need at least one target and one nontarget score")
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    # counts of scores >= t via cumulative sums over the sorted order
    order = np.argsort(scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    idx = np.searchsorted(sorted_scores, thresholds, side="left")
    target_below = np.concatenate(([0], np.cumsum(sorted_labels)))
    nontarget_below = np.concatenate(([0], np.cumsum(~sorted_labels)))
    p_miss = target_below[idx] / n_target
    p_fa = (n_nontarget - nontarget_below[idx]) / n_nontarget
    return thresholds, p_fa, p_miss


def compute_eer(scores, labels):
    """Equal error rate (fraction, not percent) and its threshold.

    Linear interpolation between adjacent operating points when the sweep
    has no exact P_fa == P_miss crossing.
    """
    thresholds, p_fa, p_miss = _rates(scores, labels)
    diff = p_fa - p_miss  # starts >= 0 (accept all), ends <= 0 (reject all)
    k = int(np.argmax(diff < 0))
    if diff[k - 1] == 0.0:
        return float(p_fa[k - 1]), float(thresholds[k - 1])
    # interpolate between points k-1 and k
    fa1, m1, fa2, m2 = p_fa[k - 1], p_miss[k - 1], p_fa[k], p_miss[k]
    alpha = (fa1 - m1) / ((m2 - m1) - (fa2 - fa1))
    eer = m1 + alpha * (m2 - m1)
    thr = thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1])
    return float(eer), float(thr)


def compute_min_dcf(scores, labels, p_target=0.01, c_fa=1.0, c_miss=1.0):
    """Minimum normalized detection cost over the threshold sweep."""
    thresholds, p_fa, p_miss = _rates(scores, labels)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    dcf = (c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa) / norm
    k = int(np.argmin(dcf))
    return float(dcf[k]), float(thresholds[k])


def score_protocol(protocol, embeddings):
    """Cosine-score every trial; embeddings is a mapping utterance-key -> vector.

    Returns (scores, labels) arrays aligned with protocol.trials.
    """
    cache = {}

    def emb(key):
        if key not in cache:
            if key not in embeddings:
                raise EvaluationError(f"missing embedding for utterance {key!r}")
            v = np.asarray(embeddings[key], dtype=np.float64)
            cache[key] = v / np.linalg.norm(v)
        return cache[key]

    scores = np.array([float(np.dot(emb(t.enroll), emb(t.test)))
                       for t in protocol.trials])
    labels = np.array([t.is_target for t in protocol.trials])
    return scores, labels


def evaluate_protocol(protocol, embeddings, p_target=0.01, c_fa=1.0,
                      c_miss=1.0):
    """End-to-end scoring of a protocol from an embedding store."""
    scores, labels = score_protocol(protocol, embeddings)
    eer, eer_thr = compute_eer(scores, labels)
    dcf, dcf_thr = compute_min_dcf(scores, labels, p_target, c_fa, c_miss)
    return EvalResult(eer=100.0 * eer, eer_threshold=eer_thr, min_dcf=dcf,
                      dcf_threshold=dcf_thr, p_target=p_target, c_fa=c_fa,
                      c_miss=c_miss)


def write_scores(protocol, scores, path):
    with open(path, "w", encoding="utf-8") as f:
        for t, s in zip(protocol.trials, scores):
            f.write(f"{1 if t.is_target else 0} {t.enroll} {t.test} {s:.8f}\n")


def write_result(result, path, extra=None):
    with open(path, "w", encoding="utf-8") as f:
        items = dict(extra or {})
        items.update(result.as_keyvalues())
        for k, v in items.items():
            f.write(f"{k} {v}\n")


def age_probe(embeddings, age_groups, split_seed=0, test_fraction=0.2):
    """Held-out accuracy of a multinomial logistic regression predicting the
    age group from the embedding. Higher accuracy means more residual age
    information in the representation.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(age_groups)
    if len(np.unique(y)) < 2:
        raise EvaluationError("age probe needs at least two age groups")
    X_tr, X_te, y_tr, y_te = train_test_split(
        X, y, test_size=test_fraction, random_state=split_seed, stratify=y)
    # standardization only conditions the solver; linear separability is
    # unchanged
    clf = make_pipeline(StandardScaler(),
                        LogisticRegression(max_iter=5000))
    clf.fit(X_tr, y_tr)
    return float(clf.score(X_te, y_te))
