"""Independent reference computations used as test oracles.

Everything here is scalar Python (lists, ``statistics``, ``fractions``) so it
shares no code path with the vectorised implementations under test.
"""

from __future__ import annotations

import math
import statistics
from fractions import Fraction


def median_py(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def pipeline_py(E, alpha_min=0.25, alpha_max=0.80, eps=1e-6):
    """Recalibrated logits and intermediates, one token column at a time."""
    H, M = len(E), len(E[0])
    absE = [[abs(x) for x in row] for row in E]
    cols = [[absE[h][m] for h in range(H)] for m in range(M)]
    C = [median_py(c) for c in cols]
    mu = [math.fsum(c) / H for c in cols]
    S = [statistics.pstdev(c, mu[m]) for m, c in enumerate(cols)]
    lo, hi = min(S), max(S)
    S_norm = [(s - lo) / (hi - lo + eps) for s in S]
    alpha = [alpha_min + (alpha_max - alpha_min) * s for s in S_norm]
    masks = [[min(max(abs(absE[h][m] - C[m]) / (S[m] + eps), 0.0), 1.0) for m in range(M)] for h in range(H)]
    out = [[E[h][m] + alpha[m] * C[m] * masks[h][m] for m in range(M)] for h in range(H)]
    return {"C": C, "mu": mu, "S": S, "S_norm": S_norm, "alpha": alpha, "masks": masks, "out": out}


def softmax_py(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    t = math.fsum(e)
    return [x / t for x in e]


def kl_py(p, q):
    return math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def set_scores(mentioned_sets, truth_sets):
    """CHAIR counts and ratios by set enumeration, exact with Fractions."""
    n_caps = len(mentioned_sets)
    hal_caps = 0
    mentions = 0
    hal = 0
    per_f1 = []
    tp_all = fp_all = fn_all = 0
    for mentioned, truth in zip(mentioned_sets, truth_sets):
        wrong = [o for o in mentioned if o not in truth]
        right = [o for o in mentioned if o in truth]
        missed = [o for o in truth if o not in mentioned]
        mentions += len(mentioned)
        hal += len(wrong)
        hal_caps += 1 if wrong else 0
        if right:
            p = Fraction(len(right), len(mentioned))
            r = Fraction(len(right), len(truth))
            per_f1.append(2 * p * r / (p + r))
        else:
            per_f1.append(Fraction(0))
        tp_all += len(right)
        fp_all += len(wrong)
        fn_all += len(missed)
    micro = Fraction(0)
    if tp_all:
        p = Fraction(tp_all, tp_all + fp_all)
        r = Fraction(tp_all, tp_all + fn_all)
        micro = 2 * p * r / (p + r)
    return {
        "n_captions": n_caps,
        "n_hal_captions": hal_caps,
        "n_objects_mentioned": mentions,
        "n_hal_objects": hal,
        "c_s": Fraction(hal_caps, n_caps) if n_caps else Fraction(0),
        "c_i": Fraction(hal, mentions) if mentions else Fraction(0),
        "f1": sum(per_f1, Fraction(0)) / n_caps if n_caps else Fraction(0),
        "f1_micro": micro,
    }


def confusion_py(pairs):
    """Precision/recall/F1/accuracy from (label_is_yes, answer_is_yes) pairs
    by counting each of the four cells separately."""
    tp = sum(1 for t, a in pairs if t and a)
    fp = sum(1 for t, a in pairs if not t and a)
    fn = sum(1 for t, a in pairs if t and not a)
    tn = sum(1 for t, a in pairs if not t and not a)
    precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    recall = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    accuracy = Fraction(tp + tn, len(pairs))
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy}
