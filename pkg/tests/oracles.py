"""Brute-force reference implementations shared by unit and acceptance tests.

Deliberately naive: nested loops, independent of the library code.
"""

from itertools import product


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    total = 0.0
    for p, n in product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def macro_micro_auc(scores, gold):
    n, m = len(scores), len(scores[0])
    per = [auc_pairs([scores[i][j] for i in range(n)], [gold[i][j] for i in range(n)]) for j in range(m)]
    defined = [a for a in per if a is not None]
    macro = sum(defined) / len(defined) if defined else None
    flat_s = [scores[i][j] for i in range(n) for j in range(m)]
    flat_g = [gold[i][j] for i in range(n) for j in range(m)]
    return macro, auc_pairs(flat_s, flat_g)


def f1_from_counts(tp, fp, fn):
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)


def macro_micro_f1(scores, gold, threshold=0.5):
    n, m = len(scores), len(scores[0])
    tot = [0, 0, 0]
    per = []
    for j in range(m):
        tp = fp = fn = 0
        for i in range(n):
            pred, g = scores[i][j] >= threshold, gold[i][j] == 1
            tp += pred and g
            fp += pred and not g
            fn += g and not pred
        per.append(f1_from_counts(tp, fp, fn))
        tot = [tot[0] + tp, tot[1] + fp, tot[2] + fn]
    return sum(per) / m, f1_from_counts(*tot)


def precision_at_k(scores, gold, k):
    total = 0.0
    for row, g in zip(scores, gold):
        # selection sort: repeatedly take the best remaining, lowest index on ties
        left = list(range(len(row)))
        chosen = []
        for _ in range(k):
            best = left[0]
            for j in left[1:]:
                if row[j] > row[best]:
                    best = j
            chosen.append(best)
            left.remove(best)
        total += sum(g[j] for j in chosen) / k
    return total / len(scores)
