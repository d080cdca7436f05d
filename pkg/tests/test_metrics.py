import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gazecal.metrics import euclidean_error, macro_f1, nmi


def test_euclidean_345():
    assert euclidean_error([(0, 0)], [(3, 4)]) == (5.0, 0.0)


def test_euclidean_zero_when_equal():
    p = np.random.default_rng(0).standard_normal((10, 2))
    assert euclidean_error(p, p)[0] == 0.0


def test_euclidean_against_loop():
    rng = np.random.default_rng(1)
    p, y = rng.standard_normal((1000, 2)), rng.standard_normal((1000, 2))
    d = [math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2) for a, b in zip(p, y)]
    mean = sum(d) / len(d)
    std = math.sqrt(sum((x - mean) ** 2 for x in d) / len(d))
    got = euclidean_error(p, y)
    assert abs(got[0] - mean) < 1e-12 and abs(got[1] - std) < 1e-12


def test_euclidean_length_mismatch():
    with pytest.raises(ValueError):
        euclidean_error([(0, 0)], [(0, 0), (1, 1)])


def nmi_oracle(y, c):
    n = len(y)
    cy, cc, joint = Counter(y), Counter(c), Counter(zip(y, c))
    mi = sum(v / n * math.log((v / n) / ((cy[a] / n) * (cc[b] / n))) for (a, b), v in joint.items())
    hy = -sum(v / n * math.log(v / n) for v in cy.values())
    hc = -sum(v / n * math.log(v / n) for v in cc.values())
    return 0.0 if hy + hc == 0 else 2 * mi / (hy + hc)


def test_nmi_identical_partitions():
    assert nmi([0, 0, 1, 1, 2], ["a", "a", "b", "b", "c"]) == pytest.approx(1.0, abs=1e-12)


def test_nmi_single_cluster_is_zero():
    assert nmi([0, 1, 0, 1], [5, 5, 5, 5]) == 0.0


def test_nmi_both_trivial_is_zero():
    assert nmi([1, 1, 1], [2, 2, 2]) == 0.0


def test_nmi_contingency_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(5, 60))
        y, c = rng.integers(0, 3, n).tolist(), rng.integers(0, 4, n).tolist()
        assert abs(nmi(y, c) - nmi_oracle(y, c)) < 1e-10


def f1_oracle(y, p):
    scores = []
    for k in sorted(set(y) | set(p)):
        tp = sum(a == k and b == k for a, b in zip(y, p))
        fp = sum(a != k and b == k for a, b in zip(y, p))
        fn = sum(a == k and b != k for a, b in zip(y, p))
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


def test_macro_f1_perfect():
    assert macro_f1(list("abca"), list("abca")) == 1.0


def test_macro_f1_constructed_half():
    # per class: TP=1, FP=1, FN=1
    assert macro_f1(["a", "a", "b", "b"], ["a", "b", "b", "a"]) == pytest.approx(0.5)


def test_macro_f1_count_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        y, p = rng.integers(0, 4, n).tolist(), rng.integers(0, 4, n).tolist()
        assert abs(macro_f1(y, p) - f1_oracle(y, p)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_nmi_bounded_and_symmetric(pairs):
    y, c = zip(*pairs)
    v = nmi(y, c)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(nmi(c, y), abs=1e-12)
