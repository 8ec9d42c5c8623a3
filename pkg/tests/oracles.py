"""Independent reference implementations used to check the statistics module.

They share no code with buildmend.stats: plain floats, direct formulas, ranks by counting."""

import math


def naive_chi_square(counts):
    rows = [float(sum(r)) for r in counts]
    cols = [float(sum(r[j] for r in counts)) for j in range(len(counts[0]))]
    n = sum(rows)
    total = 0.0
    for i, r in enumerate(counts):
        for j, o in enumerate(r):
            e = rows[i] * cols[j] / n
            total += (o - e) * (o - e) / e
    return total


def count_rank(block, j):
    """Mean rank of block[j]: values below it, plus the midpoint of its tie group."""
    below = sum(1 for v in block if v < block[j])
    equal = sum(1 for v in block if v == block[j])
    return below + (equal + 1) / 2.0


def naive_friedman(blocks):
    """Conover's form, which absorbs the tie correction through the sum of squared ranks."""
    n, k = len(blocks), len(blocks[0])
    ranks = [[count_rank(b, j) for j in range(k)] for b in blocks]
    sums = [sum(r[j] for r in ranks) for j in range(k)]
    centre = n * (k + 1) / 2.0
    a = sum(x * x for r in ranks for x in r)
    c = n * k * (k + 1) ** 2 / 4.0
    if math.isclose(a, c):
        return 0.0
    return (k - 1) * sum((s - centre) ** 2 for s in sums) / (a - c)


def naive_friedman_untied(blocks):
    """Textbook statistic for blocks without ties."""
    n, k = len(blocks), len(blocks[0])
    sums = [0] * k
    for b in blocks:
        order = sorted(range(k), key=lambda j: b[j])
        for rank, j in enumerate(order, 1):
            sums[j] += rank
    return 12.0 / (n * k * (k + 1)) * sum(s * s for s in sums) - 3 * n * (k + 1)
