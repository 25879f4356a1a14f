"""Independent reference implementations the tests compare against.

Written separately from the package code, deliberately naive.
"""
import math

# condition / severity codes as plain ints
NO_ALARM, HIGH, HIHI, LOW, LOLO, COMM = 0, 1, 2, 3, 4, 5
NONE, MINOR, MAJOR, INVALID = 0, 1, 2, 3

ALARM_VALUES = [0.5 * i for i in range(1, 20)]  # 0.5 .. 9.5
ALARM_LIMIT_SETS = [
    (1.0, 2.0, 8.0, 9.0),
    (2.0, 2.0, 8.0, 8.0),
    (5.0, 5.0, 5.0, 5.0),
    (0.5, 3.0, 3.0, 9.5),
    (4.0, 4.5, 5.0, 5.5),
    (1.5, 2.5, 2.5, 7.0),
    (0.0, 1.0, 9.0, 10.0),
    (3.0, 3.5, 7.5, 7.5),
    (2.0, 6.0, 6.5, 9.0),
    (1.0, 1.0, 9.5, 9.5),
]


def alarm_oracle(value, lolo_on, lolo, low_on, low, high_on, high, hihi_on, hihi):
    if value != value:
        return (INVALID, COMM)
    if hihi_on:
        if value >= hihi:
            return (MAJOR, HIHI)
    if lolo_on:
        if value <= lolo:
            return (MAJOR, LOLO)
    if high_on:
        if value >= high:
            return (MINOR, HIGH)
    if low_on:
        if value <= low:
            return (MINOR, LOW)
    return (NONE, NO_ALARM)


def alarm_grid():
    """Yield (value, limits tuple, mask) for the full sweep."""
    for limits in ALARM_LIMIT_SETS:
        for mask in range(16):
            for value in ALARM_VALUES:
                yield value, limits, mask


def alarm_oracle_masked(value, limits, mask):
    lolo, low, high, hihi = limits
    return alarm_oracle(value, bool(mask & 1), lolo, bool(mask & 2), low, bool(mask & 4), high,
                        bool(mask & 8), hihi)


def nearest_rank_oracle(values, p):
    s = sorted(values)
    k = int(math.ceil(p / 100.0 * len(s)))
    if k < 1:
        k = 1
    return s[k - 1]


def population_stddev(xs):
    m = sum(xs) / len(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))
