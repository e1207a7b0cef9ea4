import numpy as np
import pytest
from hypothesis import settings

from capmoe.trace import RoutingTrace

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# Six tokens, three experts, k=1. Tokens 0-3 all prefer expert 0.
RUNNING_SCORES = np.array(
    [
        [0.9, 0.05, 0.05],
        [0.8, 0.1, 0.1],
        [0.7, 0.2, 0.1],
        [0.6, 0.15, 0.25],
        [0.1, 0.8, 0.1],
        [0.1, 0.1, 0.8],
    ]
)


@pytest.fixture
def running_scores():
    return RUNNING_SCORES.copy()


@pytest.fixture
def running_trace():
    return RoutingTrace(0, 6, 3, 1, np.log(RUNNING_SCORES))


def trace_from_choices(choices, n, k, seed=0, layer_id=0):
    """Trace whose top-k routing is exactly ``choices`` (t lists of k experts)."""
    rng = np.random.default_rng(seed)
    t = len(choices)
    logits = rng.uniform(0.0, 0.1, size=(t, n))
    for i, row in enumerate(choices):
        assert len(set(row)) == k
        logits[i, list(row)] += 5.0
    return RoutingTrace(layer_id, t, n, k, logits)


def trace_with_peak(t, n, k, peak_tokens, seed=0):
    """Expert 0 receives ``peak_tokens`` tokens; remaining slots spread round-robin."""
    choices = []
    nxt = 1
    for i in range(t):
        row = [0] if i < peak_tokens else []
        while len(row) < k:
            if nxt not in row:
                row.append(nxt)
            nxt = nxt % (n - 1) + 1
        choices.append(row)
    return trace_from_choices(choices, n, k, seed=seed)


def brute_force_overflow(experts, n, capacity):
    """sum_j max(0, N_j - C) by explicit counting."""
    counts = [0] * n
    for e in experts:
        counts[e] += 1
    return sum(max(0, c - capacity) for c in counts)


def naive_reroute(scores, k, capacity, rounds):
    """Literal per-round execution: full top-k, KthValue threshold, exact-K tie rule.

    Written with Python loops and no shared helpers so it stays independent of
    the vectorized implementation.
    """
    s = [list(map(float, row)) for row in scores]
    t, n = len(s), len(s[0])
    history = []
    selected = None
    for _ in range(rounds):
        selected = []
        for i in range(t):
            cand = [(-s[i][j], j) for j in range(n) if s[i][j] > 0]
            cand.sort()
            selected.append({j for _, j in cand[:k]})
        dropped = 0
        for j in range(n):
            holders = [i for i in range(t) if j in selected[i]]
            excess = len(holders) - capacity
            if excess <= 0:
                continue
            vals = sorted(s[i][j] for i in holders)
            tau = vals[excess - 1]
            below = [i for i in holders if s[i][j] < tau]
            at = sorted((i for i in holders if s[i][j] == tau), reverse=True)
            victims = below + at[: excess - len(below)]
            for i in victims:
                s[i][j] = 0.0
                selected[i].discard(j)
            dropped += len(victims)
        loads = [sum(1 for i in range(t) if j in selected[i]) for j in range(n)]
        history.append((loads, dropped))
    final = {(i, j) for i in range(t) for j in selected[i]}
    return final, history, np.array(s)


_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_c"):
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria.setdefault(name, "PASS" if report.passed else "FAIL")
        if not report.passed:
            _criteria[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        num, _, label = name[len("test_c"):].partition("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {_criteria[name]}  {label}")
