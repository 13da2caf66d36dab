"""Independent straight-line oracles shared by the module and acceptance
tests.  Everything here re-derives behavior from first principles (or
from the documented determinism contract) without calling into the
package's own round / distance implementations."""

import numpy as np

from fedcast.federation import _EXCHANGE, _FORWARD, _SELECT


def oracle_rng(seed, purpose, round_index, client=0):
    """Re-derivation of the package's deterministic per-(purpose, round,
    client) random streams."""
    return np.random.default_rng(np.random.SeedSequence((seed, purpose, round_index, client)))


def oracle_mask(seed, purpose, round_index, client, size, total):
    return np.sort(oracle_rng(seed, purpose, round_index, client).choice(total, size, False))


def delta_update(cid: int, round_index: int, d: int) -> np.ndarray:
    """Deterministic stand-in for local training."""
    return (np.arange(d) + 1.0) * 0.001 * (cid + 1) + 0.01 * round_index


def oracle_round(policy, seed, r, k, d, base, client_params, sr, share, fwd_ratio):
    """Scripted simulation of one exchange round.  Returns the new server
    vector, the mutated client parameter dict, and (downlink, uplink)."""
    c = max(1, int(round(sr * k)))
    sel = sorted(int(i) for i in oracle_rng(seed, _SELECT, r).choice(k, c, False))
    down = up = 0
    if policy == "online":
        for cid in sel:
            client_params[cid] = base.copy() + delta_update(cid, r, d)
            down += d
        acc = np.zeros(d)
        for cid in sel:
            acc += client_params[cid]
        return acc / c, client_params, down, up + c * d
    m = int(round(share * d))
    for cid in sel:
        mask = oracle_mask(seed, _EXCHANGE, r, cid, m, d)
        client_params[cid][mask] = base[mask]
        down += m
        client_params[cid] = client_params[cid] + delta_update(cid, r, d)
    for cid in range(k):
        if cid in sel:
            continue
        if policy == "forward":
            fmask = oracle_mask(seed, _FORWARD, r, cid, int(round(fwd_ratio * d)), d)
            client_params[cid][fmask] = base[fmask]
            down += fmask.size
        client_params[cid] = client_params[cid] + delta_update(cid, r, d)
    acc = np.zeros(d)
    for cid in sel:
        rmask = oracle_mask(seed, _EXCHANGE, r + 1, cid, m, d)
        contrib = base.copy()
        contrib[rmask] = client_params[cid][rmask]
        acc += contrib
        up += m
    return acc / c, client_params, down, up


# ---------------------------------------------------------------------------
# warping-path enumeration


def all_paths(n: int, m: int):
    """Every monotone path of (right / down / diagonal) steps from cell
    (0, 0) to cell (n-1, m-1)."""

    def walk(i, j, path):
        if i == n - 1 and j == m - 1:
            yield path
            return
        if i + 1 < n:
            yield from walk(i + 1, j, path + [(i + 1, j)])
        if j + 1 < m:
            yield from walk(i, j + 1, path + [(i, j + 1)])
        if i + 1 < n and j + 1 < m:
            yield from walk(i + 1, j + 1, path + [(i + 1, j + 1)])

    yield from walk(0, 0, [(0, 0)])


def enumerated_dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum alignment cost by brute-force enumeration of every
    warping path."""
    best = np.inf
    for path in all_paths(len(a), len(b)):
        total = 0.0
        for i, j in path:
            total += abs(a[i] - b[j])
        best = min(best, total)
    return best
