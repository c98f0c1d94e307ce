"""Hot loops over schedule hyperperiods.

Each kernel has a numba ``@njit`` implementation and a pure numpy one with the
same signature. The numba path is used when numba imports cleanly and the
environment variable ``SSNSIM_DISABLE_NUMBA`` is unset or ``0``.
"""
import os

import numpy as np

_DISABLED = os.environ.get("SSNSIM_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by SSNSIM_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def event_mask_numpy(periods, bits, hyperperiod):
    """Bitmask per second in ``[0, hyperperiod]`` of the apps that fire then."""
    mask = np.zeros(hyperperiod + 1, dtype=np.uint8)
    for p, b in zip(periods, bits):
        mask[::p] |= np.uint8(b)
    return mask


def compress_mask_numpy(mask):
    """Event times and their bitmasks for the nonzero entries of ``mask``."""
    times = np.flatnonzero(mask).astype(np.int64)
    return times, mask[times].astype(np.int64)


def fire_counts_numpy(intervals, indices, cycles, nbits):
    """Count firings per bit when replaying a schedule ``cycles`` times.

    The closing index of each hyperperiod coincides with the opening index of
    the next, so it is counted once at the very end only.
    """
    counts = np.zeros(nbits, dtype=np.int64)
    body = indices[:-1]
    for b in range(nbits):
        counts[b] = cycles * np.count_nonzero(body & (1 << b))
        if indices[-1] & (1 << b):
            counts[b] += 1
    return counts


if HAVE_NUMBA:

    @njit(cache=True)
    def event_mask_numba(periods, bits, hyperperiod):
        mask = np.zeros(hyperperiod + 1, dtype=np.uint8)
        for k in range(periods.shape[0]):
            p = periods[k]
            b = np.uint8(bits[k])
            for t in range(0, hyperperiod + 1, p):
                mask[t] |= b
        return mask

    @njit(cache=True)
    def compress_mask_numba(mask):
        n = 0
        for t in range(mask.shape[0]):
            if mask[t] != 0:
                n += 1
        times = np.empty(n, dtype=np.int64)
        idx = np.empty(n, dtype=np.int64)
        j = 0
        for t in range(mask.shape[0]):
            if mask[t] != 0:
                times[j] = t
                idx[j] = mask[t]
                j += 1
        return times, idx

    @njit(cache=True)
    def fire_counts_numba(intervals, indices, cycles, nbits):
        counts = np.zeros(nbits, dtype=np.int64)
        for k in range(indices.shape[0] - 1):
            for b in range(nbits):
                if indices[k] & (1 << b):
                    counts[b] += cycles
        last = indices[indices.shape[0] - 1]
        for b in range(nbits):
            if last & (1 << b):
                counts[b] += 1
        return counts

    event_mask = event_mask_numba
    compress_mask = compress_mask_numba
    fire_counts = fire_counts_numba
else:
    event_mask = event_mask_numpy
    compress_mask = compress_mask_numpy
    fire_counts = fire_counts_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
