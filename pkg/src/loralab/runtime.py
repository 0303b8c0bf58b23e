"""Process-level tuning for the many short-lived numpy buffers a training step allocates."""

from __future__ import annotations

import ctypes
import ctypes.util

# glibc mallopt parameter ids
_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_tuned = False


def tune_allocator() -> bool:
    """Keep freed arrays in the heap instead of returning them to the OS.

    Without this, glibc hands every large temporary back with munmap and the
    next step pays page faults to get it again. Only affects glibc; returns
    False (and does nothing) elsewhere.
    """
    global _tuned
    if _tuned:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = (mallopt(_M_MMAP_THRESHOLD, 1 << 30) == 1
          and mallopt(_M_TRIM_THRESHOLD, 1 << 30) == 1
          and mallopt(_M_TOP_PAD, 1 << 28) == 1)
    _tuned = ok
    return ok
