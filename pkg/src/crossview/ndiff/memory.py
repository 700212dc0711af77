"""Allocator settings for the eager kernels."""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def retain_freed_memory(pad_bytes: int = 16 << 20, mmap_bytes: int = 4 << 20) -> bool:
    """Ask glibc to keep freed heap pages for reuse instead of handing them back.

    Every recurrent step allocates and drops arrays of a few hundred KB. With
    the stock thresholds each of those is an mmap/munmap pair or a heap trim,
    and the resulting page faults cost more than the arithmetic. Returns
    False (and changes nothing) on platforms without ``mallopt``.
    """
    if not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = mallopt(_M_MMAP_THRESHOLD, mmap_bytes)
    ok &= mallopt(_M_TRIM_THRESHOLD, 4 * pad_bytes)
    ok &= mallopt(_M_TOP_PAD, pad_bytes)
    return bool(ok)
