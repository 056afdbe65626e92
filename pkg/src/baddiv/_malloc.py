"""Tune glibc malloc so large numpy buffers are reused instead of mmap'd.

Default glibc hands every allocation past ~32 MB straight to mmap, so each
training-step activation buffer arrives as fresh zero pages and every copy
runs at page-fault speed.  Raising the mmap threshold keeps those buffers on
the heap where free/malloc cycles reuse warm memory.  No-op off glibc.
"""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def tune() -> bool:
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        ok &= libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
        ok &= libc.mallopt(_M_TOP_PAD, 1 << 26)
        return bool(ok)
    except OSError:
        return False
