"""Adaptive Simpson integration."""

from __future__ import annotations

from collections.abc import Callable


class QuadratureError(RuntimeError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved tolerance {achieved:.3e})")
        self.achieved = achieved


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = 1e-8, max_depth: int = 50) -> float:
    """Integrate ``f`` over [a, b] to absolute tolerance ``tol``.

    Uses the standard Richardson-corrected recursion; each interval is split
    until ``|S_left + S_right - S_whole| <= 15 tol_local``.
    """
    if b == a:
        return 0.0
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    worst = [0.0]
    # explicit stack keeps deep refinement off the Python call stack
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        lo, hi, flo, fmid, fhi, s, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi)
        diff = left + right - s
        if abs(diff) <= 15.0 * eps or depth >= max_depth:
            if depth >= max_depth and abs(diff) > 15.0 * eps:
                worst[0] = max(worst[0], abs(diff) / 15.0)
            total += left + right + diff / 15.0
        else:
            stack.append((lo, mid, flo, flm, fmid, left, 0.5 * eps, depth + 1))
            stack.append((mid, hi, fmid, frm, fhi, right, 0.5 * eps, depth + 1))
    if worst[0] > 0:
        raise QuadratureError("adaptive Simpson hit maximum depth", worst[0])
    return total
