"""Power-flow inner loops, in two interchangeable flavours.

The numba versions are explicit loops compiled with ``@njit``; the numpy
versions are vectorised equivalents. ``GRIDTOPO_BACKEND=numpy`` (or a missing
numba install) selects the numpy path at import time. Both return identical
results up to floating-point rounding.

Shared conventions: ``g``/``bm`` are the real and imaginary parts of the dense
bus admittance matrix; ``vm``/``va`` are node voltage magnitude and angle;
``pvpq`` and ``pq`` are the unknown-angle and unknown-magnitude node indices.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - import guard
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

_requested = os.environ.get("GRIDTOPO_BACKEND", "numba").strip().lower()
BACKEND = "numba" if HAS_NUMBA and _requested != "numpy" else "numpy"

# status codes returned by the Newton solvers
CONVERGED = 0
MAX_ITER = 1
SINGULAR = 2
NOT_FINITE = 3


# ---------------------------------------------------------------------------
# numpy path


def ybus_numpy(n, f, t, r, x, b):
    y = 1.0 / (r + 1j * x)
    ysh = 0.5j * b
    Y = np.zeros((n, n), dtype=np.complex128)
    np.add.at(Y, (f, f), y + ysh)
    np.add.at(Y, (t, t), y + ysh)
    np.add.at(Y, (f, t), -y)
    np.add.at(Y, (t, f), -y)
    return Y.real.copy(), Y.imag.copy()


def _mismatch_numpy(Y, V, p_spec, q_spec, pvpq, pq):
    S = V * np.conj(Y @ V)
    dp = S.real - p_spec
    dq = S.imag - q_spec
    return np.concatenate([dp[pvpq], dq[pq]])


def newton_numpy(g, bm, vm, va, p_spec, q_spec, pvpq, pq, tol, max_iter):
    Y = g + 1j * bm
    vm = vm.copy()
    va = va.copy()
    V = vm * np.exp(1j * va)
    npvpq = len(pvpq)
    F = _mismatch_numpy(Y, V, p_spec, q_spec, pvpq, pq)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while not norm < tol:
        if it >= max_iter:
            return vm, va, it, norm, MAX_ITER
        if not np.isfinite(norm):
            return vm, va, it, norm, NOT_FINITE
        it += 1
        Ibus = Y @ V
        dV = V / np.abs(V)
        diagV = np.diag(V)
        dS_dVm = diagV @ np.conj(Y * dV[None, :]) + np.diag(np.conj(Ibus) * dV)
        dS_dVa = 1j * diagV @ np.conj(np.diag(Ibus) - Y * V[None, :])
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return vm, va, it, norm, SINGULAR
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        V = vm * np.exp(1j * va)
        F = _mismatch_numpy(Y, V, p_spec, q_spec, pvpq, pq)
        norm = np.max(np.abs(F)) if F.size else 0.0
    if not np.isfinite(norm):
        return vm, va, it, norm, NOT_FINITE
    return vm, va, it, norm, CONVERGED


def branch_numpy(vm, va, f, t, r, x, b):
    """End currents and end complex powers of pi-model branches."""
    V = vm * np.exp(1j * va)
    y = 1.0 / (r + 1j * x)
    ysh = 0.5j * b
    vf, vt = V[f], V[t]
    i_f = (y + ysh) * vf - y * vt
    i_t = (y + ysh) * vt - y * vf
    s_f = vf * np.conj(i_f)
    s_t = vt * np.conj(i_t)
    return np.abs(i_f), np.abs(i_t), s_f.real, s_t.real


def injections_numpy(g, bm, vm, va):
    V = vm * np.exp(1j * va)
    S = V * np.conj((g + 1j * bm) @ V)
    return S.real, S.imag


# ---------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @njit(cache=True, error_model="numpy")
    def ybus_numba(n, f, t, r, x, b):
        g = np.zeros((n, n))
        bm = np.zeros((n, n))
        for k in range(f.shape[0]):
            den = r[k] * r[k] + x[k] * x[k]
            gs = r[k] / den
            bs = -x[k] / den
            i, j = f[k], t[k]
            g[i, i] += gs
            g[j, j] += gs
            bm[i, i] += bs + 0.5 * b[k]
            bm[j, j] += bs + 0.5 * b[k]
            g[i, j] -= gs
            g[j, i] -= gs
            bm[i, j] -= bs
            bm[j, i] -= bs
        return g, bm

    @njit(cache=True, error_model="numpy")
    def _powers_numba(g, bm, vm, va):
        n = vm.shape[0]
        p = np.zeros(n)
        q = np.zeros(n)
        for i in range(n):
            pi = 0.0
            qi = 0.0
            for k in range(n):
                gik = g[i, k]
                bik = bm[i, k]
                if gik == 0.0 and bik == 0.0:
                    continue
                d = va[i] - va[k]
                c = np.cos(d)
                s = np.sin(d)
                pi += vm[k] * (gik * c + bik * s)
                qi += vm[k] * (gik * s - bik * c)
            p[i] = vm[i] * pi
            q[i] = vm[i] * qi
        return p, q

    @njit(cache=True, error_model="numpy")
    def injections_numba(g, bm, vm, va):
        return _powers_numba(g, bm, vm, va)

    @njit(cache=True, error_model="numpy")
    def _mismatch_numba(g, bm, vm, va, p_spec, q_spec, pvpq, pq):
        p, q = _powers_numba(g, bm, vm, va)
        n1 = pvpq.shape[0]
        F = np.empty(n1 + pq.shape[0])
        for a in range(n1):
            F[a] = p[pvpq[a]] - p_spec[pvpq[a]]
        for a in range(pq.shape[0]):
            F[n1 + a] = q[pq[a]] - q_spec[pq[a]]
        return F, p, q

    @njit(cache=True, error_model="numpy")
    def _jacobian_numba(g, bm, vm, va, p, q, pvpq, pq):
        # polar Jacobian: d(P,Q)/d(angle over pvpq, magnitude over pq)
        n1 = pvpq.shape[0]
        n2 = pq.shape[0]
        n = vm.shape[0]
        col_m = -np.ones(n, dtype=np.int64)
        for a in range(n2):
            col_m[pq[a]] = a
        col_a = -np.ones(n, dtype=np.int64)
        for a in range(n1):
            col_a[pvpq[a]] = a
        J = np.zeros((n1 + n2, n1 + n2))
        for row in range(n1 + n2):
            is_p = row < n1
            i = pvpq[row] if is_p else pq[row - n1]
            for k in range(n):
                gik = g[i, k]
                bik = bm[i, k]
                if k != i and gik == 0.0 and bik == 0.0:
                    continue
                if k == i:
                    gii = gik
                    bii = bik
                    if is_p:
                        dth = -q[i] - bii * vm[i] * vm[i]
                        dvm = p[i] / vm[i] + gii * vm[i]
                    else:
                        dth = p[i] - gii * vm[i] * vm[i]
                        dvm = q[i] / vm[i] - bii * vm[i]
                else:
                    d = va[i] - va[k]
                    c = np.cos(d)
                    s = np.sin(d)
                    if is_p:
                        dth = vm[i] * vm[k] * (gik * s - bik * c)
                        dvm = vm[i] * (gik * c + bik * s)
                    else:
                        dth = -vm[i] * vm[k] * (gik * c + bik * s)
                        dvm = vm[i] * (gik * s - bik * c)
                ca = col_a[k]
                if ca >= 0:
                    J[row, ca] = dth
                cm = col_m[k]
                if cm >= 0:
                    J[row, n1 + cm] = dvm
        return J

    @njit(cache=True, error_model="numpy")
    def newton_numba(g, bm, vm, va, p_spec, q_spec, pvpq, pq, tol, max_iter):
        vm = vm.copy()
        va = va.copy()
        n1 = pvpq.shape[0]
        F, p, q = _mismatch_numba(g, bm, vm, va, p_spec, q_spec, pvpq, pq)
        norm = np.max(np.abs(F)) if F.shape[0] > 0 else 0.0
        it = 0
        while not norm < tol:
            if it >= max_iter:
                return vm, va, it, norm, MAX_ITER
            if not np.isfinite(norm):
                return vm, va, it, norm, NOT_FINITE
            it += 1
            J = _jacobian_numba(g, bm, vm, va, p, q, pvpq, pq)
            ok = True
            try:
                dx = np.linalg.solve(J, -F)
            except Exception:
                ok = False
                dx = F
            if not ok:
                return vm, va, it, norm, SINGULAR
            for a in range(n1):
                va[pvpq[a]] += dx[a]
            for a in range(pq.shape[0]):
                vm[pq[a]] += dx[n1 + a]
            F, p, q = _mismatch_numba(g, bm, vm, va, p_spec, q_spec, pvpq, pq)
            norm = np.max(np.abs(F)) if F.shape[0] > 0 else 0.0
        if not np.isfinite(norm):
            return vm, va, it, norm, NOT_FINITE
        return vm, va, it, norm, CONVERGED

    @njit(cache=True, error_model="numpy")
    def branch_numba(vm, va, f, t, r, x, b):
        m = f.shape[0]
        i_f = np.empty(m)
        i_t = np.empty(m)
        p_f = np.empty(m)
        p_t = np.empty(m)
        for k in range(m):
            den = r[k] * r[k] + x[k] * x[k]
            gs = r[k] / den
            bs = -x[k] / den
            bh = 0.5 * b[k]
            vfr = vm[f[k]] * np.cos(va[f[k]])
            vfi = vm[f[k]] * np.sin(va[f[k]])
            vtr = vm[t[k]] * np.cos(va[t[k]])
            vti = vm[t[k]] * np.sin(va[t[k]])
            # i_f = (y + j bh) vf - y vt, with y = gs + j bs
            ifr = gs * (vfr - vtr) - bs * (vfi - vti) - bh * vfi
            ifi = gs * (vfi - vti) + bs * (vfr - vtr) + bh * vfr
            itr = gs * (vtr - vfr) - bs * (vti - vfi) - bh * vti
            iti = gs * (vti - vfi) + bs * (vtr - vfr) + bh * vtr
            i_f[k] = np.sqrt(ifr * ifr + ifi * ifi)
            i_t[k] = np.sqrt(itr * itr + iti * iti)
            p_f[k] = vfr * ifr + vfi * ifi
            p_t[k] = vtr * itr + vti * iti
        return i_f, i_t, p_f, p_t


if BACKEND == "numba":
    ybus = ybus_numba
    newton = newton_numba
    branch = branch_numba
    injections = injections_numba
else:
    ybus = ybus_numpy
    newton = newton_numpy
    branch = branch_numpy
    injections = injections_numpy


def get_backend(name: str | None = None):
    """Kernel namespace for ``name`` ('numba' or 'numpy'); defaults to the active one."""
    name = name or BACKEND
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend unavailable")
        return _Namespace(ybus_numba, newton_numba, branch_numba, injections_numba)
    if name == "numpy":
        return _Namespace(ybus_numpy, newton_numpy, branch_numpy, injections_numpy)
    raise ValueError(f"unknown backend {name!r}")


class _Namespace:
    __slots__ = ("ybus", "newton", "branch", "injections")

    def __init__(self, ybus, newton, branch, injections):
        self.ybus = ybus
        self.newton = newton
        self.branch = branch
        self.injections = injections
