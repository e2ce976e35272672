"""Hot loops: the first-order linear recurrence ``h_t = a_t * h_{t-1} + b_t``.

Arrays are laid out ``[M, L, K]``: ``M`` independent sequences, ``L`` steps,
``K`` independent lanes per step. ``h_{-1} = 0``.

Each kernel has a numba version and a pure-numpy version computing the same
thing; :data:`BACKEND` picks one at import time (``NNM_DISABLE_NUMBA=1``
forces numpy). Both variants stay importable so they can be compared.
"""
import numpy as np

from ._jit import JIT_ENABLED, njit, prange

CHUNK = 64

BACKEND = "numba" if JIT_ENABLED else "numpy"


def _check(a, b):
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"scan operands must share a 3-d shape, got {a.shape} and {b.shape}")
    if a.shape[1] == 0:
        raise ValueError("empty sequence")


# --------------------------------------------------------------------- numpy


def sequential_scan_np(a, b):
    M, L, K = a.shape
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    state = np.zeros((M, K), dtype=h.dtype)
    for t in range(L):
        state = a[:, t] * state + b[:, t]
        h[:, t] = state
    return h


def chunked_scan_np(a, b, chunk=CHUNK):
    M, L, K = a.shape
    dtype = np.result_type(a, b)
    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        # (1, 0) is the identity of the affine composition
        a = np.concatenate([a, np.ones((M, pad, K), dtype)], axis=1)
        b = np.concatenate([b, np.zeros((M, pad, K), dtype)], axis=1)
    a4 = a.reshape(M, nc, chunk, K)
    b4 = b.reshape(M, nc, chunk, K)

    local = np.empty((M, nc, chunk, K), dtype)
    cum = np.empty((M, nc, chunk, K), dtype)
    state = np.zeros((M, nc, K), dtype)
    prod = np.ones((M, nc, K), dtype)
    for t in range(chunk):
        at = a4[:, :, t]
        state = at * state + b4[:, :, t]
        prod = prod * at
        local[:, :, t] = state
        cum[:, :, t] = prod

    carry = np.zeros((M, nc, K), dtype)
    s = np.zeros((M, K), dtype)
    for c in range(1, nc):
        s = cum[:, c - 1, -1] * s + local[:, c - 1, -1]
        carry[:, c] = s

    h = local
    h[:, 1:] += cum[:, 1:] * carry[:, 1:, None, :]
    h = h.reshape(M, nc * chunk, K)
    return h[:, :L] if pad else h


# --------------------------------------------------------------------- numba


@njit(cache=True)
def _sequential_scan_nb(a, b):
    M, L, K = a.shape
    h = np.empty_like(b)
    for m in range(M):
        state = np.zeros(K, dtype=b.dtype)
        for t in range(L):
            for k in range(K):
                state[k] = a[m, t, k] * state[k] + b[m, t, k]
                h[m, t, k] = state[k]
    return h


@njit(parallel=True, cache=True)
def _chunked_scan_nb(a, b, chunk):
    M, L, K = a.shape
    nc = (L + chunk - 1) // chunk
    h = np.empty_like(b)
    prod = np.empty((M, nc, K), dtype=b.dtype)

    # 1) independent local scans, zero initial state per chunk
    for job in prange(M * nc):
        m = job // nc
        c = job % nc
        start = c * chunk
        stop = min(start + chunk, L)
        state = np.zeros(K, dtype=b.dtype)
        p = np.ones(K, dtype=b.dtype)
        for t in range(start, stop):
            for k in range(K):
                state[k] = a[m, t, k] * state[k] + b[m, t, k]
                p[k] *= a[m, t, k]
                h[m, t, k] = state[k]
        prod[m, c] = p

    # 2) carry the end-of-chunk state across chunks
    carry = np.zeros((M, nc, K), dtype=b.dtype)
    for m in prange(M):
        s = np.zeros(K, dtype=b.dtype)
        for c in range(1, nc):
            last = c * chunk - 1
            for k in range(K):
                s[k] = prod[m, c - 1, k] * s[k] + h[m, last, k]
                carry[m, c, k] = s[k]

    # 3) fold the incoming carry into every step of the chunk
    for job in prange(M * nc):
        m = job // nc
        c = job % nc
        if c == 0:
            continue
        start = c * chunk
        stop = min(start + chunk, L)
        p = np.ones(K, dtype=b.dtype)
        for t in range(start, stop):
            for k in range(K):
                p[k] *= a[m, t, k]
                h[m, t, k] += p[k] * carry[m, c, k]
    return h


def sequential_scan_nb(a, b):
    return _sequential_scan_nb(np.ascontiguousarray(a), np.ascontiguousarray(b))


def chunked_scan_nb(a, b, chunk=CHUNK):
    return _chunked_scan_nb(np.ascontiguousarray(a), np.ascontiguousarray(b), chunk)


# ------------------------------------------------------------------ dispatch


def sequential_scan(a, b, backend=None):
    """Step-by-step recurrence; the reference every other scan is tested against."""
    _check(a, b)
    a, b = _same_dtype(a, b)
    if (backend or BACKEND) == "numba" and JIT_ENABLED:
        return sequential_scan_nb(a, b)
    return sequential_scan_np(a, b)


def chunked_scan(a, b, chunk=CHUNK, backend=None):
    """Blocked scan: local scans per chunk, then an inter-chunk carry pass.

    Chunks compose through ``(a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2)``, so the
    result equals :func:`sequential_scan` up to rounding.
    """
    _check(a, b)
    if chunk < 1:
        raise ValueError("chunk must be positive")
    a, b = _same_dtype(a, b)
    if (backend or BACKEND) == "numba" and JIT_ENABLED:
        return chunked_scan_nb(a, b, chunk)
    return chunked_scan_np(a, b, chunk)


def _same_dtype(a, b):
    dtype = np.result_type(a, b)
    return a.astype(dtype, copy=False), b.astype(dtype, copy=False)


# ------------------------------------------------------ fused selective scan
#
# u, delta: [B, L, E]   A: [E, N]   Bm, Cm: [B, L, N]
# a_t = exp(delta_t * A), b_t = delta_t * Bm_t * u_t, y_t = <Cm_t, h_t>
# Forward returns (y, h) with h: [B, L, E, N]; backward consumes h.


def selective_scan_fwd_np(u, delta, A, Bm, Cm, chunk=CHUNK):
    nb, L, E = u.shape
    N = A.shape[1]
    a = np.exp(delta[..., None] * A)
    b = (delta * u)[..., None] * Bm[:, :, None, :]
    h = chunked_scan_np(a.reshape(nb, L, E * N), b.reshape(nb, L, E * N), chunk).reshape(nb, L, E, N)
    y = np.einsum("blen,bln->ble", h, Cm)
    return y, h


def selective_scan_bwd_np(gy, u, delta, A, Bm, Cm, h, chunk=CHUNK):
    nb, L, E = u.shape
    N = A.shape[1]
    a = np.exp(delta[..., None] * A)
    direct = gy[..., None] * Cm[:, :, None, :]
    # adjoint recurrence runs right-to-left with coefficients a_{t+1}
    coef = np.zeros_like(a)
    coef[:, 1:] = a[:, :0:-1]
    G = chunked_scan_np(coef.reshape(nb, L, E * N), direct[:, ::-1].reshape(nb, L, E * N), chunk)
    G = G.reshape(nb, L, E, N)[:, ::-1]
    hprev = np.zeros_like(h)
    hprev[:, 1:] = h[:, :-1]
    da = G * hprev * a
    GB = np.einsum("blen,bln->ble", G, Bm)
    gu = delta * GB
    gdelta = np.einsum("blen,en->ble", da, A) + u * GB
    gA = np.einsum("blen,ble->en", da, delta)
    gB = np.einsum("blen,ble->bln", G, delta * u)
    gC = np.einsum("ble,blen->bln", gy, h)
    return gu, gdelta, gA, gB, gC


@njit(parallel=True, cache=True)
def _selective_scan_fwd_nb(u, delta, A, Bm, Cm, chunk):
    nb, L, E = u.shape
    N = A.shape[1]
    nc = (L + chunk - 1) // chunk
    y = np.zeros((nb, L, E), dtype=u.dtype)
    h = np.empty((nb, L, E, N), dtype=u.dtype)
    for job in prange(nb * E):
        b = job // E
        e = job % E
        carry = np.zeros(N, dtype=u.dtype)
        state = np.empty(N, dtype=u.dtype)
        # running products of the decay within the current chunk
        prods = np.empty((chunk, N), dtype=u.dtype)
        p = np.empty(N, dtype=u.dtype)
        for c in range(nc):
            start = c * chunk
            stop = min(start + chunk, L)
            # local scan from a zero state
            state[:] = 0
            p[:] = 1
            for t in range(start, stop):
                d = delta[b, t, e]
                x = d * u[b, t, e]
                for n in range(N):
                    a = np.exp(d * A[e, n])
                    state[n] = a * state[n] + x * Bm[b, t, n]
                    p[n] *= a
                    prods[t - start, n] = p[n]
                    h[b, t, e, n] = state[n]
            # fold in the carried state, read out
            for t in range(start, stop):
                acc = 0.0
                for n in range(N):
                    if c > 0:
                        h[b, t, e, n] += prods[t - start, n] * carry[n]
                    acc += Cm[b, t, n] * h[b, t, e, n]
                y[b, t, e] = acc
            for n in range(N):
                carry[n] = h[b, stop - 1, e, n]
    return y, h


@njit(parallel=True, cache=True)
def _selective_scan_bwd_nb(gy, u, delta, A, Bm, Cm, h):
    nb, L, E = u.shape
    N = A.shape[1]
    gu = np.empty_like(u)
    gdelta = np.empty_like(u)
    gA = np.zeros((nb, E, N), dtype=u.dtype)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    # one batch item per worker: gB / gC sum over channels without races
    for b in prange(nb):
        g = np.empty(N, dtype=u.dtype)
        for e in range(E):
            g[:] = 0
            for t in range(L - 1, -1, -1):
                d = delta[b, t, e]
                uu = u[b, t, e]
                gyt = gy[b, t, e]
                acc_d = 0.0
                acc_gb = 0.0
                for n in range(N):
                    G = g[n] + Cm[b, t, n] * gyt
                    a = np.exp(d * A[e, n])
                    hprev = h[b, t - 1, e, n] if t > 0 else 0.0
                    da = G * hprev * a
                    acc_d += da * A[e, n]
                    gA[b, e, n] += da * d
                    acc_gb += G * Bm[b, t, n]
                    gB[b, t, n] += G * d * uu
                    gC[b, t, n] += gyt * h[b, t, e, n]
                    g[n] = a * G
                gu[b, t, e] = d * acc_gb
                gdelta[b, t, e] = acc_d + uu * acc_gb
    return gu, gdelta, gA.sum(axis=0), gB, gC


def selective_scan_fwd(u, delta, A, Bm, Cm, chunk=CHUNK, backend=None):
    if (backend or BACKEND) == "numba" and JIT_ENABLED:
        c = np.ascontiguousarray
        return _selective_scan_fwd_nb(c(u), c(delta), c(A), c(Bm), c(Cm), chunk)
    return selective_scan_fwd_np(u, delta, A, Bm, Cm, chunk)


def selective_scan_bwd(gy, u, delta, A, Bm, Cm, h, chunk=CHUNK, backend=None):
    if (backend or BACKEND) == "numba" and JIT_ENABLED:
        c = np.ascontiguousarray
        return _selective_scan_bwd_nb(c(gy), c(u), c(delta), c(A), c(Bm), c(Cm), c(h))
    return selective_scan_bwd_np(gy, u, delta, A, Bm, Cm, h, chunk)
