"""Dense float64 linear algebra: Jacobi SVD, Cholesky, symmetric and pencil eigensolves.

Both Jacobi routines use a round-robin (tournament) ordering so that every
round rotates a set of disjoint index pairs at once; the rotations of one round
commute, which lets each round be applied as a handful of vectorized column and
row updates. Results are deterministic for a given input.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NotPositiveDefiniteError, NumericalFailure

MAX_SWEEPS = 60
JACOBI_TOL = 1e-12
SYMMETRY_TOL = 1e-10

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``x = u @ diag(singular_values) @ vt``."""

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def as_matrix(x, name="x"):
    """Return ``x`` as a finite 2-D float64 array or raise InvalidInputError."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def _check_square(a, name):
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {a.shape}")


def _check_symmetric(a, name):
    _check_square(a, name)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise InvalidInputError(f"{name} is not symmetric within {SYMMETRY_TOL}")


def round_robin_pairs(n):
    """Partition all index pairs of ``range(n)`` into rounds of disjoint pairs.

    Returns a list of ``(p, q)`` integer-array tuples with ``p < q`` elementwise.
    Uses the circle method; for odd ``n`` a phantom index absorbs the bye.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _rotation(zeta):
    # smaller root of t^2 + 2*zeta*t - 1 = 0, overflow-safe
    t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    return c, c * t


def _round_matrix(n, p, q, c, s):
    """Orthogonal ``J`` such that ``m @ J`` rotates every column pair ``(p[k], q[k])``.

    The pairs of one round are disjoint, so a single dense product applies them
    all; at the sizes used here that beats scattered row and column updates.
    """
    j = np.eye(n)
    j[p, p] = c
    j[q, q] = c
    j[p, q] = s
    j[q, p] = -s
    return j


def _one_sided_jacobi(rows, tol=JACOBI_TOL, max_sweeps=MAX_SWEEPS):
    """Orthogonalize the rows of ``rows``; return ``(rotated_rows, rotation, sweeps)``.

    Works on rows (the transposed problem) so each rotation touches contiguous memory.
    """
    d = rows.shape[0]
    vt = np.eye(d)
    rounds = round_robin_pairs(d)
    # rows reduced to rounding noise keep looking non-orthogonal to each other;
    # inner products below this absolute level carry no information
    floor = d * _EPS * _EPS * float(np.einsum("ij,ij->", rows, rows))
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in rounds:
            rp = rows[p]
            rq = rows[q]
            alpha = np.einsum("ij,ij->i", rp, rp)
            beta = np.einsum("ij,ij->i", rq, rq)
            gamma = np.einsum("ij,ij->i", rp, rq)
            active = np.abs(gamma) > np.maximum(tol * np.sqrt(alpha * beta), floor)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            c, s = _rotation((beta[active] - alpha[active]) / (2.0 * gamma[active]))
            jt = _round_matrix(d, p, q, c, s).T
            rows = jt @ rows
            vt = jt @ vt
        if not rotated:
            return rows, vt, sweep
    raise NumericalFailure(
        f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps",
        iterations=max_sweeps,
    )


def _complete_orthonormal(u, keep):
    """Replace columns of ``u`` not flagged in ``keep`` with an orthonormal completion."""
    n = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    filled = u.copy()
    candidates = iter(range(n))
    for j in range(u.shape[1]):
        if keep[j]:
            continue
        for k in candidates:
            e = np.zeros(n)
            e[k] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-3:
                e /= norm
                basis.append(e)
                filled[:, j] = e
                break
    return filled


def svd(x):
    """Thin singular value decomposition by one-sided (Hestenes) Jacobi.

    Parameters
    ----------
    x : array_like, shape (n, d)
        Finite real matrix with ``min(n, d) >= 1``.

    Returns
    -------
    SvdResult
        ``u`` is (n, r), ``singular_values`` is (r,) in non-increasing order and
        ``vt`` is (r, d) with ``r = min(n, d)``.

    Raises
    ------
    InvalidInputError
        Non-finite or empty input.
    NumericalFailure
        No convergence after ``MAX_SWEEPS`` sweeps.
    """
    x = as_matrix(x)
    n, d = x.shape
    if min(n, d) < 1:
        raise InvalidInputError(f"svd needs a non-empty matrix, got shape {x.shape}")
    if n < d:
        res = svd(x.T)
        return SvdResult(u=res.vt.T.copy(), singular_values=res.singular_values, vt=res.u.T.copy())

    if n > 2 * d:
        # QR preconditioning: Jacobi then only sees the d x d triangular factor
        q, r = np.linalg.qr(x)
        res = svd(r)
        return SvdResult(u=q @ res.u, singular_values=res.singular_values, vt=res.vt)

    rows, vt, _ = _one_sided_jacobi(np.array(x.T, copy=True))
    sigma = np.linalg.norm(rows, axis=1)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    rows = rows[order]
    vt = vt[order]

    negligible = sigma <= sigma[0] * max(n, d) * _EPS if sigma[0] > 0 else np.ones(d, bool)
    keep = ~negligible
    u = np.zeros((n, d))
    u[:, keep] = (rows[keep] / sigma[keep, None]).T
    if negligible.any():
        u = _complete_orthonormal(u, keep)
    return SvdResult(u=u, singular_values=sigma, vt=vt)


def cholesky(a):
    """Lower-triangular ``L`` with ``L @ L.T == a`` for symmetric positive definite ``a``."""
    a = as_matrix(a, "a")
    _check_symmetric(a, "a")
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        row = low[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite (pivot {j} = {pivot:.3e})", pivot=j
            )
        low[j, j] = np.sqrt(pivot)
        low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ row) / low[j, j]
    return low


def solve_lower(low, b):
    """Forward substitution for ``low @ x = b``; ``b`` may be a vector or a matrix."""
    b = np.asarray(b, dtype=np.float64)
    x = np.array(b, dtype=np.float64, copy=True)
    for i in range(low.shape[0]):
        x[i] = (b[i] - low[i, :i] @ x[:i]) / low[i, i]
    return x


def solve_spd(a, b):
    """Solve ``a @ x = b`` for SPD ``a`` through its Cholesky factor."""
    low = cholesky(a)
    y = solve_lower(low, b)
    # back substitution with low.T
    x = np.array(y, copy=True)
    n = low.shape[0]
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - low[i + 1 :, i] @ x[i + 1 :]) / low[i, i]
    return x


def sym_eigensolve(a, tol=JACOBI_TOL, max_sweeps=MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by parallel-ordered cyclic Jacobi.

    Returns ``(eigenvalues, vectors)`` with eigenvalues in descending order and
    orthonormal eigenvectors as columns.
    """
    a = as_matrix(a, "a")
    _check_symmetric(a, "a")
    m = 0.5 * (a + a.T)
    n = m.shape[0]
    vec = np.eye(n)
    rounds = round_robin_pairs(n)
    # off-diagonal entries below rounding level of the whole matrix cannot be
    # reduced further; without this floor ill-conditioned inputs never settle
    floor = n * np.finfo(np.float64).eps * np.linalg.norm(m)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in rounds:
            apq = m[p, q]
            app = m[p, p]
            aqq = m[q, q]
            active = np.abs(apq) > np.maximum(tol * np.sqrt(np.abs(app * aqq)), floor)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            c, s = _rotation((aqq[active] - app[active]) / (2.0 * apq[active]))
            j = _round_matrix(n, p, q, c, s)
            m = j.T @ m @ j
            vec = vec @ j
        if not rotated:
            vals = np.diag(m).copy()
            order = np.argsort(-vals, kind="stable")
            return vals[order], vec[:, order]
    raise NumericalFailure(
        f"Jacobi eigensolver did not converge within {max_sweeps} sweeps", iterations=max_sweeps
    )


def spd_pencil_eigenvalues(a, b):
    """Eigenvalues of ``inv(a) @ b`` for SPD ``a`` and ``b``, sorted descending.

    Computed as the spectrum of ``inv(L) @ b @ inv(L).T`` where ``a = L @ L.T``;
    no inverse is ever formed.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"pencil dimension mismatch: {a.shape} vs {b.shape}")
    low = cholesky(a)
    cholesky(b)
    y = solve_lower(low, b)
    whitened = solve_lower(low, y.T)
    whitened = 0.5 * (whitened + whitened.T)
    vals, _ = sym_eigensolve(whitened)
    return vals
