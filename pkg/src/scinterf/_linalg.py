import numpy as np
from scipy import linalg

from .errors import NumericalError

RANK_TOL = 1e-10


def lstsq(A, b, *, what="design"):
    """Least squares via column-pivoted QR; raises on numerical rank deficiency.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    A = np.asarray(A, dtype=float)
    n, k = A.shape
    if n < k:
        raise NumericalError(f"{what} has {n} rows but {k} columns")
    Q, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if k and (d[0] == 0 or np.any(d < RANK_TOL * d[0])):
        bad = sorted(int(piv[j]) for j in np.flatnonzero(d < RANK_TOL * max(d[0], 1e-300)))
        raise NumericalError(f"{what} is rank deficient (dependent columns {bad})")
    z = linalg.solve_triangular(R, Q.T @ b)
    x = np.empty_like(z)
    x[piv] = z
    return x
