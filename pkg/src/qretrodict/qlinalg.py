"""Dense complex linear algebra for small composite quantum systems.

Operators are plain ``complex128`` numpy arrays. Composite spaces are
described by a tuple of factor dimensions (``dims``), ordered the same way
as the Kronecker products that built them.
"""

from functools import reduce

import numpy as np

from .errors import DimensionError, NonHermitianError

# Pauli and ladder operators, basis {|0>, |1>}.
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|
SIGMA_PLUS = SIGMA_MINUS.T.copy()
CNOT = np.array([[1, 0, 0, 0],
                 [0, 1, 0, 0],
                 [0, 0, 0, 1],
                 [0, 0, 1, 0]], dtype=complex)


def as_cmatrix(a):
    """Return ``a`` as a 2-d complex128 array, validating finiteness."""
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def dag(a):
    """Conjugate transpose over the last two axes (works on stacks)."""
    return np.conj(np.swapaxes(a, -1, -2))


def hermitian_part(a):
    return 0.5 * (a + dag(a))


def trace(a):
    """Trace over the last two axes."""
    return np.trace(a, axis1=-2, axis2=-1)


def commutator(a, b):
    return a @ b - b @ a


def ket(index, dim):
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return v


def projector(vector):
    v = np.asarray(vector, dtype=complex).reshape(-1)
    return np.outer(v, v.conj())


def tensor_product(*ops):
    """Kronecker product of one or more operators, left to right."""
    if not ops:
        raise ValueError("tensor_product needs at least one operand")
    return reduce(np.kron, (np.asarray(op, dtype=complex) for op in ops))


def _check_dims(n, dims):
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise DimensionError(f"factor dimensions must be positive: {dims}")
    if int(np.prod(dims)) != n:
        raise DimensionError(
            f"factorization {dims} has dimension {int(np.prod(dims))}, "
            f"matrix has dimension {n}")
    return dims


def partial_trace(a, dims, keep):
    """Trace out every factor of ``dims`` not listed in ``keep``.

    The kept factors appear in the result in their original order.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"partial_trace needs a square matrix, got {a.shape}")
    dims = _check_dims(a.shape[0], dims)
    keep = sorted({int(k) for k in np.atleast_1d(keep)})
    if any(k < 0 or k >= len(dims) for k in keep):
        raise DimensionError(f"keep indices {keep} out of range for {dims}")
    n = len(dims)
    t = a.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    if n > len(letters):
        raise DimensionError("too many tensor factors")
    row = list(letters[:n])
    col = [letters[i] if i not in keep else letters[i].upper() for i in range(n)]
    out = [row[k] for k in keep] + [col[k] for k in keep]
    t = np.einsum("".join(row) + "".join(col) + "->" + "".join(out), t)
    d_keep = int(np.prod([dims[k] for k in keep])) if keep else 1
    return t.reshape(d_keep, d_keep)


def embed_operator(op, dims, targets):
    """Lift ``op`` acting on factors ``targets`` to the full space ``dims``.

    ``op`` is ordered like ``targets`` (so ``targets=(2, 0)`` means op acts on
    factor 2 (x) factor 0 in that order).
    """
    dims = tuple(int(d) for d in dims)
    targets = [int(t) for t in targets]
    if len(set(targets)) != len(targets):
        raise DimensionError(f"repeated target factors {targets}")
    d_t = int(np.prod([dims[t] for t in targets]))
    op = np.asarray(op, dtype=complex)
    if op.shape != (d_t, d_t):
        raise DimensionError(
            f"operator shape {op.shape} does not match targets of size {d_t}")
    rest = [i for i in range(len(dims)) if i not in targets]
    d_rest = int(np.prod([dims[i] for i in rest])) if rest else 1
    full = np.kron(op, np.eye(d_rest, dtype=complex))
    order = targets + rest
    shape = [dims[i] for i in order]
    n = len(dims)
    t = full.reshape(shape + shape)
    inv = np.argsort(order)
    t = t.transpose(list(inv) + [n + i for i in inv])
    D = int(np.prod(dims))
    return t.reshape(D, D)


def is_hermitian(a, tol=1e-10):
    a = np.asarray(a)
    return a.shape[-1] == a.shape[-2] and np.max(np.abs(a - dag(a)), initial=0.0) <= tol


def check_psd(a, tol=1e-12):
    """Positivity test returning ``(ok, min_eigenvalue)``.

    Raises :class:`NonHermitianError` if ``a`` is not Hermitian within ``tol``.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"check_psd needs a square matrix, got {a.shape}")
    defect = np.max(np.abs(a - a.conj().T), initial=0.0)
    if defect > tol:
        raise NonHermitianError(f"matrix is not Hermitian: max |A - A^+| = {defect:.3e}")
    lam = float(np.linalg.eigvalsh(hermitian_part(a))[0])
    return lam >= -tol, lam


def min_eigenvalue(a):
    """Smallest eigenvalue of the Hermitian part (stack-aware)."""
    return np.linalg.eigvalsh(hermitian_part(np.asarray(a)))[..., 0]


def trace_distance(a, b):
    """Half the trace norm of ``a - b`` for Hermitian inputs (stack-aware)."""
    diff = hermitian_part(np.asarray(a) - np.asarray(b))
    return 0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff)), axis=-1)


def unitarity_defect(u):
    """Spectral norm of ``U^+ U - I`` (largest singular-value deviation)."""
    u = np.asarray(u, dtype=complex)
    return float(np.linalg.norm(u.conj().T @ u - np.eye(u.shape[1]), 2))


def random_density(dim, rng, rank=None):
    """Random density matrix from the induced (Ginibre) measure."""
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_unitary(dim, rng):
    """Haar-random unitary via QR of a Ginibre matrix."""
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_hermitian(dim, rng, scale=1.0):
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * 0.5 * (g + g.conj().T)


def random_operator(dim, rng, scale=1.0):
    return scale * (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)


def apply_operator(op, kets, dims, targets):
    """Apply ``op`` (ordered like ``targets``) to state vectors on ``dims``.

    ``kets`` has shape ``(..., prod(dims))``; leading axes are batch axes.
    """
    dims = tuple(int(d) for d in dims)
    targets = [int(t) for t in targets]
    kets = np.asarray(kets, dtype=complex)
    batch = kets.shape[:-1]
    nb = len(batch)
    t = kets.reshape(batch + dims)
    d_t = [dims[i] for i in targets]
    op_t = np.asarray(op, dtype=complex).reshape(d_t + d_t)
    k = len(targets)
    axes = [nb + i for i in targets]
    out = np.tensordot(t, op_t, axes=(axes, list(range(k, 2 * k))))
    # tensordot appends the op's output axes at the end; move them back
    rest = [i for i in range(nb + len(dims)) if i not in axes]
    perm = [0] * (nb + len(dims))
    for pos, ax in enumerate(rest):
        perm[ax] = pos
    for j, ax in enumerate(axes):
        perm[ax] = len(rest) + j
    out = out.transpose(perm)
    return out.reshape(batch + (int(np.prod(dims)),))
