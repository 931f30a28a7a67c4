"""Dense operator algebra for multi-qubit systems.

Conventions used throughout the package:

* Site 0 is the leftmost tensor factor; ``embed``/``kron`` are the only
  sanctioned ways to place operators on a lattice of qubits.
* The Rydberg state is the sigma_z = +1 eigenstate (first basis vector of
  each qubit), the electronic ground state is sigma_z = -1.
* Everything is dense complex128.  Variational clusters never exceed five
  sites, where dense is both simplest and fastest; the only large-system
  code path (the trajectory solver) works on state vectors and never builds
  matrices of the full Hilbert-space dimension.
"""

import numpy as np

HERM_TOL = 1e-10

_PAULI = {
    "0": np.eye(2, dtype=complex),
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}
for _m in _PAULI.values():
    _m.setflags(write=False)

#: Index order of the Pauli basis used for coefficient tensors.
PAULI_AXES = ("0", "x", "y", "z")

SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)  # |g><r|
SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_MINUS.setflags(write=False)
SIGMA_PLUS.setflags(write=False)


def pauli(axis):
    """Return the 2x2 Pauli matrix for ``axis`` in {0, 'x', 'y', 'z'}.

    Integer axes 0..3 are accepted in the order (identity, x, y, z).
    """
    if isinstance(axis, (int, np.integer)):
        try:
            axis = PAULI_AXES[axis]
        except IndexError:
            raise ValueError(f"pauli axis out of range: {axis}") from None
    key = str(axis)
    if key not in _PAULI:
        raise ValueError(f"unknown pauli axis {axis!r}")
    return _PAULI[key]


def kron(a, b):
    """Tensor product with ``a`` as the leftmost (site-0-side) factor."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise ValueError("kron expects square matrices")
    return np.kron(a, b)


def kron_all(ops):
    """Tensor product of a sequence of square matrices, left to right."""
    out = np.eye(1, dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def embed(op, site, n_sites):
    """Place a single-qubit operator on ``site`` of an ``n_sites`` register.

    All other sites carry the identity, consistent with the kron ordering.
    """
    op = np.asarray(op, dtype=complex)
    if op.shape != (2, 2):
        raise ValueError("embed expects a 2x2 operator")
    if not 0 <= site < n_sites:
        raise ValueError(f"site {site} out of range for {n_sites} sites")
    eye_left = np.eye(2**site, dtype=complex)
    eye_right = np.eye(2 ** (n_sites - site - 1), dtype=complex)
    return np.kron(np.kron(eye_left, op), eye_right)


def insert_site_operator(op, position, reduced, n_sites):
    """Insert a 2x2 operator at ``position`` into an (n_sites-1)-site matrix.

    ``reduced`` is a general operator on the remaining sites (in order); the
    result acts on ``n_sites`` qubits.  Unlike ``embed`` this works for
    non-product ``reduced``.
    """
    op = np.asarray(op, dtype=complex)
    reduced = np.asarray(reduced, dtype=complex)
    if op.shape != (2, 2):
        raise ValueError("insert_site_operator expects a 2x2 operator")
    if not 0 <= position < n_sites:
        raise ValueError(f"position {position} out of range")
    d_pre = 2**position
    d_post = 2 ** (n_sites - position - 1)
    if reduced.shape != (d_pre * d_post, d_pre * d_post):
        raise ValueError("reduced operator has wrong dimension")
    red = reduced.reshape(d_pre, d_post, d_pre, d_post)
    out = np.einsum("aAbB,ij->aiAbjB", red, op)
    dim = 2**n_sites
    return out.reshape(dim, dim)


def partial_trace(rho, keep, n_sites=None):
    """Trace out all sites not in ``keep`` (a sorted list of site indices)."""
    rho = np.asarray(rho)
    dim = rho.shape[0]
    if n_sites is None:
        n_sites = dim.bit_length() - 1
    if dim != 2**n_sites or rho.shape != (dim, dim):
        raise ValueError("rho is not a square matrix on a qubit register")
    keep = list(keep)
    if not keep or keep != sorted(set(keep)):
        raise ValueError("keep must be a nonempty sorted list of distinct sites")
    if keep[0] < 0 or keep[-1] >= n_sites:
        raise ValueError("keep indices out of range")
    tensor = rho.reshape([2] * (2 * n_sites))
    # Trace axis pairs from the highest site index down so positions stay valid.
    removed = 0
    for site in range(n_sites - 1, -1, -1):
        if site in keep:
            continue
        remaining = n_sites - removed
        tensor = np.trace(tensor, axis1=site, axis2=site + remaining)
        removed += 1
    d = 2 ** len(keep)
    return np.ascontiguousarray(tensor.reshape(d, d))


def is_hermitian(a, tol=HERM_TOL):
    a = np.asarray(a)
    return np.max(np.abs(a - a.conj().T)) <= tol


def hermitian_eig(a, tol=HERM_TOL):
    """Eigendecomposition of a Hermitian matrix.

    Returns ascending eigenvalues and the unitary of column eigenvectors.
    The input is symmetrized before decomposition to absorb roundoff from
    repeated integrator steps; inputs farther than ``tol`` from Hermitian
    are rejected.
    """
    a = np.asarray(a, dtype=complex)
    if not is_hermitian(a, tol):
        raise ValueError("hermitian_eig requires a Hermitian matrix")
    sym = 0.5 * (a + a.conj().T)
    vals, vecs = np.linalg.eigh(sym)
    return vals, vecs


def trace_norm(a, tol=HERM_TOL):
    """Sum of absolute eigenvalues of a Hermitian matrix."""
    a = np.asarray(a, dtype=complex)
    if not is_hermitian(a, tol):
        raise ValueError("trace_norm requires a Hermitian matrix")
    vals = np.linalg.eigvalsh(0.5 * (a + a.conj().T))
    return float(np.sum(np.abs(vals)))


def assert_density_matrix(rho, n_sites=None, herm_tol=1e-12, trace_tol=1e-10, psd_tol=None):
    """Validate the density-matrix invariants, raising ValueError on failure.

    ``psd_tol`` enables the positivity check (exact-solver outputs must be
    PSD to -1e-9; variational reduced states are allowed to dip slightly
    below zero and should pass a looser tolerance).
    """
    rho = np.asarray(rho)
    dim = rho.shape[0]
    if n_sites is not None and dim != 2**n_sites:
        raise ValueError(f"dimension {dim} does not match {n_sites} sites")
    if np.max(np.abs(rho - rho.conj().T)) > herm_tol:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > trace_tol or abs(np.trace(rho).imag) > trace_tol:
        raise ValueError("density matrix trace differs from 1")
    if psd_tol is not None:
        lo = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
        if lo < -psd_tol:
            raise ValueError(f"density matrix has eigenvalue {lo} < -{psd_tol}")
    return rho
