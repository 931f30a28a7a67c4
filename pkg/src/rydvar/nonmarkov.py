"""Time-local generator reconstruction and non-Markovianity measures.

The reduced dynamics of a two-site subsystem embedded in the variational
environment is tomographically probed: a complete set of 16 initial states
is propagated by two implicit-midpoint steps, the derivative is formed by
the central difference

    drho/dt (t+tau) = [rho(t+2 tau) - rho(t)] / (2 tau),

and the generator is solved from drho = sum_{ab} c_{ab} G_a rho G_b over
the orthonormal Hermitian basis G_a = sigma_mu x sigma_nu / 2.  Canonical
rates and jump operators follow from the eigendecomposition of the
traceless block of c; the non-Markovianity

    f(t) = 1/2 sum_k (|gamma_k| - gamma_k)

is the total weight of negative rates.  Correlation witnesses (linear
entropy, QLMI, von Neumann mutual information) are computed directly from
the two-site state.

Note the finite-difference pairing of drho(t+tau) with rho(t+tau) carries
an O(tau^2) distortion of the reconstructed generator even for exactly
Markovian dynamics, so resolving "f = 0" below a threshold eps requires
tau of order sqrt(eps).
"""

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import model, qops, variational
from .model import BoundaryField, DanglingBond
from .qops import kron, partial_trace, pauli

_AXES = "0xyz"


def tomography_basis():
    """The 16 two-site states rho^{00} = 1/4 and rho^{mn} = (1 + s_m x s_n)/4."""
    states = []
    eye = np.eye(4, dtype=complex)
    for m, n in itertools.product(range(4), repeat=2):
        if m == 0 and n == 0:
            states.append(eye / 4.0)
        else:
            states.append((eye + kron(pauli(m), pauli(n))) / 4.0)
    return states


def generator_basis():
    """Orthonormal Hermitian basis G_a = sigma_mu x sigma_nu / 2 (Tr G_a G_b = delta)."""
    return [kron(pauli(m), pauli(n)) / 2.0 for m, n in itertools.product(range(4), repeat=2)]


@dataclass
class GeneratorMatrix:
    """Coefficients c_{ab} of drho = sum c_{ab} G_a rho G_b."""

    c: np.ndarray
    residual: float
    condition: float


@dataclass
class GeneratorDecomposition:
    """Canonical form: effective Hamiltonian plus (rate, jump) channels.

    Jump operators are traceless and orthonormal; rates may be negative for
    non-Markovian dynamics.
    """

    h_eff: np.ndarray
    rates: np.ndarray
    jumps: list

    def apply(self, rho):
        out = -1j * (self.h_eff @ rho - rho @ self.h_eff)
        for rate, L in zip(self.rates, self.jumps):
            out += rate * (L @ rho @ L.conj().T - 0.5 * (L.conj().T @ L @ rho + rho @ L.conj().T @ L))
        return out


def embedded_generator(mparams, env_params, geometry=None):
    """Reduced Liouvillian of a bonded site pair inside the frozen environment.

    ``env_params`` is a variational parameter set (``CorrelatedParams`` or
    ``ProductParams``); its single-site state and, when present, its bond
    correlations enter the dangling-bond reduction.  Returns a function
    rho -> L rho on the 4-dimensional two-site space.
    """
    geom = geometry or variational._default_geometry("product")
    if geom.n_sites != 2:
        raise ValueError("the embedded subsystem must be a two-site cluster")
    manifold = "correlated" if isinstance(env_params, variational.CorrelatedParams) else "product"
    boundary = variational.boundary_field_from_params(env_params, geom, manifold)

    def apply(rho):
        return model.apply_liouvillian(mparams, [0, 1], geom.interior, boundary, rho)

    return apply


def propagate_embedded(rho, mparams, env_then, env_now, tau, geometry=None):
    """One implicit-midpoint step of the embedded two-site system.

    The generator endpoints use the environment at the step's start
    (``env_then``) and end (``env_now``); the 16x16 superoperator makes the
    implicit solve exact.
    """
    from .exact import superop_from_apply

    gen_then = superop_from_apply(embedded_generator(mparams, env_then, geometry), 4)
    gen_now = superop_from_apply(embedded_generator(mparams, env_now, geometry), 4)
    eye = np.eye(16)
    rhs = (eye + 0.5 * tau * gen_then) @ np.asarray(rho, dtype=complex).reshape(-1)
    out = np.linalg.solve(eye - 0.5 * tau * gen_now, rhs).reshape(4, 4)
    return 0.5 * (out + out.conj().T)


def derivative_fd(rho_t, rho_t2tau, tau):
    """Central-difference derivative at t+tau from states at t and t+2 tau."""
    rho_t = np.asarray(rho_t, dtype=complex)
    rho_t2tau = np.asarray(rho_t2tau, dtype=complex)
    if rho_t.shape != rho_t2tau.shape:
        raise ValueError("state dimensions differ")
    out = (rho_t2tau - rho_t) / (2.0 * tau)
    return 0.5 * (out + out.conj().T)


def reconstruct_generator(pairs, cond_warn=1e8):
    """Solve for c_{ab} from 16 (rho, rho-dot) pairs by least squares.

    The pairs must span the operator space (the tomography basis does);
    rank deficiency raises, and a condition number above ``cond_warn`` is
    reported in the result for the caller to inspect.
    """
    G = generator_basis()
    blocks = []
    rhs = []
    for rho, rdot in pairs:
        rho = np.asarray(rho, dtype=complex)
        block = np.empty((16, 256), dtype=complex)
        for a in range(16):
            ga_rho = G[a] @ rho
            for b in range(16):
                block[:, a * 16 + b] = (ga_rho @ G[b]).reshape(-1)
        blocks.append(block)  # 16 scalar equations per tomography state
        rhs.append(np.asarray(rdot, dtype=complex).reshape(-1))
    a_mat = np.vstack(blocks)
    b_vec = np.concatenate(rhs)
    sol, _res, rank, sv = np.linalg.lstsq(a_mat, b_vec, rcond=None)
    if rank < 256:
        raise ValueError("tomography inputs are rank deficient")
    condition = float(sv[0] / sv[-1])
    residual = 0.0
    for block, b in zip(blocks, rhs):
        diff = (block @ sol - b).reshape(4, 4)
        residual = max(residual, float(np.sum(np.abs(np.linalg.eigvalsh(diff + diff.conj().T)))) / 2)
    c = sol.reshape(16, 16)
    c = 0.5 * (c + c.conj().T)
    return GeneratorMatrix(c=c, residual=residual, condition=condition)


def canonical_rates(gen):
    """Canonical decomposition of a reconstructed generator.

    Splits the identity-coupled row/column into the effective Hamiltonian
    and anticommutator parts, then eigendecomposes the 15x15 traceless
    block; eigenvalues are the canonical rates (the basis is orthonormal,
    so no extra scaling applies), eigenvectors assemble the jump operators.
    """
    c = np.asarray(gen.c if isinstance(gen, GeneratorMatrix) else gen, dtype=complex)
    if c.shape != (16, 16):
        raise ValueError("generator matrix must be 16x16")
    if np.max(np.abs(c - c.conj().T)) > 1e-8:
        raise ValueError("generator matrix must be Hermitian")
    c = 0.5 * (c + c.conj().T)
    G = generator_basis()
    # B collects the couplings of the traceless basis to G_0 = 1/2:
    # c_{k0} G_k rho G_0 + c_{0k} G_0 rho G_k = (B rho + rho B^+)/2 with
    # B = c_{00} G_0 / 2 + sum_k c_{k0} G_k  (the identity block folds in).
    b_op = 0.5 * c[0, 0] * G[0]
    for k in range(1, 16):
        b_op = b_op + c[k, 0] * G[k]
    s_part = (b_op - b_op.conj().T) / 2j
    h_eff = -0.5 * s_part
    h_eff = h_eff - (np.trace(h_eff) / 4.0) * np.eye(4)

    block = c[1:, 1:]
    rates, vecs = np.linalg.eigh(0.5 * (block + block.conj().T))
    jumps = []
    for k in range(15):
        L = np.zeros((4, 4), dtype=complex)
        for j in range(15):
            L += vecs[j, k] * G[j + 1]
        jumps.append(L)
    order = np.argsort(rates)[::-1]
    rates = rates[order]
    jumps = [jumps[k] for k in order]
    return GeneratorDecomposition(h_eff=h_eff, rates=np.asarray(rates, dtype=float), jumps=jumps)


def non_markovianity(decomp):
    """f = 1/2 sum_k (|gamma_k| - gamma_k): total weight of negative rates."""
    rates = np.asarray(decomp.rates if isinstance(decomp, GeneratorDecomposition) else decomp)
    return float(0.5 * np.sum(np.abs(rates) - rates))


def linear_entropy(rho):
    """S_l = 1 - Tr rho^2."""
    rho = np.asarray(rho)
    return float(1.0 - np.real(np.trace(rho @ rho)))


def qlmi(rho_ij):
    """Quantum linear mutual information S_l(rho_i x rho_j) - S_l(rho_ij)."""
    rho_ij = np.asarray(rho_ij, dtype=complex)
    if rho_ij.shape != (4, 4):
        raise ValueError("qlmi expects a two-site state")
    rho_i = partial_trace(rho_ij, [0], 2)
    rho_j = partial_trace(rho_ij, [1], 2)
    return linear_entropy(kron(rho_i, rho_j)) - linear_entropy(rho_ij)


def _vn_entropy(rho):
    vals = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    vals = vals[vals > 1e-14]
    return float(-np.sum(vals * np.log(vals)))


def von_neumann_mi(rho_ij):
    """S(rho_i) + S(rho_j) - S(rho_ij), natural log, 0 log 0 = 0."""
    rho_ij = np.asarray(rho_ij, dtype=complex)
    if rho_ij.shape != (4, 4):
        raise ValueError("von_neumann_mi expects a two-site state")
    rho_i = partial_trace(rho_ij, [0], 2)
    rho_j = partial_trace(rho_ij, [1], 2)
    return _vn_entropy(rho_i) + _vn_entropy(rho_j) - _vn_entropy(rho_ij)


@dataclass
class NonMarkovRecord:
    t: float
    f: float
    qlmi: float
    vn_mi: float
    condition: float


def analyze_at(run, index, geometry=None):
    """Full pipeline at one stored step of a variational run.

    Tomography states start at step ``index - 1``; two embedded midpoint
    steps with the environment tracked at steps index-1, index, index+1
    give the central-difference derivative at step ``index``, where the
    generator is reconstructed and decomposed.  The three endpoint
    generators are assembled once and shared by all 16 propagations.
    """
    from .exact import superop_from_apply

    if index < 1 or index + 1 >= len(run.times):
        raise ValueError("index must have stored neighbors on both sides")
    geom = geometry or pair_geometry_of(run)
    tau = run.tau
    env = [run.params_at(index - 1), run.params_at(index), run.params_at(index + 1)]
    sups = [superop_from_apply(embedded_generator(run.mparams, e, geom), 4) for e in env]
    eye = np.eye(16)
    solves = [
        scipy.linalg.lu_factor(eye - 0.5 * tau * sups[1]),
        scipy.linalg.lu_factor(eye - 0.5 * tau * sups[2]),
    ]
    forwards = [eye + 0.5 * tau * sups[0], eye + 0.5 * tau * sups[1]]

    pairs = []
    for rho0 in tomography_basis():
        v1 = scipy.linalg.lu_solve(solves[0], forwards[0] @ rho0.reshape(-1))
        v2 = scipy.linalg.lu_solve(solves[1], forwards[1] @ v1)
        rho1 = v1.reshape(4, 4)
        rho1 = 0.5 * (rho1 + rho1.conj().T)
        pairs.append((rho1, derivative_fd(rho0, v2.reshape(4, 4), tau)))
    gen = reconstruct_generator(pairs)
    decomp = canonical_rates(gen)
    p_mid = run.params_at(index)
    if run.manifold == "correlated":
        rho_var = p_mid.pair_state()
    else:
        site = p_mid.site_state()
        rho_var = kron(site, site)
    return NonMarkovRecord(
        t=float(run.times[index]),
        f=non_markovianity(decomp),
        qlmi=qlmi(rho_var),
        vn_mi=von_neumann_mi(rho_var),
        condition=gen.condition,
    )


def pair_geometry_of(run):
    """Two-site embedding geometry: a lattice bond with all its dangling bonds."""
    if run.geometry.n_sites == 2:
        return run.geometry
    if run.lattice is None:
        raise ValueError("run carries no lattice; pass an explicit pair geometry")
    a, b = run.lattice.bonds[0]
    return variational.geometry_for_sites(run.lattice, [a, b])


def nonmarkov_trace(run, sample_times=None, sample_dt=0.1, geometry=None):
    """(t, f, QLMI, I_VN) records along a completed variational run."""
    if sample_times is None:
        t_max = run.times[-2] if len(run.times) > 2 else run.times[-1]
        sample_times = np.arange(sample_dt, t_max + 1e-12, sample_dt)
    geom = geometry or pair_geometry_of(run)
    records = []
    for t in sample_times:
        index = int(round(float(t) / run.tau))
        if index < 1 or index + 1 >= len(run.times):
            continue
        records.append(analyze_at(run, index, geom))
    return records
