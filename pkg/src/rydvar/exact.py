"""Reference solvers for the full quantum master equation.

Two solvers live here:

* a dense implicit-midpoint integrator,
    rho(t+tau) = rho(t) + tau/2 L[rho(t) + rho(t+tau)],
  solved either through an explicitly assembled superoperator (dimension
  <= 64, factorized once since the generator is time independent) or by
  fixed-point iteration, which converges for tau*||L|| < 2;

* a stochastic quantum-trajectory unraveling with the effective
  non-Hermitian Hamiltonian H - (i/2) sum_i c_i^+ c_i, first-order
  waiting-time jump detection with bisection refinement, and sparse
  (CSR) application of H so that the 4x4-lattice case never touches a
  2^16 x 2^16 matrix.

Trajectories are independent: each draws from an RNG stream derived from
(seed, trajectory index), so results are bit-identical for a fixed seed
regardless of batching or worker count.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from . import model, qops
from .model import ModelParams, Lattice, apply_liouvillian, build_hamiltonian
from .qops import SIGMA_MINUS, SIGMA_PLUS, embed, partial_trace, trace_norm

SUPEROP_MAX_DIM = 64


@dataclass(frozen=True)
class MidpointConfig:
    tau: float = 0.01
    solver_tol: float = 1e-10
    max_linear_iters: int = 200

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class TrajectoryConfig:
    n_traj: int
    seed: int = 0
    dt: float = 0.005
    t_final: float = 10.0
    record_stride: int = 10
    batch_size: int = 128
    workers: int = 1

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be at least 1")
        if self.dt <= 0 or self.t_final <= 0:
            raise ValueError("dt and t_final must be positive")


def liouvillian_superoperator(params, sites, bonds):
    """Dense superoperator matrix of the Lindblad generator (row-major vec)."""
    n = len(list(sites))
    dim = 2**n
    h = build_hamiltonian(params, sites, bonds)
    eye = np.eye(dim, dtype=complex)
    sup = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for i in range(n):
        sm = embed(SIGMA_MINUS, i, n)
        num = embed(SIGMA_PLUS @ SIGMA_MINUS, i, n)
        sup += params.gamma * (
            np.kron(sm, sm.conj())
            - 0.5 * (np.kron(num, eye) + np.kron(eye, num.T))
        )
    return sup


def superop_from_apply(apply_fn, dim):
    """Assemble any linear map rho -> apply_fn(rho) as a dim^2 x dim^2 matrix."""
    sup = np.zeros((dim * dim, dim * dim), dtype=complex)
    unit = np.zeros((dim, dim), dtype=complex)
    for j in range(dim):
        for k in range(dim):
            unit[j, k] = 1.0
            sup[:, j * dim + k] = apply_fn(unit).reshape(-1)
            unit[j, k] = 0.0
    return sup


class MidpointSolver:
    """Prefactorized implicit-midpoint stepper for a fixed superoperator."""

    def __init__(self, superop, tau):
        n2 = superop.shape[0]
        self.forward = np.eye(n2) + 0.5 * tau * superop
        self.lu = scipy.linalg.lu_factor(np.eye(n2) - 0.5 * tau * superop)
        self.dim = int(round(np.sqrt(n2)))

    def step(self, rho):
        vec = self.forward @ rho.reshape(-1)
        out = scipy.linalg.lu_solve(self.lu, vec).reshape(self.dim, self.dim)
        return 0.5 * (out + out.conj().T)


def midpoint_step(rho, generator, cfg):
    """One implicit-midpoint step with a generic generator callable.

    Solves rho' = rho + tau/2 (L rho + L rho') by fixed-point iteration to
    ``cfg.solver_tol`` in trace norm.  Raises RuntimeError when the iteration
    fails to contract, which signals that tau is too large for the spectral
    radius of the generator.
    """
    rho = np.asarray(rho, dtype=complex)
    half = 0.5 * cfg.tau
    lrho = generator(rho)
    base = rho + half * lrho
    nxt = base + half * lrho  # explicit Euler start
    for _ in range(cfg.max_linear_iters):
        new = base + half * generator(nxt)
        diff = new - nxt
        diff = 0.5 * (diff + diff.conj().T)  # generator preserves Hermiticity
        delta = float(np.sum(np.abs(np.linalg.eigvalsh(diff))))
        nxt = new
        if delta <= cfg.solver_tol:
            return 0.5 * (nxt + nxt.conj().T)
    raise RuntimeError(
        "implicit midpoint fixed-point iteration did not converge; "
        "tau is too large for the generator's spectral radius"
    )


@dataclass
class ExactRun:
    """Dense integration record: site-averaged density per time step."""

    times: np.ndarray
    n_r: np.ndarray
    rho_final: np.ndarray
    pair_states: list = None


def evolve_exact(rho0, params, lattice, t_final, cfg=None, keep_pair=None):
    """Integrate the full master equation on a small lattice.

    Records (t, n_r) at every step.  ``keep_pair`` optionally collects the
    reduced two-site density matrix of the given site pair at every step.
    """
    cfg = cfg or MidpointConfig()
    n = lattice.n_sites
    if n > 10:
        raise ValueError("dense evolution is limited to small lattices (<= 10 sites)")
    dim = 2**n
    rho = np.asarray(rho0, dtype=complex).copy()
    if rho.shape != (dim, dim):
        raise ValueError("initial state dimension does not match the lattice")

    if dim <= SUPEROP_MAX_DIM:
        sup = liouvillian_superoperator(params, range(n), lattice.bonds)
        solver = MidpointSolver(sup, cfg.tau)
        step = solver.step
    else:
        h = build_hamiltonian(params, range(n), lattice.bonds)
        sms = [embed(SIGMA_MINUS, i, n) for i in range(n)]
        nums = [embed(SIGMA_PLUS @ SIGMA_MINUS, i, n) for i in range(n)]

        def generator(x):
            out = -1j * (h @ x - x @ h)
            for sm, num in zip(sms, nums):
                out += params.gamma * (sm @ x @ sm.conj().T - 0.5 * (num @ x + x @ num))
            return out

        def step(x):
            return midpoint_step(x, generator, cfg)

    n_steps = int(round(t_final / cfg.tau))
    times = np.arange(n_steps + 1) * cfg.tau
    n_r = np.empty(n_steps + 1)
    pairs = [] if keep_pair is not None else None
    n_r[0] = model.rydberg_density(rho, n)
    if pairs is not None:
        pairs.append(partial_trace(rho, sorted(keep_pair), n))
    for k in range(1, n_steps + 1):
        rho = step(rho)
        n_r[k] = model.rydberg_density(rho, n)
        if pairs is not None:
            pairs.append(partial_trace(rho, sorted(keep_pair), n))
    return ExactRun(times=times, n_r=n_r, rho_final=rho, pair_states=pairs)


# ---------------------------------------------------------------------------
# quantum trajectories
# ---------------------------------------------------------------------------


class _TrajectoryEngine:
    """Sparse effective-Hamiltonian machinery shared by all trajectories."""

    def __init__(self, params, lattice):
        self.params = params
        self.n = lattice.n_sites
        dim = 2**self.n
        self.dim = dim
        idx = np.arange(dim)
        self.masks = [1 << (self.n - 1 - i) for i in range(self.n)]
        z = np.empty((self.n, dim))
        for i, m in enumerate(self.masks):
            z[i] = np.where(idx & m, -1.0, 1.0)
        self.z = z
        self.ups = 0.5 * (z + 1.0)  # per-site rydberg projector diagonals
        diag = np.zeros(dim, dtype=complex)
        if params.delta != 0.0:
            diag += 0.5 * params.delta * z.sum(axis=0)
        for a, b in lattice.bonds:
            diag += 0.25 * params.v * z[a] * z[b]
        diag += -0.5j * params.gamma * self.ups.sum(axis=0)

        rows = [idx]
        cols = [idx]
        vals = [diag]
        for m in self.masks:
            rows.append(idx)
            cols.append(idx ^ m)
            vals.append(np.full(dim, 0.5 * params.omega, dtype=complex))
        self.heff = scipy.sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(dim, dim),
        )

    def deriv(self, psi):
        return -1j * (self.heff @ psi)

    def rk4(self, psi, dt):
        k1 = self.deriv(psi)
        k2 = self.deriv(psi + 0.5 * dt * k1)
        k3 = self.deriv(psi + 0.5 * dt * k2)
        k4 = self.deriv(psi + dt * k3)
        return psi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def apply_jump(self, psi, site):
        mask = self.masks[site]
        out = np.zeros_like(psi)
        src = np.nonzero(self.ups[site] > 0.5)[0]  # rydberg components of this site
        out[src ^ mask] = psi[src]
        norm = np.linalg.norm(out)
        return out / norm

    def jump_weights(self, psi):
        prob = np.abs(psi) ** 2
        return self.params.gamma * (self.ups @ prob)

    def n_r_of(self, psi):
        prob = np.abs(psi) ** 2
        return float(self.ups.sum(axis=0) @ prob) / (self.n * float(prob.sum()))

    def advance_single(self, psi, span, r, rng, jump_times=None, t_now=0.0):
        """Advance one unnormalized state by ``span``, handling any jumps."""
        remaining = span
        while remaining > 1e-15 * span:
            cand = self.rk4(psi, remaining)
            if np.vdot(cand, cand).real >= r:
                return cand, r
            lo, hi = 0.0, remaining
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                trial = self.rk4(psi, mid)
                if np.vdot(trial, trial).real >= r:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-13 * span:
                    break
            t_jump = 0.5 * (lo + hi)
            at_jump = self.rk4(psi, t_jump)
            weights = self.jump_weights(at_jump)
            total = weights.sum()
            xi = rng.uniform() * total
            site = int(np.searchsorted(np.cumsum(weights), xi))
            site = min(site, self.n - 1)
            psi = self.apply_jump(at_jump, site)
            if jump_times is not None:
                jump_times.append(t_now + (span - remaining) + t_jump)
            r = rng.uniform()
            remaining = remaining - t_jump
        return psi, r


def _initial_state(engine, initial_index):
    psi = np.zeros(engine.dim, dtype=complex)
    psi[engine.dim - 1 if initial_index is None else initial_index] = 1.0
    return psi


def _run_chunk(args):
    """Integrate one fixed chunk of trajectories in lockstep.

    The whole chunk shares the batched RK4 propagation; a trajectory whose
    squared norm falls below its waiting-time threshold within a step is
    re-integrated individually from the pre-step state (bisection jump
    refinement), then rejoins the batch.
    """
    params, lattice, cfg, indices, initial_index, collect_jumps = args
    engine = _TrajectoryEngine(params, lattice)
    n_steps = int(round(cfg.t_final / cfg.dt))
    rec = list(range(0, n_steps + 1, cfg.record_stride))
    if rec[-1] != n_steps:
        rec.append(n_steps)
    rec_pos = {k: j for j, k in enumerate(rec)}
    t_rec = np.array(rec) * cfg.dt

    nb = len(indices)
    rngs = [np.random.default_rng([cfg.seed, k]) for k in indices]
    psi = np.tile(_initial_state(engine, initial_index)[:, None], (1, nb))
    thresholds = np.array([rng.uniform() for rng in rngs])
    jumps = [[] for _ in indices] if collect_jumps else None

    curves = np.empty((len(rec), nb))
    prob = np.abs(psi) ** 2
    curves[0] = (engine.ups.sum(axis=0) @ prob) / (engine.n * prob.sum(axis=0))
    for step in range(1, n_steps + 1):
        pre = psi
        psi = engine.rk4(psi, cfg.dt)
        norms2 = np.einsum("ib,ib->b", psi.conj(), psi).real
        for b in np.nonzero(norms2 < thresholds)[0]:
            col, thresholds[b] = engine.advance_single(
                pre[:, b].copy(),
                cfg.dt,
                thresholds[b],
                rngs[b],
                jump_times=jumps[b] if collect_jumps else None,
                t_now=(step - 1) * cfg.dt,
            )
            psi[:, b] = col
        if step in rec_pos:
            prob = np.abs(psi) ** 2
            curves[rec_pos[step]] = (engine.ups.sum(axis=0) @ prob) / (
                engine.n * prob.sum(axis=0)
            )
    sum_nr = curves.sum(axis=1)
    sum_nr2 = (curves**2).sum(axis=1)
    return t_rec, sum_nr, sum_nr2, nb, jumps


@dataclass
class TrajectoryRun:
    """Ensemble average of the Rydberg density with standard errors."""

    times: np.ndarray
    n_r: np.ndarray
    stderr: np.ndarray
    n_traj: int
    jump_times: list = None


def trajectory_run(params, lattice, cfg, initial_index=None, collect_jumps=False):
    """Average n_r(t) over ``cfg.n_traj`` quantum-trajectory unravelings.

    Deterministic for a fixed seed; trajectories are distributed over
    ``cfg.workers`` processes in fixed chunks whose partial sums are reduced
    in chunk order, so worker count does not change the result.
    """
    if lattice.n_sites > 16:
        raise ValueError("trajectory solver is limited to 16 sites")
    chunk = max(1, min(cfg.batch_size, cfg.n_traj))
    chunks = [range(lo, min(lo + chunk, cfg.n_traj)) for lo in range(0, cfg.n_traj, chunk)]
    args = [(params, lattice, cfg, list(c), initial_index, collect_jumps) for c in chunks]

    if cfg.workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_chunk, args))
    else:
        results = [_run_chunk(a) for a in args]

    t_rec = results[0][0]
    sum_nr = np.zeros_like(results[0][1])
    sum_nr2 = np.zeros_like(results[0][2])
    count = 0
    jumps = [] if collect_jumps else None
    for t, s1, s2, c, jl in results:
        sum_nr += s1
        sum_nr2 += s2
        count += c
        if collect_jumps:
            jumps.extend(jl)
    mean = sum_nr / count
    if count > 1:
        var = np.maximum(sum_nr2 / count - mean**2, 0.0) * count / (count - 1)
        stderr = np.sqrt(var / count)
    else:
        stderr = np.zeros_like(mean)
    return TrajectoryRun(times=t_rec, n_r=mean, stderr=stderr, n_traj=count, jump_times=jumps)
