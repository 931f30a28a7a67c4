"""Variational integration of the master equation on restricted manifolds.

The density operator is parametrized either by a translationally invariant
product of single-site states (Bloch vector alpha) or by products augmented
with nearest-neighbor correlations C.  A time step minimizes the trace norm
of the implicit-midpoint residual

    || rho(t+tau) - rho(t) - tau/2 L[rho(t) + rho(t+tau)] ||_1

evaluated on a small representative cluster (one bond for the product
manifold, one three-site chain for the correlated one); interactions across
the cluster's dangling bonds enter through the exact reduction of the full
Liouvillian onto the cluster given the ansatz.  The minimized residual is
the per-step integration error and an upper-bound summand for the true
variational norm.

Free parameters: 3 for the product manifold, 9 for the correlated one
(Bloch vector plus the symmetric 3x3 correlation block; exchange symmetry
alpha_{mu nu} = alpha_{nu mu} is enforced, which also makes the marginal
consistency Tr_j rho_ij = rho_i structural).

The minimization uses derivative-free Nelder-Mead: the trace norm is
nonsmooth at eigenvalue crossings, and the parameter space is tiny.
"""

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import model, qops
from .model import BoundaryField, DanglingBond, cluster_neighbors
from .qops import kron, pauli

_AXES = "0xyz"

POS_TOL = 1e-6
PENALTY_WEIGHT = 1e3


@lru_cache(maxsize=8)
def _basis_stack(n_sites):
    """Stack of all n-site Pauli strings, shape (4**n, 2**n, 2**n)."""
    mats = [pauli(ax) for ax in _AXES]
    dim = 2**n_sites
    stack = np.empty((4**n_sites, dim, dim), dtype=complex)
    for flat, combo in enumerate(itertools.product(range(4), repeat=n_sites)):
        stack[flat] = qops.kron_all([mats[k] for k in combo])
    stack.setflags(write=False)
    return stack


def _to_matrix(coeff, stack):
    return np.tensordot(coeff, stack, axes=(0, 0))


def _to_coeff(mat, stack, n_sites):
    # Tr(B_a M) / 2^n; real for Hermiticity-preserving maps of Hermitian ops
    return np.tensordot(stack, mat, axes=([1, 2], [1, 0])).real / 2**n_sites


def _disjoint_subsets(bonds):
    """All subsets of bonds in which no two bonds share a site."""
    subsets = [()]
    for k in range(1, len(bonds) + 1):
        for combo in itertools.combinations(bonds, k):
            sites = [s for b in combo for s in b]
            if len(sites) == len(set(sites)):
                subsets.append(combo)
    return subsets


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProductParams:
    """Single-site Bloch vector of the translationally invariant product state."""

    alpha: tuple

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.shape != (3,):
            raise ValueError("alpha must be a real 3-vector")
        if np.linalg.norm(a) > 0.5 + 1e-5:
            raise ValueError("|alpha| must not exceed 1/2 (positivity)")
        object.__setattr__(self, "alpha", tuple(a))

    def vector(self):
        return np.asarray(self.alpha, dtype=float)

    @staticmethod
    def from_vector(x):
        return ProductParams(alpha=tuple(np.asarray(x, dtype=float)[:3]))

    def site_state(self):
        rho = 0.5 * np.eye(2, dtype=complex)
        for a, ax in zip(self.alpha, "xyz"):
            rho += a * pauli(ax)
        return rho


@dataclass(frozen=True)
class CorrelatedParams:
    """Bloch vector plus symmetric nearest-neighbor correlation block.

    The two-site reduced state is rho_ij = rho_i (x) rho_j + C with
    C = sum_{mu nu in xyz} corr[mu, nu] sigma_mu (x) sigma_nu.
    """

    alpha: tuple
    corr: tuple

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        c = np.asarray(self.corr, dtype=float)
        if a.shape != (3,) or c.shape != (3, 3):
            raise ValueError("alpha must be a 3-vector and corr a 3x3 matrix")
        if np.max(np.abs(c - c.T)) > 1e-12:
            raise ValueError("corr must be symmetric (bond exchange symmetry)")
        object.__setattr__(self, "alpha", tuple(a))
        object.__setattr__(self, "corr", tuple(map(tuple, c)))

    def vector(self):
        a = np.asarray(self.alpha)
        c = np.asarray(self.corr)
        iu = np.triu_indices(3)
        return np.concatenate([a, c[iu]])

    @staticmethod
    def from_vector(x):
        x = np.asarray(x, dtype=float)
        c = np.zeros((3, 3))
        iu = np.triu_indices(3)
        c[iu] = x[3:9]
        c = c + c.T - np.diag(np.diag(c))
        return CorrelatedParams(alpha=tuple(x[:3]), corr=tuple(map(tuple, c)))

    @property
    def alpha2(self):
        """Full 4x4 coefficient tensor with alpha_00 = 1/4."""
        a = np.asarray(self.alpha)
        c = np.asarray(self.corr)
        out = np.empty((4, 4))
        out[0, 0] = 0.25
        out[0, 1:] = 0.5 * a
        out[1:, 0] = 0.5 * a
        out[1:, 1:] = np.outer(a, a) + c
        return out

    def site_state(self):
        return ProductParams(alpha=self.alpha).site_state()

    def pair_state(self):
        stack = _basis_stack(2)
        return _to_matrix(self.alpha2.reshape(-1), stack)

    def min_pair_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.pair_state())[0])


@dataclass
class DefectReport:
    """Outcome of one defect minimization."""

    value: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class OptimizerConfig:
    """Nelder-Mead settings for the per-step defect minimization."""

    xatol: float = 1e-9
    fatol: float = 1e-12
    max_evals: int = 5000
    restarts: int = 3
    restart_radius: float = 0.05
    simplex_scale: float = 0.01
    pos_tol: float = POS_TOL
    penalty: float = PENALTY_WEIGHT


# ---------------------------------------------------------------------------
# ansatz state construction
# ---------------------------------------------------------------------------


def build_product_state(params, n_sites):
    """Product density matrix of ``n_sites`` identical Bloch-vector states."""
    if isinstance(params, CorrelatedParams):
        params = ProductParams(alpha=params.alpha)
    site = params.site_state()
    return qops.kron_all([site] * n_sites)


def build_cluster_state(params, n_sites, bonds):
    """Correlated cluster state: sum over sets of disjoint interior bonds.

    Every term places C on its bonds and single-site states elsewhere; bond
    sets sharing a site are excluded, so correlations never overlap.
    """
    if not 2 <= n_sites <= 5:
        raise ValueError("cluster states support 2 to 5 sites")
    for a, b in bonds:
        if not (0 <= a < n_sites and 0 <= b < n_sites and a != b):
            raise ValueError(f"bond ({a},{b}) outside the cluster")
    site = np.zeros(4)
    site[0] = 0.5
    site[1:] = params.alpha
    cmat = np.zeros((4, 4))
    cmat[1:, 1:] = np.asarray(params.corr)
    coeff = np.zeros((4,) * n_sites)
    letters = "abcde"[:n_sites]
    for subset in _disjoint_subsets(list(bonds)):
        covered = {s for b in subset for s in b}
        operands = []
        subs = []
        for i, j in subset:
            operands.append(cmat)
            subs.append(letters[i] + letters[j])
        for k in range(n_sites):
            if k not in covered:
                operands.append(site)
                subs.append(letters[k])
        coeff += np.einsum(",".join(subs) + "->" + letters, *operands)
    return _to_matrix(coeff.reshape(-1), _basis_stack(n_sites))


# ---------------------------------------------------------------------------
# cluster geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterGeometry:
    """A cluster cut out of the lattice, in local tensor ordering.

    ``dangling`` aggregates equivalent dangling bonds per interior endpoint
    as (local site, count); in a translationally invariant state every
    dangling bond at the same endpoint contributes identically.
    ``multiplicity`` counts how many equivalent clusters tile the lattice
    (used when totaling the variational-norm bound).
    """

    sites: tuple
    interior: tuple
    dangling: tuple
    multiplicity: int = 1

    @property
    def n_sites(self):
        return len(self.sites)


def geometry_for_sites(lattice, sites, multiplicity=1):
    sites = list(sites)
    local = {s: i for i, s in enumerate(sites)}
    interior, dangling = cluster_neighbors(lattice, sites)
    counts = {}
    for inside, _outside in dangling:
        counts[local[inside]] = counts.get(local[inside], 0) + 1
    return ClusterGeometry(
        sites=tuple(sites),
        interior=tuple((local[a], local[b]) for a, b in interior),
        dangling=tuple(sorted(counts.items())),
        multiplicity=multiplicity,
    )


def representative_cluster(lattice, manifold):
    """Default cluster: whole lattice when tiny, else a bond / straight chain."""
    n = lattice.n_sites
    if manifold not in ("product", "correlated"):
        raise ValueError(f"unknown manifold {manifold!r}")
    if n <= (3 if manifold == "correlated" else 2) or (
        manifold == "correlated" and lattice.width < 3 and lattice.height < 3 and n <= 5
    ):
        sites = list(range(n))
        return geometry_for_sites(lattice, sites, multiplicity=1)
    if manifold == "product":
        a, b = lattice.bonds[0]
        return geometry_for_sites(lattice, [a, b])
    if lattice.width >= 3:
        sites = [lattice.site(0, c) for c in range(3)]
    elif lattice.height >= 3:
        sites = [lattice.site(r, 0) for r in range(3)]
    else:
        raise ValueError("no straight three-site chain fits this lattice")
    return geometry_for_sites(lattice, sites)


def pair_clusters(lattice):
    """All two-site (bond) clusters of the lattice."""
    return [geometry_for_sites(lattice, [a, b]) for a, b in lattice.bonds]


def chain_clusters(lattice):
    """All three-site path clusters i-j-k (straight on large lattices)."""
    adj = {}
    for a, b in lattice.bonds:
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    chains = set()
    for j in adj:
        for i, k in itertools.combinations(sorted(adj[j]), 2):
            chains.add((i, j, k))
    return [geometry_for_sites(lattice, list(c)) for c in sorted(chains)]


def boundary_field_from_params(params, geometry, manifold):
    """BoundaryField of a cluster with the exterior held at the ansatz."""
    alpha = np.asarray(params.alpha)
    corr = None
    if manifold == "correlated" and isinstance(params, CorrelatedParams):
        corr = tuple(map(tuple, np.asarray(params.corr)))
    entries = [
        DanglingBond(site=b, alpha_env=tuple(alpha), corr_env=corr, weight=w)
        for b, w in geometry.dangling
    ]
    return BoundaryField(dangling=tuple(entries))


# ---------------------------------------------------------------------------
# fast cluster operator
# ---------------------------------------------------------------------------


class ClusterOperator:
    """Reduced generator and ansatz states of one cluster, in Pauli coefficients.

    All linear maps are extracted numerically from the reference
    ``model.apply_liouvillian`` by applying it to the Pauli-string basis, so
    this fast path cannot drift from the reference implementation.
    Coefficient vectors of Hermitian operators are real, which keeps the
    whole evaluation in real arithmetic until the final trace norm.
    """

    def __init__(self, mparams, geometry, manifold):
        if manifold not in ("product", "correlated"):
            raise ValueError(f"unknown manifold {manifold!r}")
        self.mp = mparams
        self.geom = geometry
        self.manifold = manifold
        self.m = geometry.n_sites
        self.dim = 2**self.m
        self.nfree = 3 if manifold == "product" else 9
        self.stack = _basis_stack(self.m)
        nb = 4**self.m
        self._stack2d = np.ascontiguousarray(self.stack.reshape(nb, self.dim * self.dim))
        self._pair2d = np.ascontiguousarray(_basis_stack(2).reshape(16, 16))

        local_sites = list(range(self.m))
        closed = lambda rho: model.apply_liouvillian(  # noqa: E731
            mparams, local_sites, geometry.interior, None, rho
        )
        self.l_closed = np.empty((nb, nb))
        for a in range(nb):
            self.l_closed[:, a] = _to_coeff(closed(self.stack[a]), self.stack, self.m)

        # Dangling-bond maps: the reduction contributes
        #   (V/4) * weight * (-i)[sz_b, zbar*rho + sum_nu kappa_nu insert_b(sigma_nu, Tr_b rho)]
        # with zbar = 2 alpha_z and kappa_nu = 2 c_{nu z} of the environment.
        self.z_maps = []
        self.k_maps = []
        v = mparams.v
        for b, weight in geometry.dangling:
            szb = qops.embed(pauli("z"), b, self.m)
            pref = -0.25j * v * weight
            zmap = np.empty((nb, nb))
            for a in range(nb):
                mat = pref * (szb @ self.stack[a] - self.stack[a] @ szb)
                zmap[:, a] = _to_coeff(mat, self.stack, self.m)
            self.z_maps.append(zmap)
            if manifold == "correlated":
                keep = [i for i in local_sites if i != b]
                kmaps = []
                for ax in "xyz":
                    kmap = np.empty((nb, nb))
                    for a in range(nb):
                        marg = qops.partial_trace(self.stack[a], keep, self.m)
                        ins = qops.insert_site_operator(pauli(ax), b, marg, self.m)
                        mat = pref * (szb @ ins - ins @ szb)
                        kmap[:, a] = _to_coeff(mat, self.stack, self.m)
                    kmaps.append(kmap)
                self.k_maps.append(kmaps)
        # stacked view for single-call application: [closed, z_0.., (k_{0x},k_{0y},k_{0z}).. ]
        flat_maps = [self.l_closed] + self.z_maps
        for kmaps in self.k_maps:
            flat_maps.extend(kmaps)
        self._map_stack = np.ascontiguousarray(np.stack(flat_maps))
        self._n_groups = len(self.z_maps)

        # Broadcast plans for the ansatz coefficient tensor: per disjoint
        # bond subset, the factors (site vectors / correlation matrices)
        # reshaped onto their tensor axes.
        subsets = [()] if manifold == "product" else _disjoint_subsets(list(geometry.interior))
        self._plans = []
        for subset in subsets:
            covered = {s for bond in subset for s in bond}
            factors = []
            for i, j in subset:
                shape = [1] * self.m
                shape[i] = 4
                shape[j] = 4
                factors.append(("c", i, j, tuple(shape)))
            for k in range(self.m):
                if k not in covered:
                    shape = [1] * self.m
                    shape[k] = 4
                    factors.append(("s", k, None, tuple(shape)))
            self._plans.append(factors)

    # -- parameter handling ------------------------------------------------

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        alpha = x[:3]
        if self.manifold == "product":
            return alpha, np.zeros((3, 3))
        c = np.empty((3, 3))
        c[0, 0] = x[3]
        c[0, 1] = c[1, 0] = x[4]
        c[0, 2] = c[2, 0] = x[5]
        c[1, 1] = x[6]
        c[1, 2] = c[2, 1] = x[7]
        c[2, 2] = x[8]
        return alpha, c

    def params_of(self, x):
        alpha, c = self.unpack(x)
        if self.manifold == "product":
            return ProductParams(alpha=tuple(alpha))
        return CorrelatedParams(alpha=tuple(alpha), corr=tuple(map(tuple, c)))

    def initial_vector(self, alpha=(0.0, 0.0, -0.5)):
        x = np.zeros(self.nfree)
        x[:3] = alpha
        return x

    # -- states and generator ----------------------------------------------

    def _site_cmat(self, x):
        alpha, c = self.unpack(x)
        site = np.empty(4)
        site[0] = 0.5
        site[1:] = alpha
        cmat = np.zeros((4, 4))
        cmat[1:, 1:] = c
        return site, cmat

    def _coeff_from(self, site, cmat):
        out = np.zeros((4,) * self.m)
        for factors in self._plans:
            term = None
            for kind, i, j, shape in factors:
                f = site.reshape(shape) if kind == "s" else cmat.reshape(shape)
                term = f if term is None else term * f
            out += term
        return out.reshape(-1)

    def coeff(self, x):
        return self._coeff_from(*self._site_cmat(x))

    def state(self, x):
        return (self.coeff(x) @ self._stack2d).reshape(self.dim, self.dim)

    def pair_state(self, x):
        site, cmat = self._site_cmat(x)
        coeff = np.outer(site, site) + cmat
        return (coeff.reshape(-1) @ self._pair2d).reshape(4, 4)

    def _map_weights(self, site, cmat):
        g = self._n_groups
        w = np.empty(1 + g * (1 if self.manifold == "product" else 4))
        w[0] = 1.0
        if g:
            w[1 : 1 + g] = 2.0 * site[3]  # zbar of the environment
            if self.manifold == "correlated":
                kappa = 2.0 * cmat[1:, 3]  # kappa_nu = 2 c_{nu z}
                w[1 + g :] = np.tile(kappa, g)
        return w

    def apply_generator(self, x, coeff):
        """Reduced Liouvillian at environment parameters ``x``, on coefficients."""
        site, cmat = self._site_cmat(x)
        if self.mp.v == 0.0 or not self.z_maps:
            return self.l_closed @ coeff
        return self._map_weights(site, cmat) @ (self._map_stack @ coeff)

    def liouville(self, x, rho):
        """Matrix-space view of the reduced generator (for cross-checks)."""
        coeff = _to_coeff(rho, self.stack, self.m)
        if np.max(np.abs(rho - _to_matrix(coeff, self.stack))) > 1e-9:
            raise ValueError("liouville expects a Hermitian operator")
        return _to_matrix(self.apply_generator(x, coeff), self.stack)

    # -- defect ------------------------------------------------------------

    def begin_step(self, x_now, tau):
        c_now = self.coeff(x_now)
        l_now = self.apply_generator(x_now, c_now)
        return (c_now + 0.5 * tau * l_now, tau)

    def objective_parts(self, cache, x_next, opt):
        """(objective, defect, min pair eigenvalue) with shared intermediates."""
        base, tau = cache
        site, cmat = self._site_cmat(x_next)
        c_next = self._coeff_from(site, cmat)
        l_next = self.apply_generator(x_next, c_next)
        res = c_next - base - 0.5 * tau * l_next
        mat = (res @ self._stack2d).reshape(self.dim, self.dim)
        defect = float(np.sum(np.abs(np.linalg.eigvalsh(mat))))
        pair = ((np.outer(site, site) + cmat).reshape(-1) @ self._pair2d).reshape(4, 4)
        eigs = np.linalg.eigvalsh(pair)
        neg = eigs[eigs < 0.0]
        pen = opt.penalty * float(np.sum(neg**2)) if neg.size else 0.0
        return defect + pen, defect, float(eigs[0])

    def defect_from(self, cache, x_next):
        base, tau = cache
        c_next = self.coeff(x_next)
        l_next = self.apply_generator(x_next, c_next)
        res = c_next - base - 0.5 * tau * l_next
        mat = (res @ self._stack2d).reshape(self.dim, self.dim)
        return float(np.sum(np.abs(np.linalg.eigvalsh(mat))))

    def defect(self, x_now, x_next, tau):
        return self.defect_from(self.begin_step(x_now, tau), x_next)

    def penalty(self, x, opt):
        neg = np.minimum(np.linalg.eigvalsh(self.pair_state(x)), 0.0)
        return opt.penalty * float(np.sum(neg**2))

    def min_pair_eig(self, x):
        return float(np.linalg.eigvalsh(self.pair_state(x))[0])

    def n_r(self, x):
        return 0.5 + float(np.asarray(x)[2])


# ---------------------------------------------------------------------------
# spec-level defect entry points
# ---------------------------------------------------------------------------


def _default_geometry(manifold):
    """Representative cluster of the infinite square lattice (z = 4)."""
    if manifold == "product":
        return ClusterGeometry(sites=(0, 1), interior=((0, 1),), dangling=((0, 3), (1, 3)))
    return ClusterGeometry(
        sites=(0, 1, 2), interior=((0, 1), (1, 2)), dangling=((0, 3), (1, 2), (2, 3))
    )


def defect_product(p_now, p_next, mparams, tau, geometry=None):
    """Per-bond trace norm of the two-site midpoint residual."""
    geom = geometry or _default_geometry("product")
    op = ClusterOperator(mparams, geom, "product")
    return op.defect(ProductParams.from_vector(p_now.vector()).vector(), p_next.vector(), tau)


def defect_correlated(p_now, p_next, mparams, tau, geometry=None):
    """Per-cluster trace norm of the three-site midpoint residual."""
    geom = geometry or _default_geometry("correlated")
    op = ClusterOperator(mparams, geom, "correlated")
    return op.defect(p_now.vector(), p_next.vector(), tau)


def exact_step_defect(mparams, lattice, x_now, x_next, manifold, tau):
    """Whole-lattice defect of Eq.-(3) type for the same parameter pair.

    Builds the full ansatz states on the entire lattice, applies the full
    Liouvillian and returns the trace norm of the midpoint residual; only
    feasible on small lattices.
    """
    geom = geometry_for_sites(lattice, list(range(lattice.n_sites)))
    op = ClusterOperator(mparams, geom, "correlated" if len(x_now) > 3 else "product")
    return op.defect(x_now, x_next, tau)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------


def nelder_mead(f, x0, scale, xatol, fatol, maxfev):
    """Downhill-simplex minimization with or-combined termination.

    Stops when the simplex diameter falls below ``xatol`` or the spread of
    function values across the simplex falls below ``fatol`` (whichever
    happens first), or when the evaluation budget runs out.  Standard
    reflection/expansion/contraction/shrink coefficients (1, 2, 1/2, 1/2).

    Returns (x_best, f_best, n_evals, converged).
    """
    n = len(x0)
    sim = np.tile(np.asarray(x0, dtype=float), (n + 1, 1))
    for i in range(n):
        sim[i + 1, i] += scale
    fsim = np.array([f(s) for s in sim])
    nfev = n + 1
    while nfev < maxfev:
        order = np.argsort(fsim, kind="stable")
        sim = sim[order]
        fsim = fsim[order]
        if (
            np.max(np.abs(sim[1:] - sim[0])) <= xatol
            or np.max(np.abs(fsim[1:] - fsim[0])) <= fatol
        ):
            return sim[0], fsim[0], nfev, True
        centroid = sim[:-1].mean(axis=0)
        xr = 2.0 * centroid - sim[-1]
        fr = f(xr)
        nfev += 1
        if fr < fsim[0]:
            xe = 3.0 * centroid - 2.0 * sim[-1]
            fe = f(xe)
            nfev += 1
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
        elif fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
        else:
            if fr < fsim[-1]:
                xc = 1.5 * centroid - 0.5 * sim[-1]  # outside contraction
            else:
                xc = 0.5 * (centroid + sim[-1])  # inside contraction
            fc = f(xc)
            nfev += 1
            if fc < min(fr, fsim[-1]):
                sim[-1], fsim[-1] = xc, fc
            else:
                for i in range(1, n + 1):  # shrink toward the best vertex
                    sim[i] = 0.5 * (sim[0] + sim[i])
                    fsim[i] = f(sim[i])
                nfev += n
    order = np.argsort(fsim, kind="stable")
    return sim[order[0]], fsim[order[0]], nfev, False


def variational_step(x_now, op, tau, opt=None, rng=None, x_pred=None, scale=None):
    """Minimize the step defect from ``x_now``; returns (x_next, report).

    Nelder-Mead warm-started at ``x_pred`` (secant extrapolation supplied by
    the evolution loop, falling back to ``x_now``), with a positivity
    penalty on the two-site reduced state.  Because the trace-norm landscape
    can collapse a simplex prematurely, the minimization is polished by
    re-opening a reduced simplex around the best point until no further
    gain, all within the per-step evaluation budget.  Random restarts of
    radius ``opt.restart_radius`` fire when the optimizer fails or the best
    point violates positivity; the lowest valid defect wins, ties broken by
    restart index.
    """
    opt = opt or OptimizerConfig()
    x_now = np.asarray(x_now, dtype=float)
    cache = op.begin_step(x_now, tau)

    def objective(x):
        return op.objective_parts(cache, x, opt)[0]

    budget = opt.max_evals
    h = opt.simplex_scale if scale is None else max(scale, 100 * opt.xatol)
    start = x_now if x_pred is None else np.asarray(x_pred, dtype=float)
    xb, fb, evals, success = nelder_mead(objective, start, h, opt.xatol, opt.fatol, budget)
    reopen = max(0.02 * h, 300 * opt.xatol)
    while evals < budget:
        x2, f2, ne, ok2 = nelder_mead(objective, xb, reopen, opt.xatol, opt.fatol, budget - evals)
        evals += ne
        if f2 < fb:
            xb, fb, success = x2, f2, ok2
        if f2 >= fb - max(10 * opt.fatol, 1e-9 * abs(fb)):
            break

    f_now = objective(x_now)
    candidates = [(fb, 0, xb, success)]
    if f_now < fb:  # never do worse than standing still
        candidates.insert(0, (f_now, 0, x_now, True))
    need_restart = not success or op.min_pair_eig(candidates[0][2]) < -opt.pos_tol
    if need_restart and opt.restarts > 0:
        rng = rng or np.random.default_rng()
        for k in range(1, opt.restarts + 1):
            jittered = xb + rng.uniform(-opt.restart_radius, opt.restart_radius, len(xb))
            x2, f2, ne, ok2 = nelder_mead(
                objective, jittered, opt.restart_radius, opt.xatol, opt.fatol, opt.max_evals
            )
            evals += ne
            candidates.append((f2, k, x2, ok2))

    valid = [c for c in candidates if op.min_pair_eig(c[2]) >= -opt.pos_tol]
    pool = valid if valid else candidates
    fbest, _, xbest, success = min(pool, key=lambda c: (c[0], c[1]))
    converged = bool(success) and bool(valid)
    defect_value = op.defect_from(cache, xbest)
    return np.asarray(xbest, dtype=float), DefectReport(
        value=float(defect_value), iterations=int(evals), converged=converged
    )


class _Stepper:
    """Evolution driver: secant prediction with error-adaptive simplex scale.

    The warm start for each step extrapolates the two previous points; the
    initial simplex is sized from the observed prediction error so the
    optimizer neither crawls nor re-shrinks a needlessly wide simplex.
    """

    def __init__(self, op, tau, opt, rng, x0):
        self.op = op
        self.tau = tau
        self.opt = opt
        self.rng = rng
        self.x = np.asarray(x0, dtype=float).copy()
        self.history = [self.x]
        self.scale = opt.simplex_scale

    def _predict(self, opt):
        h = self.history
        if len(h) == 1:
            return self.x, opt.simplex_scale
        if len(h) == 2:
            pred = 2.0 * h[-1] - h[-2]
        else:
            pred = 3.0 * h[-1] - 3.0 * h[-2] + h[-3]
        move = np.linalg.norm(h[-1] - h[-2])
        lo = 100 * opt.xatol
        return pred, min(max(self.scale, lo), max(0.5 * move, lo))

    def advance(self, opt=None):
        opt = opt or self.opt
        pred, scale = self._predict(opt)
        x_new, report = variational_step(
            self.x, self.op, self.tau, opt, self.rng, x_pred=pred, scale=scale
        )
        self.scale = 5.0 * np.linalg.norm(x_new - pred)
        self.x = x_new
        self.history = (self.history + [x_new])[-3:]
        return report

    @property
    def velocity(self):
        if len(self.history) < 2:
            return np.inf
        return float(np.linalg.norm(self.history[-1] - self.history[-2])) / self.tau


@dataclass
class VariationalRun:
    """Full trace of a variational evolution."""

    times: np.ndarray
    xs: np.ndarray
    n_r: np.ndarray
    defects: np.ndarray
    manifold: str
    geometry: ClusterGeometry
    mparams: object
    tau: float
    lattice: object = None
    all_converged: bool = True

    def params_at(self, index):
        x = self.xs[index]
        if self.manifold == "product":
            return ProductParams.from_vector(x)
        return CorrelatedParams.from_vector(x)

    def index_of_time(self, t):
        k = int(round(t / self.tau))
        if not 0 <= k < len(self.times) or abs(self.times[k] - t) > 1e-9 + 1e-6 * self.tau:
            raise ValueError(f"time {t} is not on the stored grid")
        return k


def evolve_variational(
    mparams,
    lattice,
    manifold,
    t_final,
    tau,
    initial=None,
    opt=None,
    seed=0,
    geometry=None,
):
    """Evolve the variational parameters from t=0 to t_final in steps of tau.

    The default initial state is fully polarized into the electronic ground
    state (alpha = (0,0,-1/2), C = 0).  Records (t, n_r, parameters, defect)
    at every step; the defect reported at t_k is the minimized residual of
    the step ending there (zero at t=0).
    """
    geom = geometry or representative_cluster(lattice, manifold)
    op = ClusterOperator(mparams, geom, manifold)
    opt = opt or OptimizerConfig()
    rng = np.random.default_rng(seed)
    x = op.initial_vector() if initial is None else np.asarray(initial, dtype=float).copy()
    if len(x) != op.nfree:
        raise ValueError(f"initial vector must have {op.nfree} entries for {manifold}")

    n_steps = int(round(t_final / tau))
    xs = np.empty((n_steps + 1, op.nfree))
    n_r = np.empty(n_steps + 1)
    defects = np.zeros(n_steps + 1)
    xs[0] = x
    n_r[0] = op.n_r(x)
    all_ok = True
    stepper = _Stepper(op, tau, opt, rng, x)
    for k in range(1, n_steps + 1):
        report = stepper.advance()
        all_ok = all_ok and report.converged
        x = stepper.x
        xs[k] = x
        n_r[k] = op.n_r(x)
        defects[k] = report.value
    return VariationalRun(
        times=np.arange(n_steps + 1) * tau,
        xs=xs,
        n_r=n_r,
        defects=defects,
        manifold=manifold,
        geometry=geom,
        mparams=mparams,
        tau=tau,
        lattice=lattice,
        all_converged=all_ok,
    )


@dataclass
class SteadyStateResult:
    x: np.ndarray
    defect: float
    n_r: float
    converged: bool
    t_reached: float
    manifold: str


def steady_state(
    mparams,
    lattice,
    manifold,
    tau=0.01,
    ss_tol=1e-8,
    ss_window=10,
    t_max=200.0,
    initial=None,
    opt=None,
    seed=0,
    geometry=None,
):
    """Evolve until the parameter velocity stays below ``ss_tol``.

    Stationarity requires ||x_{k+1} - x_k|| / tau < ss_tol for ``ss_window``
    consecutive steps.  Near stationarity the optimizer tolerances are
    tightened so that simplex slack cannot mask convergence.
    """
    from dataclasses import replace

    geom = geometry or representative_cluster(lattice, manifold)
    op = ClusterOperator(mparams, geom, manifold)
    opt = opt or OptimizerConfig()
    tight = replace(opt, xatol=min(opt.xatol, 1e-12), fatol=min(opt.fatol, 1e-15))
    rng = np.random.default_rng(seed)
    x0 = op.initial_vector() if initial is None else np.asarray(initial, dtype=float).copy()
    stepper = _Stepper(op, tau, opt, rng, x0)
    t = 0.0
    streak = 0
    defect = 0.0
    while t < t_max:
        use = tight if stepper.velocity < 100 * ss_tol else opt
        report = stepper.advance(use)
        t += tau
        defect = report.value
        streak = streak + 1 if stepper.velocity < ss_tol else 0
        if streak >= ss_window:
            return SteadyStateResult(
                x=stepper.x,
                defect=defect,
                n_r=op.n_r(stepper.x),
                converged=True,
                t_reached=t,
                manifold=manifold,
            )
    return SteadyStateResult(
        x=stepper.x,
        defect=defect,
        n_r=op.n_r(stepper.x),
        converged=False,
        t_reached=t,
        manifold=manifold,
    )
