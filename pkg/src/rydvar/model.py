"""Dissipative Rydberg spin model on a 2D square lattice.

The Hamiltonian is

    H = Omega/2 sum_i sx_i + Delta/2 sum_i sz_i + V/4 sum_<ij> sz_i sz_j

with spontaneous decay of the Rydberg state at rate gamma through jump
operators sqrt(gamma) sigma_minus on every site.  All rates are quoted in
units of gamma, times in units of 1/gamma.

A cluster of sites can be cut out of the lattice; interactions across its
dangling bonds are reduced onto the cluster by attaching one exterior site
in the variational state (single-site part plus, optionally, the
bond correlation), applying the bond interaction on the enlarged space and
tracing the exterior site back out.  This is the unique reduction of the
full Liouvillian consistent with the variational ansatz.
"""

from dataclasses import dataclass, field

import numpy as np

from . import qops
from .qops import SIGMA_MINUS, SIGMA_PLUS, embed, insert_site_operator, kron, partial_trace, pauli


@dataclass(frozen=True)
class ModelParams:
    """Model parameters in units of the decay rate gamma."""

    omega: float
    delta: float = 0.0
    v: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True)
class Lattice:
    """Square lattice with nearest-neighbor bonds.

    Sites are indexed row-major (site = row*width + col).  Bonds hold each
    unordered pair exactly once; on periodic lattices with an extent of 2
    the wrap-around bond coincides with the direct one and is therefore not
    duplicated, so the degree-4 property only holds for extents >= 3.
    """

    width: int
    height: int
    boundary: str = "periodic"
    bonds: tuple = field(init=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("lattice extents must be positive")
        if self.boundary not in ("periodic", "open"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        pairs = set()
        for r in range(self.height):
            for c in range(self.width):
                s = r * self.width + c
                for dr, dc in ((0, 1), (1, 0)):
                    rr, cc = r + dr, c + dc
                    if self.boundary == "periodic":
                        rr %= self.height
                        cc %= self.width
                    elif rr >= self.height or cc >= self.width:
                        continue
                    t = rr * self.width + cc
                    if s != t:
                        pairs.add((min(s, t), max(s, t)))
        object.__setattr__(self, "bonds", tuple(sorted(pairs)))

    @property
    def n_sites(self):
        return self.width * self.height

    def site(self, row, col):
        return (row % self.height) * self.width + (col % self.width)

    def degree(self, s):
        return sum(1 for a, b in self.bonds if s in (a, b))


@dataclass(frozen=True)
class DanglingBond:
    """One bond from a cluster site to an exterior site held at the ansatz.

    ``site`` is the local index of the interior endpoint within the cluster
    ordering.  ``alpha_env`` is the Bloch vector of the exterior site;
    ``corr_env`` the 3x3 correlation coefficient matrix across the bond
    (None on the product manifold).  ``weight`` counts equivalent dangling
    bonds collapsed into one entry.
    """

    site: int
    alpha_env: tuple
    corr_env: tuple = None
    weight: int = 1

    def env_state(self):
        rho = 0.5 * np.eye(2, dtype=complex)
        for a, ax in zip(self.alpha_env, "xyz"):
            rho += a * pauli(ax)
        return rho

    def mean_field_coefficient(self, v):
        """Effective sz coefficient (V/4) <sz>_env for this dangling bond."""
        return 0.25 * v * 2.0 * self.alpha_env[2] * self.weight

    def correction_operator(self, n_sites):
        """K-operator of the bond correlation, embedded on the cluster space.

        K = Tr_env[ C (1 x sz) ] = 2 sum_mu c_{mu z} sigma_mu; zero when the
        environment carries no correlations.
        """
        if self.corr_env is None:
            return np.zeros((2**n_sites, 2**n_sites), dtype=complex)
        c = np.asarray(self.corr_env)
        k = np.zeros((2, 2), dtype=complex)
        for mu, ax in enumerate("xyz"):
            k += 2.0 * c[mu, 2] * pauli(ax)
        return embed(k, self.site, n_sites)


@dataclass(frozen=True)
class BoundaryField:
    """Collection of dangling-bond couplings for a cluster."""

    dangling: tuple = ()

    def __bool__(self):
        return len(self.dangling) > 0


def build_hamiltonian(params, sites, bonds):
    """Dense Hamiltonian on the given site subset.

    ``bonds`` must reference only listed sites; they are mapped onto the
    local tensor ordering given by the ``sites`` sequence.
    """
    sites = list(sites)
    n = len(sites)
    local = {s: i for i, s in enumerate(sites)}
    if len(local) != n:
        raise ValueError("sites must be distinct")
    dim = 2**n
    h = np.zeros((dim, dim), dtype=complex)
    sx = pauli("x")
    sz = pauli("z")
    for i in range(n):
        h += 0.5 * params.omega * embed(sx, i, n)
        if params.delta != 0.0:
            h += 0.5 * params.delta * embed(sz, i, n)
    for a, b in bonds:
        if a not in local or b not in local:
            raise ValueError(f"bond ({a},{b}) references a site outside the cluster")
        h += 0.25 * params.v * embed(sz, local[a], n) @ embed(sz, local[b], n)
    return h


def _lindblad_terms(params, rho, n):
    """Decay dissipators summed over all cluster sites."""
    out = np.zeros_like(rho)
    if params.gamma == 0.0:
        return out
    for i in range(n):
        sm = embed(SIGMA_MINUS, i, n)
        sp = embed(SIGMA_PLUS, i, n)
        num = sp @ sm
        out += params.gamma * (sm @ rho @ sp - 0.5 * (num @ rho + rho @ num))
    return out


def boundary_term(params, boundary, rho, n):
    """Reduced interaction of the cluster with its dangling-bond environment.

    Implemented exactly as the reduction prescribes: enlarge the cluster by
    the exterior site (product part plus the correlation attachment), apply
    -i (V/4) [sz_b sz_e, .] and trace the exterior site out again.
    """
    out = np.zeros_like(rho)
    if not boundary or params.v == 0.0:
        return out
    sz = pauli("z")
    for d in boundary.dangling:
        joint = kron(rho, d.env_state())
        if d.corr_env is not None:
            marg = partial_trace(rho, [i for i in range(n) if i != d.site], n)
            c = np.asarray(d.corr_env)
            for mu, ax_mu in enumerate("xyz"):
                block = insert_site_operator(pauli(ax_mu), d.site, marg, n)
                for nu, ax_nu in enumerate("xyz"):
                    if c[mu, nu] != 0.0:
                        joint += c[mu, nu] * kron(block, pauli(ax_nu))
        w = embed(sz, d.site, n + 1) @ embed(sz, n, n + 1)
        comm = w @ joint - joint @ w
        out += (-0.25j * params.v * d.weight) * partial_trace(comm, list(range(n)), n + 1)
    return out


def apply_liouvillian(params, sites, bonds, boundary, rho):
    """Apply the (reduced) Liouvillian of the model to a cluster state.

    With an empty boundary this is the closed Lindblad generator on the
    cluster; dangling bonds add the exactly traced interaction with exterior
    sites held at the variational state.
    """
    sites = list(sites)
    n = len(sites)
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2**n, 2**n):
        raise ValueError(f"state dimension {rho.shape} does not match {n} sites")
    h = build_hamiltonian(params, sites, bonds)
    out = -1j * (h @ rho - rho @ h)
    out += _lindblad_terms(params, rho, n)
    out += boundary_term(params, boundary, rho, n)
    return out


def rydberg_density(rho, n_sites=None):
    """Site-averaged Rydberg population (1 + <sz>)/2."""
    rho = np.asarray(rho)
    dim = rho.shape[0]
    if n_sites is None:
        n_sites = dim.bit_length() - 1
    if dim != 2**n_sites:
        raise ValueError("dimension is not a power of two")
    diag = np.real(np.diag(rho))
    idx = np.arange(dim)
    total = 0.0
    for i in range(n_sites):
        mask = 1 << (n_sites - 1 - i)
        z = np.where(idx & mask, -1.0, 1.0)  # first basis state = rydberg (sz=+1)
        total += float(np.dot(z, diag))
    return (1.0 + total / n_sites) / 2.0


def cluster_neighbors(lattice, cluster):
    """Partition all lattice bonds touching ``cluster``.

    Returns (interior, dangling): interior bonds have both endpoints in the
    cluster, dangling bonds are (inside, outside) pairs.  The cluster sites
    must be distinct and connected through interior bonds (single sites and
    whole-lattice clusters are trivially allowed).
    """
    cluster = list(cluster)
    cset = set(cluster)
    if len(cset) != len(cluster):
        raise ValueError("cluster sites must be distinct")
    if not cset or not cset.issubset(set(range(lattice.n_sites))):
        raise ValueError("cluster sites out of range")
    interior = []
    dangling = []
    for a, b in lattice.bonds:
        ina, inb = a in cset, b in cset
        if ina and inb:
            interior.append((a, b))
        elif ina:
            dangling.append((a, b))
        elif inb:
            dangling.append((b, a))
    if len(cluster) > 1:
        seen = {cluster[0]}
        frontier = [cluster[0]]
        adj = {}
        for a, b in interior:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        while frontier:
            s = frontier.pop()
            for t in adj.get(s, ()):
                if t not in seen:
                    seen.add(t)
                    frontier.append(t)
        if seen != cset:
            raise ValueError("cluster sites are not mutually connected")
    return interior, dangling
