"""Microscopic signaling model on a perforated grid at fixed epsilon.

Ligand diffusion with zero-flux outer walls, an epsilon-scaled exchange
condition on the perforation boundaries, and free/bound receptor ODEs on
boundary faces. Space: masked 5-point finite volumes at resolution h; the
perforation boundary is polygonalized by marching squares inside each
boundary-crossing cell and each segment deposits its exchange flux into an
adjacent fluid cell. Time: IMEX, explicit reactions and boundary exchange
from the step-start state (so the alpha/beta terms cancel exactly in the
receptor balance), implicit backward-Euler diffusion factorized once per
run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (Partition, Subdomain, _lattice_sets, build_partition,
                       indicator_perforated, locate_batch)
from .scenarios import CoefficientSuite, Scenario


@dataclass
class MicroConfig:
    """Run parameters for one microscopic solve."""

    scenario: Scenario
    eps: float
    r: float = 0.5
    # odd count: perforation centers land on cell centers, where the
    # staircase volume and surface errors nearly cancel; even counts put
    # the centers on grid nodes and the two biases add up
    cells_per_eps: int = 15
    T: float = 0.5
    dt: Optional[float] = None          # default: dt = h
    suite: Optional[CoefficientSuite] = None

    def __post_init__(self):
        if not (0.0 < self.eps < 1.0):
            raise ValueError("eps must lie in (0, 1)")
        if self.cells_per_eps < 8:
            raise ValueError("need at least 8 cells per eps (h <= eps/8)")
        if self.T < 0.0:
            raise ValueError("final time must be nonnegative")
        if self.suite is None:
            self.suite = self.scenario.suite
        n = self.eps / self.cells_per_eps
        if abs(round(1.0 / n) - 1.0 / n) > 1e-9:
            raise ValueError("1/h must be an integer number of grid cells")
        if self.dt is not None and self.dt <= 0.0:
            raise ValueError("dt must be positive")

    @property
    def h(self) -> float:
        return self.eps / self.cells_per_eps

    @property
    def n_cells(self) -> int:
        return int(round(1.0 / self.h))


@dataclass
class MicroFaces:
    """Polygonal boundary faces of the perforations."""

    cell: np.ndarray         # (F,) flat deposit-cell index
    length: np.ndarray      # (F,) physical segment length
    midpoint: np.ndarray    # (F, 2)
    subdomain: np.ndarray   # (F,) subdomain index of the hosting cell

    def __len__(self) -> int:
        return len(self.length)

    def total_length(self) -> float:
        return float(self.length.sum())

    def per_subdomain(self) -> dict:
        out: dict = {}
        for n in np.unique(self.subdomain):
            out[int(n)] = float(self.length[self.subdomain == n].sum())
        return out


@dataclass
class MicroGrid:
    """Masked grid, boundary faces and the factorized diffusion operator."""

    config: MicroConfig
    partition: Partition
    mask: np.ndarray         # (n, n) bool, True = fluid
    faces: MicroFaces
    n: int
    h: float

    def fluid_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class MicroState:
    t: float
    l: np.ndarray            # (n, n), zero outside the fluid mask
    r_f: np.ndarray          # (F,)
    r_b: np.ndarray          # (F,)


# marching-squares connectivity: per corner sign code, pairs of edges
# (0 bottom, 1 right, 2 top, 3 left) crossed by the boundary segments
_MS_SEGMENTS = {
    1: [(3, 0)], 2: [(0, 1)], 4: [(1, 2)], 8: [(2, 3)],
    3: [(3, 1)], 6: [(0, 2)], 12: [(3, 1)], 9: [(0, 2)],
    7: [(3, 2)], 11: [(1, 2)], 13: [(0, 1)], 14: [(3, 0)],
}


def _face_segments(level: np.ndarray, h: float):
    """Marching-squares segments of the zero level set.

    level has node values on an (n+1)^2 grid; returns per-segment host cell
    (i, j), endpoints in physical coordinates, for every cell whose corner
    signs are mixed. Saddle cells are split by the corner-mean value.
    """
    inside = level < 0.0
    f00 = inside[:-1, :-1]
    f10 = inside[1:, :-1]
    f11 = inside[1:, 1:]
    f01 = inside[:-1, 1:]
    code = (f00.astype(np.int8) + 2 * f10 + 4 * f11 + 8 * f01)
    cells = np.argwhere((code > 0) & (code < 15))
    hosts, p0s, p1s = [], [], []
    for i, j in cells:
        c = int(code[i, j])
        phi = (level[i, j], level[i + 1, j], level[i + 1, j + 1],
               level[i, j + 1])

        def crossing(edge):
            # endpoints of each cell edge in corner order
            if edge == 0:      # bottom: corner 0 -> 1
                a, b = phi[0], phi[1]
                t = a / (a - b)
                return ((i + t) * h, j * h)
            if edge == 1:      # right: corner 1 -> 2
                a, b = phi[1], phi[2]
                t = a / (a - b)
                return ((i + 1) * h, (j + t) * h)
            if edge == 2:      # top: corner 3 -> 2
                a, b = phi[3], phi[2]
                t = a / (a - b)
                return ((i + t) * h, (j + 1) * h)
            a, b = phi[0], phi[3]  # left: corner 0 -> 3
            t = a / (a - b)
            return (i * h, (j + t) * h)

        if c in (5, 10):
            center_in = (phi[0] + phi[1] + phi[2] + phi[3]) < 0.0
            if c == 5:         # corners 00 and 11 inside
                pairs = [(3, 0), (1, 2)] if not center_in else [(3, 2), (1, 0)]
            else:              # corners 10 and 01 inside
                pairs = [(0, 1), (2, 3)] if not center_in else [(0, 3), (2, 1)]
        else:
            pairs = _MS_SEGMENTS[c]
        for e0, e1 in pairs:
            hosts.append((i, j))
            p0s.append(crossing(e0))
            p1s.append(crossing(e1))
    return (np.array(hosts, dtype=int).reshape(-1, 2),
            np.array(p0s, dtype=float).reshape(-1, 2),
            np.array(p1s, dtype=float).reshape(-1, 2))


def _commensurate_r(eps: float, r: float) -> float:
    """Exponent whose subdomain side is a whole multiple of eps.

    The grid can only represent subdomain seams on lattice lines; with the
    nominal side eps^r the seams cut through lattice cells and the solver
    would carry O(1)-wide unperforated bands whose area oscillates with eps
    instead of shrinking. Snapping the side to eps*round(eps^(r-1)) keeps
    the side within a factor 1 + O(eps^(1-r)) of nominal and makes the
    discrete perforated domain exactly the intended one.
    """
    m = max(2, int(round(eps ** (r - 1.0))))
    side = m * eps
    if side >= 1.0:
        return r
    return math.log(side) / math.log(eps)


def _diagonal_steps(transform):
    """Per-axis lattice step functions when the frozen maps separate.

    Returns [f0, f1] with D(x) = diag(f0(x_0), f1(x_1)) when that holds on
    a probe grid, else None. Separable diagonal transforms admit an exactly
    tiling covering (see _micro_partition); anything else falls back to the
    uniform one.
    """
    ts = np.linspace(0.0, 1.0, 7)
    Ds = np.stack([transform.D_at(np.array([a, b])) for a in ts for b in ts])
    if np.max(np.abs(Ds[:, 0, 1])) > 1e-12 or np.max(np.abs(Ds[:, 1, 0])) > 1e-12:
        return None
    d11 = Ds[:, 0, 0].reshape(7, 7)
    d22 = Ds[:, 1, 1].reshape(7, 7)
    if np.max(np.abs(d11 - d11[:, :1])) > 1e-12:   # varies with x_1
        return None
    if np.max(np.abs(d22 - d22[:1, :])) > 1e-12:   # varies with x_0
        return None

    def f0(t: float) -> float:
        return float(transform.D_at(np.array([t, 0.5]))[0, 0])

    def f1(t: float) -> float:
        return float(transform.D_at(np.array([0.5, t]))[1, 1])

    return [f0, f1]


def _axis_breaks(eps: float, r: float, f) -> np.ndarray:
    """Subdomain edges along one axis, snapped to the local lattice.

    Each interval spans a whole number of frozen lattice steps eps*f(anchor),
    solved as a fixed point since the anchor is the interval midpoint. The
    last interval ends at 1 and may carry one partial row; that is the only
    unperforated band left on the axis.
    """
    s0 = eps**r
    breaks = [0.0]
    p = 0.0
    while True:
        loc = f(min(p + 0.5 * s0, 1.0))
        m = max(2, int(round(s0 / (eps * loc))))
        t = m * eps * loc
        for _ in range(60):
            t_new = m * eps * f(min(p + 0.5 * t, 1.0))
            done = abs(t_new - t) < 1e-15
            t = t_new
            if done:
                break
        rem = 1.0 - (p + t)
        if rem < 2.0 * eps * f(min(0.5 * (p + t + 1.0), 1.0)) - 1e-12:
            # remainder cannot hold two full rows: extend this interval to 1
            if (1.0 - p) < 2.0 * eps * f(0.5 * (p + 1.0)):
                raise ValueError(
                    f"subdomain side {1.0 - p:.4g} cannot hold one full cell "
                    f"(needs at least {2.0 * eps * f(0.5 * (p + 1.0)):.4g})")
            breaks.append(1.0)
            return np.array(breaks)
        p += t
        breaks.append(p)


class _SnappedPartition(Partition):
    """Covering with per-axis breakpoints instead of one uniform side."""

    def __init__(self, breaks, *args):
        super().__init__(*args)
        self._breaks = breaks

    def subdomain_of(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = np.empty((len(X), self.d), dtype=int)
        for i, b in enumerate(self._breaks):
            k[:, i] = np.clip(np.searchsorted(b, X[:, i], side="right") - 1,
                              0, len(b) - 2)
        return np.ravel_multi_index(tuple(k.T), self.n_sub)


def _micro_partition(eps: float, r: float, transform) -> Partition:
    """Covering used by the micro grid.

    Where the frozen maps are diagonal with each entry a function of its own
    axis only, the subdomain edges are snapped per axis to whole multiples of
    the local lattice step and each lattice is anchored at its subdomain's
    lower corner, so the cells tile every subdomain exactly. Without the snap
    each subdomain seam sheds a band of excluded cells whose receptor deficit
    decays too slowly in eps to observe convergence under it. Transforms that
    do not separate (rotations) keep the uniform covering with the side
    rounded to a whole multiple of eps.
    """
    domain = ((0.0, 0.0), (1.0, 1.0))
    fs = _diagonal_steps(transform)
    if fs is None:
        return build_partition(domain, eps, _commensurate_r(eps, r), transform)
    breaks = [_axis_breaks(eps, r, f) for f in fs]
    n_sub = tuple(len(b) - 1 for b in breaks)
    subs: list[Subdomain] = []
    flat = 0
    for k in np.ndindex(*n_sub):
        s_lo = np.array([breaks[0][k[0]], breaks[1][k[1]]])
        s_hi = np.array([breaks[0][k[0] + 1], breaks[1][k[1] + 1]])
        anchor = 0.5 * (s_lo + s_hi)
        D = transform.D_at(anchor)
        K = transform.K_at(anchor)
        Dinv = np.linalg.inv(D)
        Kinv = np.linalg.inv(K)
        detD = abs(float(np.linalg.det(D)))
        shift = s_lo.copy()   # lattice anchored at the lower corner
        xi0 = np.round(Dinv @ shift / eps).astype(int)
        xi_hat, xi_all = _lattice_sets(s_lo, s_hi, eps, D, Dinv, shift)
        subs.append(Subdomain(n=flat, k=k, lo=s_lo, hi=s_hi, anchor=anchor,
                              D=D, Dinv=Dinv, K=K, Kinv=Kinv, detD=detD,
                              xi0=xi0, shift=shift, xi_hat=xi_hat,
                              xi_all=xi_all))
        flat += 1
    return _SnappedPartition(breaks, domain[0], domain[1], eps, r, transform,
                             "subdomain-center", subs, n_sub, eps**r)


def build_micro_grid(config: MicroConfig) -> MicroGrid:
    """Fluid mask at cell centers plus marching-squares boundary faces."""
    scen = config.scenario
    n = config.n_cells
    h = config.h
    partition = _micro_partition(config.eps, config.r, scen.transform)
    idx = (np.arange(n) + 0.5) * h
    CX, CY = np.meshgrid(idx, idx, indexing="ij")
    centers = np.column_stack([CX.ravel(), CY.ravel()])
    mask = indicator_perforated(partition, scen.transform, scen.cell,
                                centers).reshape(n, n)
    if not _mask_connected(mask):
        raise ValueError("fluid region of the micro grid is disconnected")

    if scen.cell.inclusion == "none":
        faces = MicroFaces(cell=np.zeros(0, dtype=int),
                           length=np.zeros(0), midpoint=np.zeros((0, 2)),
                           subdomain=np.zeros(0, dtype=int))
    else:
        # node level values of the perforation boundary, +1 in leftover
        # regions (no perforations there)
        g = np.arange(n + 1) * h
        GX, GY = np.meshgrid(g, g, indexing="ij")
        nodes = np.column_stack([GX.ravel(), GY.ravel()])
        sub_n, _, y, lam = locate_batch(partition, nodes)
        c = scen.cell.center
        u = np.einsum("pij,pj->pi", partition._Kinv[sub_n], y - c)
        level = np.linalg.norm(u, axis=1) - scen.cell.a
        level[lam] = 1.0
        level = level.reshape(n + 1, n + 1)

        hosts, p0, p1 = _face_segments(level, h)
        if len(hosts) == 0:
            faces = MicroFaces(cell=np.zeros(0, dtype=int),
                               length=np.zeros(0), midpoint=np.zeros((0, 2)),
                               subdomain=np.zeros(0, dtype=int))
        else:
            length = np.linalg.norm(p1 - p0, axis=1)
            mid = 0.5 * (p0 + p1)
            keep = length > 1e-14 * h
            hosts, length, mid = hosts[keep], length[keep], mid[keep]
            deposit = np.empty(len(hosts), dtype=int)
            for k, (i, j) in enumerate(hosts):
                if mask[i, j]:
                    deposit[k] = i * n + j
                    continue
                # host cell center sits inside the hole: hand the flux to
                # the nearest fluid neighbor
                best, best_d = -1, math.inf
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1),
                               (1, 1), (1, -1), (-1, 1), (-1, -1)):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < n and 0 <= jj < n and mask[ii, jj]:
                        cc = ((ii + 0.5) * h - mid[k, 0])**2 \
                            + ((jj + 0.5) * h - mid[k, 1])**2
                        if cc < best_d:
                            best, best_d = ii * n + jj, cc
                if best < 0:
                    raise ValueError(
                        "boundary segment has no adjacent fluid cell")
                deposit[k] = best
            subdom = partition.subdomain_of(mid)
            faces = MicroFaces(cell=deposit, length=length, midpoint=mid,
                               subdomain=subdom)

    return MicroGrid(config=config, partition=partition, mask=mask,
                     faces=faces, n=n, h=h)


def _mask_connected(mask: np.ndarray) -> bool:
    """Flood fill without periodic wrap (the outer boundary is a wall)."""
    total = int(mask.sum())
    if total == 0:
        return False
    n1, n2 = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    start = tuple(np.argwhere(mask)[0])
    seen[start] = True
    stack = [start]
    while stack:
        i, j = stack.pop()
        for ni, nj in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= ni < n1 and 0 <= nj < n2 and mask[ni, nj] \
                    and not seen[ni, nj]:
                seen[ni, nj] = True
                stack.append((ni, nj))
    return int(seen.sum()) == total


class MicroOperator:
    """Factorized backward-Euler diffusion operator and face tables."""

    def __init__(self, grid: MicroGrid, dt: float):
        cfg = grid.config
        n, h = grid.n, grid.h
        mask = grid.mask
        A = cfg.suite.A
        # interior faces between two fluid cells; harmonic mean of the
        # constant coefficient is the coefficient itself
        tx = A * (mask[:-1, :] & mask[1:, :])
        ty = A * (mask[:, :-1] & mask[:, 1:])
        lam = dt / h**2
        N = n * n
        ids = np.arange(N).reshape(n, n)
        diag = np.ones(N)
        rows, cols, vals = [ids.ravel()], [ids.ravel()], [diag]

        def couple(t, ia, ib):
            w = lam * t.ravel()
            a, b = ia.ravel(), ib.ravel()
            rows.extend([a, b, a, b])
            cols.extend([a, b, b, a])
            vals.extend([w, w, -w, -w])

        couple(tx, ids[:-1, :], ids[1:, :])
        couple(ty, ids[:, :-1], ids[:, 1:])
        M = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N))
        self.lu = spla.splu(M.tocsc())
        self.grid = grid
        self.dt = dt
        self.tx = tx
        self.ty = ty
        self.fluid = mask.ravel()
        self.face_cell = grid.faces.cell
        self.face_len = grid.faces.length
        # per-cell surface density sigma = eps * sum(len) / h^2 used by the
        # explicit exchange deposit
        self.face_scale = cfg.eps * self.face_len / h**2


def micro_step(state: MicroState, op: MicroOperator) -> MicroState:
    """One IMEX step: explicit reactions and exchange, implicit diffusion."""
    cfg = op.grid.config
    s = cfg.suite
    dt = op.dt
    l = state.l.ravel()
    l_face = l[op.face_cell]                    # step-start trace per face

    bulk = s.F(l) - s.dl * l
    lstar = l + dt * bulk * op.fluid
    exchange = s.beta * state.r_b - s.alpha * l_face * state.r_f
    np.add.at(lstar, op.face_cell, dt * op.face_scale * exchange)

    r_f = state.r_f + dt * (s.p(state.r_b) - s.alpha * l_face * state.r_f
                            + s.beta * state.r_b - s.df * state.r_f)
    r_b = state.r_b + dt * (s.alpha * l_face * state.r_f
                            - s.beta * state.r_b - s.db * state.r_b)

    l_new = op.lu.solve(lstar)
    for name, arr in (("ligand", l_new), ("free receptors", r_f),
                      ("bound receptors", r_b)):
        if not np.all(np.isfinite(arr)):
            raise RuntimeError(f"{name} field became non-finite at "
                               f"t={state.t + dt:.6g}")
    return MicroState(t=state.t + dt, l=l_new.reshape(op.grid.n, op.grid.n),
                      r_f=r_f, r_b=r_b)


def face_dirichlet_form(l: np.ndarray, tx: np.ndarray,
                        ty: np.ndarray) -> float:
    """Weighted face sum of coefficient times squared difference quotient.

    Faces with zero coefficient are treated as absent; the first and last
    face of every contiguous run get an extra half cell so an affine field
    on the unperforated square integrates exactly to |Omega|.
    """
    total = 0.0
    for t, axis in ((tx, 0), (ty, 1)):
        dl = np.diff(l, axis=axis)
        on = t > 0.0
        pad = [(0, 0), (0, 0)]
        pad[axis] = (1, 0)
        prev = np.pad(on, pad)[tuple(
            slice(0, -1) if ax == axis else slice(None) for ax in range(2))]
        pad[axis] = (0, 1)
        nxt = np.pad(on, pad)[tuple(
            slice(1, None) if ax == axis else slice(None) for ax in range(2))]
        w = np.where(on, 1.0 + 0.5 * (~prev) + 0.5 * (~nxt), 0.0)
        total += float(np.sum(t * w * dl**2))
    return total


def micro_energy(state: MicroState, grid: MicroGrid,
                 tx: Optional[np.ndarray] = None,
                 ty: Optional[np.ndarray] = None) -> float:
    """Dirichlet form of the ligand field on interior fluid faces."""
    mask = grid.mask
    A = grid.config.suite.A
    if tx is None:
        tx = A * (mask[:-1, :] & mask[1:, :])
    if ty is None:
        ty = A * (mask[:, :-1] & mask[:, 1:])
    return face_dirichlet_form(state.l, tx, ty)


def _barrier_rate(grid: MicroGrid, M: float) -> float:
    """Additive growth rate of max l from the a priori bound constants."""
    s = grid.config.suite
    if s.mu3 > 0.0:
        f_sup, f_lin = s.mu1 / s.mu3, 0.0
    else:
        f_sup, f_lin = 0.0, s.mu1 / max(s.mu2, 1e-300)
    sigma = 0.0
    if len(grid.faces):
        per_cell = np.zeros(grid.n * grid.n)
        np.add.at(per_cell, grid.faces.cell, grid.faces.length)
        sigma = grid.config.eps * float(per_cell.max()) / grid.h**2
    rate = f_sup + s.beta * s.receptor_bound * sigma
    return f_lin + rate / max(M, 1e-9)


@dataclass
class MicroRun:
    """Trajectory observables and the final state of one micro solve."""

    config: MicroConfig
    grid: MicroGrid
    observables: dict            # arrays keyed t, l2_norm, min_l, max_l,
                                 # energy, rf_mass, rb_mass
    final_state: MicroState
    barrier_M: float
    barrier_B: float
    failures: list = field(default_factory=list)
    fields: Optional[list] = None       # ligand snapshots at sample times

    def ok(self) -> bool:
        return not self.failures


def initial_micro_state(config: MicroConfig, grid: MicroGrid) -> MicroState:
    s = config.suite
    l = np.where(grid.mask, s.l0, 0.0)
    F = len(grid.faces)
    return MicroState(t=0.0, l=l, r_f=np.full(F, s.rf0),
                      r_b=np.full(F, s.rb0))


def run_micro(config: MicroConfig, grid: Optional[MicroGrid] = None,
              n_samples: int = 20, keep_fields: bool = False) -> MicroRun:
    """Integrate to T, recording observables at T/n_samples intervals.

    With keep_fields, a copy of the ligand field is stored at every
    sample time (run.fields), which the convergence study consumes.
    """
    if grid is None:
        grid = build_micro_grid(config)
    s = config.suite
    if config.T > 0.0:
        dt_req = config.dt if config.dt is not None else grid.h
        if dt_req * s.bulk_lipschitz > 0.5:
            raise ValueError(
                f"dt={dt_req:g} exceeds the explicit reaction budget "
                f"0.5/{s.bulk_lipschitz:g}")
        window = config.T / n_samples
        n_sub = max(1, int(math.ceil(window / dt_req - 1e-12)))
        dt = window / n_sub
        op = MicroOperator(grid, dt)
    else:
        n_sub, dt, op = 0, 0.0, None

    state = initial_micro_state(config, grid)
    M = float(state.l.max(initial=0.0))
    B = _barrier_rate(grid, M)
    h2 = grid.h**2
    fluid = grid.mask
    rows = {k: [] for k in ("t", "l2_norm", "min_l", "max_l", "energy",
                            "rf_mass", "rb_mass")}
    failures: list = []
    snapshots: Optional[list] = [] if keep_fields else None

    def record(st: MicroState):
        if snapshots is not None:
            snapshots.append(st.l.copy())
        lf = st.l[fluid]
        mx = float(lf.max())
        mn = float(lf.min())
        rows["t"].append(st.t)
        rows["l2_norm"].append(math.sqrt(float(np.sum(lf**2)) * h2))
        rows["min_l"].append(mn)
        rows["max_l"].append(mx)
        rows["energy"].append(micro_energy(st, grid))
        rows["rf_mass"].append(config.eps
                               * float(np.sum(st.r_f * grid.faces.length)))
        rows["rb_mass"].append(config.eps
                               * float(np.sum(st.r_b * grid.faces.length)))
        if mn < -1e-12 or st.r_f.min(initial=0.0) < -1e-12 \
                or st.r_b.min(initial=0.0) < -1e-12:
            failures.append(f"negative concentration at t={st.t:.6g}")
        barrier = max(M, 1e-9) * math.exp(min(B * st.t, 700.0)) + 1e-6
        if mx > barrier:
            failures.append(f"L-infinity barrier violated at t={st.t:.6g}")

    record(state)
    if config.T > 0.0:
        for _ in range(n_samples):
            for _ in range(n_sub):
                state = micro_step(state, op)
            record(state)

    observables = {k: np.array(v) for k, v in rows.items()}
    return MicroRun(config=config, grid=grid, observables=observables,
                    final_state=state, barrier_M=M, barrier_B=B,
                    failures=failures, fields=snapshots)
