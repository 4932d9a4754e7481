"""Homogenized signaling model on the unit square.

Porosity-weighted parabolic equation for the ligand with a space-dependent
effective tensor, coupled to receptor ODE fields resolved at quadrature
points on the reference perforation boundary of each macro node. Space:
flux-form finite volumes with a 9-point stencil (the off-diagonal tensor
entries add cross-derivative terms, one-sided next to the outer walls),
zero-flux closure. Time: the same IMEX splitting as the microscopic
solver, with the porosity entering as the time-derivative weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell_problem import EffectiveTensorField, tensor_field
from .micro import face_dirichlet_form
from .scenarios import CoefficientSuite, Scenario


@dataclass
class MacroConfig:
    """Run parameters for one homogenized solve."""

    scenario: Scenario
    H: float
    T: float = 0.5
    dt: Optional[float] = None          # default: dt = H
    n_gamma: int = 16
    suite: Optional[CoefficientSuite] = None
    tensors: Optional[EffectiveTensorField] = None
    N_c: int = 64                       # cell resolution if tensors not given

    def __post_init__(self):
        if not (0.0 < self.H <= 0.5):
            raise ValueError("macro spacing H must lie in (0, 1/2]")
        if abs(round(1.0 / self.H) - 1.0 / self.H) > 1e-9:
            raise ValueError("1/H must be an integer number of grid cells")
        if self.T < 0.0:
            raise ValueError("final time must be nonnegative")
        if self.n_gamma < 4:
            raise ValueError("need at least 4 boundary quadrature points")
        if self.dt is not None and self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.suite is None:
            self.suite = self.scenario.suite

    @property
    def n_cells(self) -> int:
        return int(round(1.0 / self.H))


def macro_nodes(config: MacroConfig) -> np.ndarray:
    """Cell-center nodes of the macro grid, raveled row-major in (i, j)."""
    n = config.n_cells
    x = (np.arange(n) + 0.5) * config.H
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    return np.column_stack([X1.ravel(), X2.ravel()])


@dataclass
class MacroState:
    t: float
    l: np.ndarray            # (n, n)
    r_f: np.ndarray          # (P, S) per (node, quadrature point)
    r_b: np.ndarray          # (P, S)


@dataclass
class MacroOperator:
    """Assembled diffusion operator, porosity weights and Γ quadrature."""

    config: MacroConfig
    n: int
    H: float
    nodes: np.ndarray        # (P, 2)
    theta: np.ndarray        # (P,) porosity weight of the time derivative
    tensors: np.ndarray      # (P, 2, 2)
    L: sp.csr_matrix         # discrete div(𝒜 grad), zero-flux closure
    gamma_w: np.ndarray      # (P, S) quadrature weights on the hole boundary
    cell_measure: np.ndarray  # (P,) measure of the local reference cell

    @property
    def gamma_measure(self) -> np.ndarray:
        # per-node boundary measure is defined as the quadrature total
        return self.gamma_w.sum(axis=1)


def _gamma_quadrature(config: MacroConfig, nodes: np.ndarray) -> np.ndarray:
    """Weights w_s = a |D K u'(φ_s)| Δφ on the reference hole boundary."""
    scen = config.scenario
    P = len(nodes)
    S = config.n_gamma
    if scen.cell.inclusion == "none":
        return np.zeros((P, 0))
    a = scen.cell.a
    dphi = 2.0 * math.pi / S
    phi = (np.arange(S) + 0.5) * dphi
    tang = np.column_stack([-np.sin(phi), np.cos(phi)])    # (S, 2)
    w = np.empty((P, S))
    for p, x in enumerate(nodes):
        DK = scen.transform.D_at(x) @ scen.transform.K_at(x)
        w[p] = a * np.linalg.norm(tang @ DK.T, axis=1) * dphi
    return w


def _flux_stencil(H: float, ann: np.ndarray, ant: np.ndarray,
                  ids_a: np.ndarray, ids_b: np.ndarray, axis: int):
    """COO triplets for one orientation of faces.

    ann, ant: face-averaged normal and tangential tensor entries, shaped
    like ids_a; faces connect cells ids_a -> ids_b along `axis`. The flux
    ann*(l_b - l_a)/H + ant*dT enters the divergence of cell a with +1/H
    and of cell b with -1/H; the tangential derivative dT is central and
    falls back to one-sided in the first and last transverse rows.
    """
    rows, cols, vals = [], [], []

    def add(rfaces_col_coef):
        for r, c, v in rfaces_col_coef:
            rows.append(np.asarray(r).ravel())
            cols.append(np.asarray(c).ravel())
            vals.append(np.broadcast_to(v, np.asarray(r).shape).ravel())

    def face_term(ra, rb, col, coef):
        add([(ra, col, coef / H), (rb, col, -coef / H)])

    # normal part
    face_term(ids_a, ids_b, ids_b, ann / H)
    face_term(ids_a, ids_b, ids_a, -ann / H)

    t = 1 - axis
    nt = ids_a.shape[t]

    def sl(k):
        s = [slice(None), slice(None)]
        s[t] = k
        return tuple(s)

    # central tangential derivative away from the walls
    mid, up, dn = sl(slice(1, nt - 1)), sl(slice(2, nt)), sl(slice(0, nt - 2))
    c_mid = ant[mid] / (4.0 * H)
    for base in (ids_a, ids_b):
        face_term(ids_a[mid], ids_b[mid], base[up], c_mid)
        face_term(ids_a[mid], ids_b[mid], base[dn], -c_mid)
    # one-sided at the transverse walls
    for k, knb, sgn_own in ((0, 1, -1.0), (nt - 1, nt - 2, 1.0)):
        c = ant[sl(k)] / (2.0 * H)
        for base in (ids_a, ids_b):
            face_term(ids_a[sl(k)], ids_b[sl(k)], base[sl(k)], sgn_own * c)
            face_term(ids_a[sl(k)], ids_b[sl(k)], base[sl(knb)],
                      -sgn_own * c)
    return rows, cols, vals


def assemble_macro(config: MacroConfig) -> MacroOperator:
    """Discrete operator bundle: diffusion stencil, θ, Γ quadrature."""
    scen = config.scenario
    n = config.n_cells
    H = config.H
    nodes = macro_nodes(config)
    P = len(nodes)

    fld = config.tensors
    if fld is None:
        fld = tensor_field(nodes, config.suite.A, scen.transform, scen.cell,
                           N_c=config.N_c)
    else:
        if fld.points.shape != nodes.shape \
                or not np.allclose(fld.points, nodes, atol=1e-9):
            raise ValueError("tensor field does not cover the macro nodes")
    if not fld.ok():
        bad = next(e for e in fld.errors if e is not None)
        raise ValueError(f"tensor field carries a failed solve: {bad}")

    tensors = fld.tensors
    for p in range(P):
        Ap = tensors[p]
        if not np.allclose(Ap, Ap.T, atol=1e-8 * max(1.0, abs(Ap).max())):
            raise ValueError(f"effective tensor at node {p} is not symmetric")
        if np.linalg.eigvalsh(0.5 * (Ap + Ap.T)).min() <= 0.0:
            raise ValueError(
                f"effective tensor at node {p} is not positive definite")

    ids = np.arange(P).reshape(n, n)
    A11 = tensors[:, 0, 0].reshape(n, n)
    A22 = tensors[:, 1, 1].reshape(n, n)
    A12 = tensors[:, 0, 1].reshape(n, n)
    A21 = tensors[:, 1, 0].reshape(n, n)

    rows, cols, vals = [], [], []
    # x-faces: normal entry A11, tangential A12
    r, c, v = _flux_stencil(
        H,
        0.5 * (A11[:-1, :] + A11[1:, :]),
        0.5 * (A12[:-1, :] + A12[1:, :]),
        ids[:-1, :], ids[1:, :], axis=0)
    rows += r; cols += c; vals += v
    # y-faces: normal entry A22, tangential A21
    r, c, v = _flux_stencil(
        H,
        0.5 * (A22[:, :-1] + A22[:, 1:]),
        0.5 * (A21[:, :-1] + A21[:, 1:]),
        ids[:, :-1], ids[:, 1:], axis=1)
    rows += r; cols += c; vals += v

    L = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(P, P))
    L.sum_duplicates()

    gamma_w = _gamma_quadrature(config, nodes)
    cell_measure = np.array(
        [abs(np.linalg.det(scen.transform.D_at(x))) for x in nodes])
    return MacroOperator(config=config, n=n, H=H, nodes=nodes,
                         theta=fld.theta.copy(), tensors=tensors, L=L,
                         gamma_w=gamma_w, cell_measure=cell_measure)


class _MacroStepper:
    """Backward-Euler factorization of (Θ - Δt L) for a fixed step size."""

    def __init__(self, op: MacroOperator, dt: float):
        self.op = op
        self.dt = dt
        M = sp.diags(op.theta) - dt * op.L
        self.lu = spla.splu(M.tocsc())


def macro_step(state: MacroState, stepper: _MacroStepper) -> MacroState:
    """One IMEX step, mirroring the microscopic update."""
    op = stepper.op
    s = op.config.suite
    dt = stepper.dt
    l = state.l.ravel()

    bulk = op.theta * (s.F(l) - s.dl * l)
    exchange = s.beta * state.r_b - s.alpha * l[:, None] * state.r_f
    deposit = (op.gamma_w * exchange).sum(axis=1) / op.cell_measure

    r_f = state.r_f + dt * (s.p(state.r_b)
                            - s.alpha * l[:, None] * state.r_f
                            + s.beta * state.r_b - s.df * state.r_f)
    r_b = state.r_b + dt * (s.alpha * l[:, None] * state.r_f
                            - s.beta * state.r_b - s.db * state.r_b)

    rhs = op.theta * l + dt * (bulk + deposit)
    l_new = stepper.lu.solve(rhs)
    for name, arr in (("ligand", l_new), ("free receptors", r_f),
                      ("bound receptors", r_b)):
        if not np.all(np.isfinite(arr)):
            raise RuntimeError(f"{name} field became non-finite at "
                               f"t={state.t + dt:.6g}")
    return MacroState(t=state.t + dt, l=l_new.reshape(op.n, op.n),
                      r_f=r_f, r_b=r_b)


def macro_energy(state: MacroState, op: MacroOperator) -> float:
    """Homogenized Dirichlet form ⟨𝒜∇l, ∇l⟩ over the macro grid.

    Diagonal entries use the same weighted face form as the micro energy;
    the cross term is a cell-centered product of one-sided/central
    difference gradients.
    """
    n, H = op.n, op.H
    A11 = op.tensors[:, 0, 0].reshape(n, n)
    A22 = op.tensors[:, 1, 1].reshape(n, n)
    A12 = op.tensors[:, 0, 1].reshape(n, n)
    txx = 0.5 * (A11[:-1, :] + A11[1:, :])
    tyy = 0.5 * (A22[:, :-1] + A22[:, 1:])
    total = face_dirichlet_form(state.l, txx, tyy)
    g1 = np.gradient(state.l, H, axis=0)
    g2 = np.gradient(state.l, H, axis=1)
    total += float(np.sum(2.0 * A12 * g1 * g2)) * H * H
    return total


@dataclass
class MacroRun:
    """Trajectory observables and the final state of one macro solve."""

    config: MacroConfig
    operator: MacroOperator
    observables: dict
    final_state: MacroState
    barrier_M: float
    barrier_B: float
    failures: list = field(default_factory=list)
    fields: Optional[list] = None       # ligand snapshots at sample times

    def ok(self) -> bool:
        return not self.failures


def initial_macro_state(config: MacroConfig, op: MacroOperator) -> MacroState:
    s = config.suite
    n = op.n
    P, S = op.gamma_w.shape
    return MacroState(t=0.0, l=np.full((n, n), float(s.l0)),
                      r_f=np.full((P, S), float(s.rf0)),
                      r_b=np.full((P, S), float(s.rb0)))


def _barrier_rate(op: MacroOperator, M: float) -> float:
    s = op.config.suite
    if s.mu3 > 0.0:
        f_sup, f_lin = s.mu1 / s.mu3, 0.0
    else:
        f_sup, f_lin = 0.0, s.mu1 / max(s.mu2, 1e-300)
    sigma = 0.0
    if op.gamma_w.shape[1]:
        sigma = float((op.gamma_measure
                       / (op.theta * op.cell_measure)).max())
    rate = f_sup + s.beta * s.receptor_bound * sigma
    return f_lin + rate / max(M, 1e-9)


def run_macro(config: MacroConfig, op: Optional[MacroOperator] = None,
              n_samples: int = 20, keep_fields: bool = False) -> MacroRun:
    """Integrate to T, recording the same observable schema as run_micro."""
    if op is None:
        op = assemble_macro(config)
    s = config.suite
    if config.T > 0.0:
        dt_req = config.dt if config.dt is not None else config.H
        if dt_req * s.bulk_lipschitz > 0.5:
            raise ValueError(
                f"dt={dt_req:g} exceeds the explicit reaction budget "
                f"0.5/{s.bulk_lipschitz:g}")
        window = config.T / n_samples
        n_sub = max(1, int(math.ceil(window / dt_req - 1e-12)))
        dt = window / n_sub
        stepper = _MacroStepper(op, dt)
    else:
        n_sub, stepper = 0, None

    state = initial_macro_state(config, op)
    M = float(state.l.max(initial=0.0))
    B = _barrier_rate(op, M)
    H2 = op.H ** 2
    rows = {k: [] for k in ("t", "l2_norm", "min_l", "max_l", "energy",
                            "rf_mass", "rb_mass")}
    failures: list = []
    surf = H2 * op.gamma_w / op.cell_measure[:, None]   # (P, S) mass weights
    snapshots: Optional[list] = [] if keep_fields else None

    def record(st: MacroState):
        if snapshots is not None:
            snapshots.append(st.l.copy())
        mx = float(st.l.max())
        mn = float(st.l.min())
        rows["t"].append(st.t)
        rows["l2_norm"].append(math.sqrt(float(np.sum(st.l ** 2)) * H2))
        rows["min_l"].append(mn)
        rows["max_l"].append(mx)
        rows["energy"].append(macro_energy(st, op))
        rows["rf_mass"].append(float(np.sum(st.r_f * surf)))
        rows["rb_mass"].append(float(np.sum(st.r_b * surf)))
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
                state = macro_step(state, stepper)
            record(state)

    observables = {k: np.array(v) for k, v in rows.items()}
    return MacroRun(config=config, operator=op, observables=observables,
                    final_state=state, barrier_M=M, barrier_B=B,
                    failures=failures, fields=snapshots)
