"""Discrete locally periodic unfolding operators and their integral identities.

Bulk and perforated unfolding, boundary unfolding with metric factors, the
local average operator, the micro-macro interpolant Q with remainder R, and
the pairing functional used to diagnose locally periodic two-scale limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import (
    Partition,
    ScalarFieldOnCells,
    TransformField,
    UnitCellSpec,
    locate_batch,
    lp_approx_batch,
)


@dataclass
class GridFunction:
    """Cell-centered values on a uniform Cartesian grid over a box.

    mask marks active cells (inside the domain, or inside the perforated
    domain). Point evaluation is bilinear in the cell-center values with
    linear extrapolation beyond the outermost centers, so affine fields are
    reproduced exactly everywhere. exact_eval, when set, is the underlying
    analytic field; consumers may sample it instead of interpolating to keep
    interpolation error out of convergence diagnostics.
    """

    lo: np.ndarray
    hi: np.ndarray
    h: float
    values: np.ndarray
    mask: Optional[np.ndarray] = None
    exact_eval: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.mask is None:
            self.mask = np.ones_like(self.values, dtype=bool)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.lo[axis] + (np.arange(n) + 0.5) * self.h

    def centers(self) -> np.ndarray:
        xs = [self.axis_centers(i) for i in range(len(self.shape))]
        return np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1)

    def eval(self, X: np.ndarray) -> np.ndarray:
        """Bilinear interpolation at points X of shape (m, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = (X - self.lo) / self.h - 0.5
        n = np.array(self.shape)
        i0 = np.clip(np.floor(t).astype(int), 0, n - 2)
        w = t - i0   # may leave [0,1] at the edges: linear extrapolation
        v = self.values
        i, j = i0[:, 0], i0[:, 1]
        wx, wy = w[:, 0], w[:, 1]
        return ((1 - wx) * (1 - wy) * v[i, j] + wx * (1 - wy) * v[i + 1, j]
                + (1 - wx) * wy * v[i, j + 1] + wx * wy * v[i + 1, j + 1])

    def integrate(self) -> float:
        """Grid integral over active cells (midpoint rule)."""
        return float(self.h ** len(self.shape) * self.values[self.mask].sum())

    def copy_with(self, values: np.ndarray, exact_eval=None) -> "GridFunction":
        return GridFunction(self.lo.copy(), self.hi.copy(), self.h,
                            values, self.mask.copy(), exact_eval)


def grid_function_from_callable(f: Callable[[np.ndarray], np.ndarray],
                                lo, hi, h: float,
                                keep_exact: bool = True) -> GridFunction:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = [int(round((hi[i] - lo[i]) / h)) for i in range(len(lo))]
    xs = [lo[i] + (np.arange(n[i]) + 0.5) * h for i in range(len(lo))]
    X = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, len(lo))
    vals = np.asarray(f(X), dtype=float).reshape(n)
    return GridFunction(lo, hi, h, vals, exact_eval=f if keep_exact else None)


def lattice_pwc_field(partition: Partition, cell_values: dict,
                      lo, hi, h: float, fill: float = 0.0) -> GridFunction:
    """Piecewise constant per lattice cell, keyed by (n, xi); exact-evaluable.

    Values default to fill on leftover regions and unlisted cells.
    """

    def f(X: np.ndarray) -> np.ndarray:
        n, xi, _, lam = locate_batch(partition, X)
        out = np.full(len(X), fill)
        for i in range(len(X)):
            if not lam[i]:
                out[i] = cell_values.get((int(n[i]), tuple(int(t) for t in xi[i])), fill)
        return out

    return grid_function_from_callable(f, lo, hi, h, keep_exact=True)


def _unit_cell_nodes(m_y: int, d: int) -> np.ndarray:
    """Tensor midpoint nodes over Y = (0,1)^d."""
    one = (np.arange(m_y) + 0.5) / m_y
    return np.stack(np.meshgrid(*([one] * d), indexing="ij"), axis=-1).reshape(-1, d)


@dataclass
class UnfoldedGrid:
    """Samples of the unfolded function indexed by (subdomain, cell, node).

    weight is the macro weight per sample, eps^d |det D_n| / m_y^d; entries
    exist only for cells in Xi_hat, the operator vanishes on leftover regions.
    """

    m_y: int
    d: int
    sub_index: np.ndarray          # (E,)
    xi: np.ndarray                 # (E, d)
    values: np.ndarray             # (E, m)
    weight: np.ndarray             # (E,) per-sample macro weight
    y_nodes: np.ndarray            # (m, d)
    sample_mask: Optional[np.ndarray] = None   # (E, m), perforated mode

    @property
    def n_entries(self) -> int:
        return len(self.xi)

    def _m(self) -> np.ndarray:
        if self.sample_mask is None:
            return np.ones_like(self.values, dtype=bool)
        return self.sample_mask

    def weighted_sum(self) -> float:
        m = self._m()
        return float(np.sum(self.weight[:, None] * np.where(m, self.values, 0.0)))

    def total_weight(self) -> float:
        return float(np.sum(self.weight[:, None] * self._m()))

    def weighted_l2(self) -> float:
        m = self._m()
        return math.sqrt(float(np.sum(self.weight[:, None]
                                      * np.where(m, self.values, 0.0) ** 2)))

    def mean_over_Y(self) -> np.ndarray:
        """Per-entry mean over the unit cell (equal midpoint weights)."""
        m = self._m()
        return np.sum(np.where(m, self.values, 0.0), axis=1) / np.maximum(
            np.sum(m, axis=1), 1)


def unfold(phi: GridFunction, partition: Partition, transform: TransformField,
           m_y: int, mask_mode: str = "bulk",
           cell: Optional[UnitCellSpec] = None,
           eval_mode: str = "grid") -> UnfoldedGrid:
    """Discrete locally periodic unfolding.

    Samples phi at the mapped points shift_n + eps D_n (xi + y) for every
    xi in Xi_hat_n and y on an m_y x m_y midpoint grid over Y. Perforated
    mode drops sample nodes inside the reference inclusion (supported for
    K = I only). eval_mode "exact" samples phi.exact_eval when available.
    """
    if m_y < 2:
        raise ValueError("m_y must be at least 2")
    if mask_mode not in ("bulk", "perforated"):
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    if eval_mode not in ("grid", "exact"):
        raise ValueError(f"unknown eval mode {eval_mode!r}")
    d = partition.d
    y_nodes = _unit_cell_nodes(m_y, d)
    sample_mask = None
    if mask_mode == "perforated":
        if cell is None:
            raise ValueError("perforated mode needs the unit cell")
        for s in partition.subdomains:
            if np.max(np.abs(s.K - np.eye(d))) > 1e-13:
                raise ValueError("perforated unfolding supports K = I only")
        keep = np.linalg.norm(y_nodes - cell.center, axis=1) > cell.a \
            if cell.inclusion != "none" else np.ones(len(y_nodes), dtype=bool)
    evaluate = phi.eval
    if eval_mode == "exact":
        if phi.exact_eval is None:
            raise ValueError("grid function carries no exact evaluation")
        evaluate = phi.exact_eval

    subs, xis, vals, wts = [], [], [], []
    for s in partition.subdomains:
        if not len(s.xi_hat):
            continue
        pts = s.shift + partition.eps * np.einsum(
            "ij,ckj->cki", s.D, s.xi_hat[:, None, :].astype(float) + y_nodes[None, :, :])
        v = np.asarray(evaluate(pts.reshape(-1, d)), dtype=float).reshape(
            len(s.xi_hat), len(y_nodes))
        subs.append(np.full(len(s.xi_hat), s.n))
        xis.append(s.xi_hat)
        vals.append(v)
        wts.append(np.full(len(s.xi_hat),
                           partition.eps**d * s.detD / len(y_nodes)))
    if subs:
        sub_index = np.concatenate(subs)
        xi = np.concatenate(xis)
        values = np.concatenate(vals)
        weight = np.concatenate(wts)
    else:
        sub_index = np.zeros(0, dtype=int)
        xi = np.zeros((0, d), dtype=int)
        values = np.zeros((0, len(y_nodes)))
        weight = np.zeros(0)
    if mask_mode == "perforated":
        sample_mask = np.broadcast_to(keep, values.shape).copy()
    return UnfoldedGrid(m_y=m_y, d=d, sub_index=sub_index, xi=xi,
                        values=values, weight=weight, y_nodes=y_nodes,
                        sample_mask=sample_mask)


@dataclass
class GammaQuadrature:
    """Midpoint rule on n_gamma equal-parameter arcs of the reference circle."""

    cell: UnitCellSpec
    n_gamma: int = 16

    def __post_init__(self):
        if self.cell.inclusion == "none":
            raise ValueError("boundary quadrature needs an inclusion")
        th = 2.0 * math.pi * (np.arange(self.n_gamma) + 0.5) / self.n_gamma
        a = self.cell.a
        self.theta = th
        self.nodes = self.cell.center + a * np.stack(
            [np.cos(th), np.sin(th)], axis=1)          # on the reference circle
        self.tangents = np.stack([-np.sin(th), np.cos(th)], axis=1)  # unit
        self.ref_weights = np.full(self.n_gamma, 2.0 * math.pi * a / self.n_gamma)

    @property
    def reference_measure(self) -> float:
        return float(self.ref_weights.sum())


@dataclass
class BoundaryUnfolded:
    """Boundary unfolding samples indexed by (subdomain, cell, arc node).

    metric holds the mapped tangent length |D_n K_n u(theta_s)|, the ratio of
    mapped to reference surface measure.
    """

    eps: float
    d: int
    sub_index: np.ndarray       # (E,)
    xi: np.ndarray              # (E, d)
    values: np.ndarray          # (E, S)
    ref_weights: np.ndarray     # (S,)
    metric: np.ndarray          # (E, S)
    detD: np.ndarray            # (E,)
    mapped_points: np.ndarray   # (E, S, d)

    def surface_measure(self) -> float:
        """Quadrature measure of the mapped interior boundary."""
        return float(self.eps ** (self.d - 1)
                     * np.sum(self.metric * self.ref_weights[None, :]))

    def weighted_power_sum(self, p: float = 2.0) -> float:
        """Unfolded surface functional: the x-integral of the weighted
        Gamma-integral of |values|^p with the metric ratio and the local cell
        measure |Y_n| = |det D_n|."""
        integrand = np.abs(self.values) ** p * self.metric * self.ref_weights[None, :]
        percell = integrand.sum(axis=1) / self.detD
        return float(np.sum(self.eps ** self.d * self.detD * percell))

    def direct_surface_integral(self, p: float = 2.0) -> float:
        """Direct quadrature of |psi|^p over the mapped boundary, same nodes."""
        ds = self.eps ** (self.d - 1) * self.metric * self.ref_weights[None, :]
        return float(np.sum(np.abs(self.values) ** p * ds))


def unfold_boundary(psi, partition: Partition, transform: TransformField,
                    cell: UnitCellSpec, quad: GammaQuadrature) -> BoundaryUnfolded:
    """Boundary unfolding on the mapped inclusion boundaries.

    psi is a callable on the domain or any object with an eval(X) method.
    Nodes are mapped by shift_n + eps D_n (xi + c + K_n (y(s) - c)): the
    inclusion is centered at the cell midpoint and K acts about it.
    """
    evaluate = psi.eval if hasattr(psi, "eval") else psi
    d = partition.d
    c = cell.center
    subs, xis, vals, mets, dets, pts_all = [], [], [], [], [], []
    for s in partition.subdomains:
        if not len(s.xi_hat):
            continue
        mapped_y = c + (quad.nodes - c) @ s.K.T          # (S, d)
        pts = s.shift + partition.eps * np.einsum(
            "ij,ckj->cki", s.D,
            s.xi_hat[:, None, :].astype(float) + mapped_y[None, :, :])
        v = np.asarray(evaluate(pts.reshape(-1, d)), dtype=float).reshape(
            len(s.xi_hat), quad.n_gamma)
        g = np.linalg.norm((s.D @ s.K @ quad.tangents.T), axis=0)   # (S,)
        subs.append(np.full(len(s.xi_hat), s.n))
        xis.append(s.xi_hat)
        vals.append(v)
        mets.append(np.broadcast_to(g, v.shape).copy())
        dets.append(np.full(len(s.xi_hat), s.detD))
        pts_all.append(pts)
    if subs:
        return BoundaryUnfolded(
            eps=partition.eps, d=d,
            sub_index=np.concatenate(subs), xi=np.concatenate(xis),
            values=np.concatenate(vals), ref_weights=quad.ref_weights,
            metric=np.concatenate(mets), detD=np.concatenate(dets),
            mapped_points=np.concatenate(pts_all))
    return BoundaryUnfolded(eps=partition.eps, d=d,
                            sub_index=np.zeros(0, dtype=int),
                            xi=np.zeros((0, d), dtype=int),
                            values=np.zeros((0, quad.n_gamma)),
                            ref_weights=quad.ref_weights,
                            metric=np.zeros((0, quad.n_gamma)),
                            detD=np.zeros(0),
                            mapped_points=np.zeros((0, quad.n_gamma, d)))


def local_average(phi: GridFunction, partition: Partition,
                  transform: TransformField, m_y: int = 4) -> GridFunction:
    """Local average: per lattice cell the mean over Y, zero on leftovers.

    Uses the exact evaluation path of phi when available so that repeated
    application is an exact projection. The returned field is piecewise
    constant per lattice cell and carries an exact evaluator.
    """
    mode = "exact" if phi.exact_eval is not None else "grid"
    ug = unfold(phi, partition, transform, m_y, eval_mode=mode)
    means = ug.mean_over_Y()
    table = {(int(ug.sub_index[e]), tuple(int(t) for t in ug.xi[e])): means[e]
             for e in range(ug.n_entries)}
    out = lattice_pwc_field(partition, table, phi.lo, phi.hi, phi.h, fill=0.0)
    out.mask = phi.mask.copy()
    return out


def _interpolant_cell_integral(phi: GridFunction, lo_pt: np.ndarray,
                               hi_pt: np.ndarray) -> float:
    """Exact integral of the bilinear interpolant over an axis-aligned box.

    Per-axis hat-function weights; the interpolant extends linearly beyond
    the outermost cell centers.
    """
    wvecs = []
    idx0 = []
    for ax in range(2):
        centers = phi.axis_centers(ax)
        n = len(centers)
        p, q = float(lo_pt[ax]), float(hi_pt[ax])
        # segment breakpoints: centers strictly inside (p, q), plus p and q
        inner = centers[(centers > p) & (centers < q)]
        brk = np.concatenate(([p], inner, [q]))
        w = np.zeros(n)
        for s0, s1 in zip(brk[:-1], brk[1:]):
            # linear on [s0, s1]; express endpoint values in the two
            # bracketing center values (extrapolated at the edges)
            mid = 0.5 * (s0 + s1)
            j = int(np.clip(np.floor((mid - phi.lo[ax]) / phi.h - 0.5), 0, n - 2))
            for s in (s0, s1):
                u = (s - centers[j]) / phi.h
                w[j] += 0.5 * (s1 - s0) * (1.0 - u)
                w[j + 1] += 0.5 * (s1 - s0) * u
        wvecs.append(w)
        idx0.append(0)
    return float(wvecs[0] @ phi.values @ wvecs[1])


def check_integration_identity(phi: GridFunction, partition: Partition,
                               transform: TransformField, m_y: int,
                               eval_mode: str = "grid"):
    """Integration identity of the unfolding operator.

    lhs: weighted sum of the unfolded samples per unit cell volume.
    rhs: integral of phi over the covered region, cell by cell: the exact
    integral of the bilinear interpolant for axis-aligned lattices, fine
    midpoint subsampling otherwise (and for the exact evaluation path).
    Returns (lhs, rhs, gap).
    """
    ug = unfold(phi, partition, transform, m_y, eval_mode=eval_mode)
    lhs = ug.weighted_sum()

    d = partition.d
    rhs = 0.0
    diag_ok = all(np.max(np.abs(s.D - np.diag(np.diag(s.D)))) < 1e-14
                  for s in partition.subdomains)
    if diag_ok and eval_mode == "grid":
        for s in partition.subdomains:
            diagD = np.diag(s.D)
            for xi in s.xi_hat:
                p0 = s.shift + partition.eps * diagD * xi
                p1 = s.shift + partition.eps * diagD * (xi + 1)
                lo_pt, hi_pt = np.minimum(p0, p1), np.maximum(p0, p1)
                rhs += _interpolant_cell_integral(phi, lo_pt, hi_pt)
    else:
        m_ref = 3 * m_y + 1   # independent of the lhs sample set
        y_f = _unit_cell_nodes(m_ref, d)
        evaluate = phi.exact_eval if (eval_mode == "exact") else phi.eval
        for s in partition.subdomains:
            if not len(s.xi_hat):
                continue
            pts = s.shift + partition.eps * np.einsum(
                "ij,ckj->cki", s.D,
                s.xi_hat[:, None, :].astype(float) + y_f[None, :, :])
            v = np.asarray(evaluate(pts.reshape(-1, d)), dtype=float)
            rhs += partition.eps**d * s.detD * float(v.sum()) / len(y_f)
    return lhs, rhs, abs(lhs - rhs)


def check_boundary_identity(psi, partition: Partition, transform: TransformField,
                            cell: UnitCellSpec, quad: GammaQuadrature,
                            p: float = 2.0):
    """Boundary unfolding identity.

    lhs: unfolded surface functional with metric ratio and cell-measure
    weights. rhs: eps times the direct quadrature of |psi|^p over the mapped
    interior boundary, same nodes. Returns (lhs, rhs, gap).
    """
    bu = unfold_boundary(psi, partition, transform, cell, quad)
    lhs = bu.weighted_power_sum(p)
    rhs = partition.eps * bu.direct_surface_integral(p)
    return lhs, rhs, abs(lhs - rhs)


@dataclass
class QInterpolant:
    """Multilinear interpolant of cell-averaged node values.

    The node at lattice point xi carries the average of phi over the cell
    anchored there; a lattice cell is usable when the full averaging stencil
    (the 2^d cells anchored at its corners) lies inside the covered region.
    Constants are reproduced exactly; affine fields are reproduced up to an
    exact half-cell shift of the argument, so the remainder of a smooth field
    is of first order in eps.
    """

    partition: Partition
    node_values: dict            # (n, node multi-index) -> value
    usable_cells: dict           # n -> (m, d) int array

    def eval_cells(self, phi: GridFunction, points_per_axis: int):
        """Q and R = phi - Q sampled on a midpoint grid of each usable cell.

        Returns (q_vals, r_vals, points, weights) flattened over cells and
        samples.
        """
        part = self.partition
        d = part.d
        y = _unit_cell_nodes(points_per_axis, d)
        corners = np.stack([np.array(c, dtype=float)
                            for c in np.ndindex(*(2,) * d)])   # (2^d, d)
        q_all, r_all, p_all, w_all = [], [], [], []
        for s in part.subdomains:
            cells = self.usable_cells.get(s.n)
            if cells is None or not len(cells):
                continue
            corner_vals = np.array([
                [self.node_values[(s.n, tuple(int(t) for t in (xi + c).astype(int)))]
                 for c in corners] for xi in cells])              # (m, 2^d)
            # multilinear weights in the fractional coordinate
            wts = np.ones((len(y), len(corners)))
            for ax in range(d):
                wax = np.where(corners[None, :, ax] > 0.5,
                               y[:, None, ax], 1.0 - y[:, None, ax])
                wts *= wax
            qv = corner_vals @ wts.T                              # (m, S)
            pts = s.shift + part.eps * np.einsum(
                "ij,ckj->cki", s.D, cells[:, None, :].astype(float) + y[None, :, :])
            fv = (phi.exact_eval if phi.exact_eval is not None else phi.eval)(
                pts.reshape(-1, d)).reshape(qv.shape)
            q_all.append(qv.ravel())
            r_all.append((fv - qv).ravel())
            p_all.append(pts.reshape(-1, d))
            w_all.append(np.full(qv.size, part.eps**d * s.detD / len(y)))
        if not q_all:
            z = np.zeros(0)
            return z, z, np.zeros((0, d)), z
        return (np.concatenate(q_all), np.concatenate(r_all),
                np.concatenate(p_all), np.concatenate(w_all))


def interpolate_Q(phi: GridFunction, partition: Partition,
                  transform: TransformField, m_y: int = 4) -> QInterpolant:
    """Micro-macro interpolant: the node at lattice point xi carries the
    average of phi over the cell anchored at xi; values inside a cell are the
    multilinear interpolant of its corner node values."""
    mode = "exact" if phi.exact_eval is not None else "grid"
    ug = unfold(phi, partition, transform, m_y, eval_mode=mode)
    means = ug.mean_over_Y()
    d = partition.d
    node_values = {}
    for e in range(ug.n_entries):
        node_values[(int(ug.sub_index[e]),
                     tuple(int(t) for t in ug.xi[e]))] = float(means[e])

    offsets = [np.array(c) for c in np.ndindex(*(2,) * d)]
    usable = {}
    for s in partition.subdomains:
        hat = set(map(tuple, s.xi_hat))
        good = [xi for xi in s.xi_hat
                if all(tuple(int(t) for t in xi + c) in hat for c in offsets)]
        usable[s.n] = np.array(good, dtype=int).reshape(-1, d)
    return QInterpolant(partition=partition, node_values=node_values,
                        usable_cells=usable)


def remainder_R(phi: GridFunction, partition: Partition,
                transform: TransformField, m_y: int = 4,
                points_per_axis: int = 4, grad=None):
    """Remainder diagnostics of the micro-macro interpolant on usable cells.

    Returns (r_norm, grad_norm, region_measure): the L2 norms of phi - Q(phi)
    and of the gradient of phi over the same region. grad is an optional
    callable X -> (m, d); central differences of phi otherwise.
    """
    qi = interpolate_Q(phi, partition, transform, m_y=m_y)
    _, r, pts, w = qi.eval_cells(phi, points_per_axis)
    r_norm = math.sqrt(float(np.sum(w * r**2)))
    if len(pts) == 0:
        return r_norm, 0.0, 0.0
    if grad is not None:
        g = np.asarray(grad(pts), dtype=float)
    else:
        evaluate = phi.exact_eval if phi.exact_eval is not None else phi.eval
        delta = 1e-6
        g = np.empty_like(pts)
        for ax in range(pts.shape[1]):
            dp, dm = pts.copy(), pts.copy()
            dp[:, ax] += delta
            dm[:, ax] -= delta
            g[:, ax] = (evaluate(dp) - evaluate(dm)) / (2 * delta)
    grad_norm = math.sqrt(float(np.sum(w * np.sum(g**2, axis=1))))
    return r_norm, grad_norm, float(np.sum(w))


def lts_pairing(u: GridFunction, psi: ScalarFieldOnCells, partition: Partition,
                transform: TransformField) -> float:
    """Grid quadrature of u times the locally periodic approximation of psi."""
    d = len(u.shape)
    X = u.centers().reshape(-1, d)
    act = u.mask.ravel()
    vals = lp_approx_batch(psi, partition, X[act], variant="L")
    return float(u.h**d * np.sum(u.values.ravel()[act] * vals))


def norm_unfold_minus_identity(phi: GridFunction, partition: Partition,
                               transform: TransformField, m_y: int) -> float:
    """L2 distance between the unfolded field and the field itself.

    Both arguments of |T(phi)(x, y) - phi(x)| are sampled on the same
    midpoint set per lattice cell (independent x and y indices), an exact
    double quadrature on the product of the cell with Y.
    """
    mode = "exact" if phi.exact_eval is not None else "grid"
    ug = unfold(phi, partition, transform, m_y, eval_mode=mode)
    total = 0.0
    for e in range(ug.n_entries):
        v = ug.values[e]
        diff = v[None, :] - v[:, None]      # x-sample index first
        total += ug.weight[e] / len(v) * float(np.sum(diff**2))
    return math.sqrt(total)


def norm_unfold_of_lp_minus_psi(psi: ScalarFieldOnCells, partition: Partition,
                                transform: TransformField, m_y: int,
                                lo, hi, h: float) -> float:
    """L2 distance between the unfolded locally periodic approximation and
    the two-scale field itself, sampled per cell in (x, y)."""
    lp_field = grid_function_from_callable(
        lambda X: lp_approx_batch(psi, partition, X, variant="L"),
        lo, hi, h, keep_exact=True)
    ug = unfold(lp_field, partition, transform, m_y, eval_mode="exact")
    d = partition.d
    total = 0.0
    for s in partition.subdomains:
        sel = np.where(ug.sub_index == s.n)[0]
        if not len(sel):
            continue
        pts = s.shift + partition.eps * np.einsum(
            "ij,ckj->cki", s.D,
            ug.xi[sel][:, None, :].astype(float) + ug.y_nodes[None, :, :])
        m = len(ug.y_nodes)
        for row, e in enumerate(sel):
            x_samples = pts[row]                       # (m, d)
            # psi_tilde(x_t, y_s) on the product of sample sets
            Xrep = np.repeat(x_samples, m, axis=0)
            Yrep = np.tile(ug.y_nodes, (m, 1))
            ps = psi.f(Xrep, Yrep).reshape(m, m)
            diff = ug.values[e][None, :] - ps
            total += ug.weight[e] / m * float(np.sum(diff**2))
    return math.sqrt(total)
