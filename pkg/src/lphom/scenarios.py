"""Built-in scenario registry and the shared reaction coefficient suite.

Scenarios fix the transform maps D(x), K(x) and the unit cell; numeric
parameters (inclusion radius, gradients of the coefficient fields) are
configurable scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .geometry import TransformField, UnitCellSpec, rotation_matrix


@dataclass(frozen=True)
class CoefficientSuite:
    """Reaction and exchange coefficients of the signaling model.

    F(xi) = mu1 xi / (mu2 + mu3 xi) is the ligand production term and
    p(xi) = kappa1 xi / (kappa2 + kappa3 xi) the receptor production term.
    """

    mu1: float = 1.0
    mu2: float = 1.0
    mu3: float = 1.0
    kappa1: float = 1.0
    kappa2: float = 1.0
    kappa3: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    dl: float = 0.1
    df: float = 0.1
    db: float = 0.1
    A: float = 1.0          # scalar diffusion coefficient
    l0: float = 1.0
    rf0: float = 1.0
    rb0: float = 0.0

    def F(self, xi):
        xi = np.asarray(xi, dtype=float)
        return self.mu1 * xi / (self.mu2 + self.mu3 * xi)

    def p(self, xi):
        xi = np.asarray(xi, dtype=float)
        return self.kappa1 * xi / (self.kappa2 + self.kappa3 * xi)

    @property
    def receptor_bound(self) -> float:
        """Bound on r_f + r_b: max of the initial total and sup p / min decay."""
        p_sup = self.kappa1 / self.kappa3 if self.kappa3 > 0 else math.inf
        return max(self.rf0 + self.rb0, p_sup / min(self.df, self.db))

    @property
    def bulk_lipschitz(self) -> float:
        """Crude Lipschitz bound of the explicit reaction updates."""
        f_slope = self.mu1 / self.mu2 if self.mu2 > 0 else math.inf
        l_ref = 2.0 * max(self.l0, 1.0)
        return max(f_slope + self.dl,
                   self.alpha * l_ref + self.beta + self.df + self.db)


@dataclass(frozen=True)
class Scenario:
    """A named microstructure: transform field plus unit cell."""

    name: str
    transform: TransformField
    cell: UnitCellSpec
    suite: CoefficientSuite = field(default_factory=CoefficientSuite)
    # scalar fields kept for introspection and for the plywood indicator
    gamma: Optional[Callable[[float], float]] = None
    kappa: Optional[Callable[[float], float]] = None
    rho: Optional[Callable[[np.ndarray], float]] = None


def _cell(d: int, a: float) -> UnitCellSpec:
    if a <= 0.0:
        return UnitCellSpec(d=d, inclusion="none", a=0.25)
    shape = "disk" if d == 2 else "cylinder"
    return UnitCellSpec(d=d, inclusion=shape, a=a)


def periodic_scenario(a: float = 0.25, suite: CoefficientSuite = CoefficientSuite()) -> Scenario:
    I = np.eye(2)
    tf = TransformField(d=2, D=lambda x: I, K=lambda x: I,
                        detD_bounds=(1.0, 1.0), detK_bounds=(1.0, 1.0),
                        lipschitz_budget=0.0, name="periodic")
    return Scenario("periodic", tf, _cell(2, a), suite)


def epithelial_scenario(a: float = 0.25, kappa_base: float = 0.7,
                        kappa_slope: float = 0.25,
                        suite: CoefficientSuite = CoefficientSuite()) -> Scenario:
    """Cells compressed in the second direction: D = diag(1, kappa(x2))."""

    def kappa(x2: float) -> float:
        return kappa_base + kappa_slope * x2

    def D(x):
        return np.diag([1.0, kappa(x[1])])

    I = np.eye(2)
    k_lo = min(kappa(0.0), kappa(1.0))
    k_hi = max(kappa(0.0), kappa(1.0))
    if not (0.0 < k_lo and k_hi < 1.0):
        raise ValueError("epithelial compression must stay in (0, 1)")
    tf = TransformField(d=2, D=D, K=lambda x: I,
                        detD_bounds=(k_lo, k_hi), detK_bounds=(1.0, 1.0),
                        lipschitz_budget=abs(kappa_slope) + 0.1, name="epithelial")
    return Scenario("epithelial", tf, _cell(2, a), suite, kappa=kappa)


def plywood2d_scenario(a: float = 0.25, gamma_rate: float = math.pi / 2,
                       k2: float = 1.4,
                       suite: CoefficientSuite = CoefficientSuite()) -> Scenario:
    """Layered fibers: D = R(gamma(x2))^{-1} with an elliptical inclusion."""

    def gamma(x2: float) -> float:
        return gamma_rate * x2

    def D(x):
        return np.linalg.inv(rotation_matrix(gamma(x[1]), 2))

    Kmat = np.diag([1.0, k2])
    if k2 * a >= 0.5 or a >= 0.5:
        raise ValueError("elliptical inclusion leaves the unit cell")
    tf = TransformField(d=2, D=D, K=lambda x: Kmat,
                        detD_bounds=(1.0, 1.0), detK_bounds=(k2, k2),
                        lipschitz_budget=abs(gamma_rate) + 0.1, name="plywood2d")
    return Scenario("plywood2d", tf, _cell(2, a), suite, gamma=gamma)


def radius_gradient_scenario(a: float = 0.25, rho_base: float = 1.0,
                             rho_slope: float = 0.5,
                             suite: CoefficientSuite = CoefficientSuite()) -> Scenario:
    """Perforation radius grows along x1: K = rho(x1) I."""

    def rho(x) -> float:
        return rho_base + rho_slope * float(np.asarray(x)[0])

    def K(x):
        return np.diag([rho(x), rho(x)])

    I = np.eye(2)
    r_lo = min(rho([0.0, 0.0]), rho([1.0, 0.0]))
    r_hi = max(rho([0.0, 0.0]), rho([1.0, 0.0]))
    if r_hi * a >= 0.5:
        raise ValueError("scaled perforation leaves the unit cell")
    tf = TransformField(d=2, D=lambda x: I, K=K,
                        detD_bounds=(1.0, 1.0), detK_bounds=(r_lo**2, r_hi**2),
                        lipschitz_budget=2.0 * abs(rho_slope) + 0.1,
                        name="radius-gradient")
    return Scenario("radius-gradient", tf, _cell(2, a), suite, rho=rho)


SCENARIO_NAMES = ("periodic", "epithelial", "plywood2d", "radius-gradient")


def get_scenario(name: str, a: float = 0.25,
                 suite: Optional[CoefficientSuite] = None, **params) -> Scenario:
    """Build a registry scenario by name with scalar parameter overrides."""
    suite = suite if suite is not None else CoefficientSuite()
    if name == "periodic":
        return periodic_scenario(a=a, suite=suite)
    if name == "epithelial":
        return epithelial_scenario(a=a, suite=suite,
                                   kappa_base=params.get("kappa_base", 0.7),
                                   kappa_slope=params.get("kappa_slope", 0.25))
    if name == "plywood2d":
        return plywood2d_scenario(a=a, suite=suite,
                                  gamma_rate=params.get("gamma_rate", math.pi / 2),
                                  k2=params.get("k2", 1.4))
    if name == "radius-gradient":
        return radius_gradient_scenario(a=a, suite=suite,
                                        rho_base=params.get("rho_base", 1.0),
                                        rho_slope=params.get("rho_slope", 0.5))
    raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIO_NAMES}")
