"""Macroscopic fluxes by exact summation over pairs of tilted sites.

Psi and Phi are expectations of the instantaneous pair currents under the
product measure pi_{rho,u} x pi_{rho,u}.  Derivatives are centered finite
differences with one Richardson step; the flux curvature gamma at the corner
(0,0) of the domain is obtained by extrapolating along rho = eps^2, u = 0.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .models import microscopic_fluxes
from .thermo import DomainPolygon, invert_parameters_grid, gibbs_measure


class NormalizationWarning(UserWarning):
    """Psi_{rho u}(0,0) deviates from 1; a time rescale would be needed."""


FD_STEP = 1e-3          # base step; Richardson combines h and h/2


def _richardson(f, x, y, h, mode):
    """Second-order centered differences extrapolated once (h, h/2)."""

    def d(hh):
        if mode == "rho":
            return (f(x + hh, y) - f(x - hh, y)) / (2 * hh)
        if mode == "u":
            return (f(x, y + hh) - f(x, y - hh)) / (2 * hh)
        if mode == "uu":
            return (f(x, y + hh) - 2 * f(x, y) + f(x, y - hh)) / hh ** 2
        if mode == "rho_u":
            return (f(x + hh, y + hh) - f(x + hh, y - hh)
                    - f(x - hh, y + hh) + f(x - hh, y - hh)) / (4 * hh ** 2)
        raise ValueError(mode)

    d1, d2 = d(h), d(h / 2)
    return (4.0 * d2 - d1) / 3.0


@dataclass
class FluxPair:
    """Evaluable macroscopic fluxes of one model with FD partials.

    ``Phi`` is centered so that Phi(0,0) = 0, which the intermediate scaling
    requires; ``Phi_raw`` keeps the plain pair-current expectation.
    """

    model: object
    domain: DomainPolygon
    gamma: float = None
    psi_ru_origin: float = None
    _psi_tab: np.ndarray = field(default=None, repr=False)
    _phi_tab: np.ndarray = field(default=None, repr=False)
    _phi_origin: float = field(default=None, repr=False)

    def __post_init__(self):
        psi, phi, _, _ = microscopic_fluxes(self.model)
        self._psi_tab = psi
        self._phi_tab = phi
        if self._phi_origin is None:
            # Phi_raw on the boundary segment rho=0: corner extrapolation
            self._phi_origin = _corner_limit(lambda r, u: self._raw(r, u)[1])
        if self.gamma is None:
            self.gamma = 0.5 * _corner_limit(
                lambda r, u: _richardson(lambda a, b: self._raw(a, b)[1],
                                         r, u, FD_STEP, "uu"))
        if self.psi_ru_origin is None:
            self.psi_ru_origin = _corner_limit(
                lambda r, u: _richardson(lambda a, b: self._raw(a, b)[0],
                                         r, u, FD_STEP, "rho_u"))
            if abs(self.psi_ru_origin - 1.0) > 1e-6:
                warnings.warn(
                    f"Psi_ru(0,0) = {self.psi_ru_origin:.8f} != 1; rescale time",
                    NormalizationWarning)

    def _tilted(self, rho, u):
        rho = np.asarray(rho, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast(rho, u).shape
        # the rho=0 edge is a chemical-potential limit; back off by a hair
        rho_eval = np.maximum(np.broadcast_to(rho, shape).astype(float), 1e-11)
        tau, theta, _ = invert_parameters_grid(self.model, rho_eval, u)
        m = self.model
        x = (np.asarray(tau).reshape(-1, 1) * m.eta[None, :]
             + np.asarray(theta).reshape(-1, 1) * m.zeta[None, :])
        w = m.pi[None, :] * np.exp(x - x.max(axis=1, keepdims=True))
        p = w / w.sum(axis=1, keepdims=True)
        return p, shape

    def _raw(self, rho, u):
        """(Psi, Phi_raw) by exact double sums; accepts arrays."""
        p, shape = self._tilted(rho, u)
        psi = np.einsum("ia,ab,ib->i", p, self._psi_tab, p)
        phi = np.einsum("ia,ab,ib->i", p, self._phi_tab, p)
        return psi.reshape(shape), phi.reshape(shape)

    def _raw_with_grads(self, rho, u):
        """Fluxes plus exact first partials via the covariance chain rule.

        d/dtau of E[f] under the tilted pair measure is Cov(f, eta_1+eta_2),
        and (tau, theta) -> (rho, u) has Jacobian equal to the single-site
        covariance matrix, so no finite differencing is involved.  This stays
        well defined arbitrarily close to the rho = 0 edge.
        """
        p, shape = self._tilted(rho, u)
        m = self.model
        e, z = m.eta.astype(float), m.zeta
        mean_e = p @ e
        mean_z = p @ z
        c11 = p @ (e * e) - mean_e ** 2
        c12 = p @ (e * z) - mean_e * mean_z
        c22 = p @ (z * z) - mean_z ** 2
        out = []
        for tab in (self._psi_tab, self._phi_tab):
            val = np.einsum("ia,ab,ib->i", p, tab, p)
            # Cov(f, eta_1 + eta_2) and Cov(f, zeta_1 + zeta_2)
            fe = (np.einsum("ia,ab,ib,a->i", p, tab, p, e)
                  + np.einsum("ia,ab,ib,b->i", p, tab, p, e))
            fz = (np.einsum("ia,ab,ib,a->i", p, tab, p, z)
                  + np.einsum("ia,ab,ib,b->i", p, tab, p, z))
            d_tau = fe - 2.0 * mean_e * val
            d_theta = fz - 2.0 * mean_z * val
            det = c11 * c22 - c12 * c12
            d_rho = (d_tau * c22 - d_theta * c12) / det
            d_u = (-d_tau * c12 + d_theta * c11) / det
            out.append((val.reshape(shape), d_rho.reshape(shape),
                        d_u.reshape(shape)))
        return out

    # -- flux values ------------------------------------------------------
    def Psi(self, rho, u):
        return self._raw(rho, u)[0]

    def Phi(self, rho, u):
        return self._raw(rho, u)[1] - self._phi_origin

    def Phi_raw(self, rho, u):
        return self._raw(rho, u)[1]

    # -- first partials (exact sums, no finite differences) ---------------
    def Psi_rho(self, rho, u):
        return self._raw_with_grads(rho, u)[0][1]

    def Psi_u(self, rho, u):
        return self._raw_with_grads(rho, u)[0][2]

    def Phi_rho(self, rho, u):
        return self._raw_with_grads(rho, u)[1][1]

    def Phi_u(self, rho, u):
        return self._raw_with_grads(rho, u)[1][2]

    def gradients(self, rho, u):
        """(Psi_rho, Psi_u, Phi_rho, Phi_u) in one evaluation."""
        (_, pr, pu), (_, fr, fu) = self._raw_with_grads(rho, u)
        return pr, pu, fr, fu

    def Phi_uu(self, rho, u, h=FD_STEP):
        return _richardson(self.Phi, rho, u, h, "uu")

    def Psi_rho_u(self, rho, u, h=FD_STEP):
        return _richardson(self.Psi, rho, u, h, "rho_u")

    def export_csv(self, path, rho_grid, u_grid):
        """Write a `rho,u,Psi,Phi,Psi_rho,Psi_u,Phi_rho,Phi_u` table."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["rho", "u", "Psi", "Phi", "Psi_rho", "Psi_u",
                         "Phi_rho", "Phi_u"])
            for r in rho_grid:
                for u in u_grid:
                    wr.writerow([f"{r:.12g}", f"{u:.12g}",
                                 f"{float(self.Psi(r, u)):.12g}",
                                 f"{float(self.Phi(r, u)):.12g}",
                                 f"{float(self.Psi_rho(r, u)):.12g}",
                                 f"{float(self.Psi_u(r, u)):.12g}",
                                 f"{float(self.Phi_rho(r, u)):.12g}",
                                 f"{float(self.Phi_u(r, u)):.12g}"])


def _corner_limit(f, eps0=0.2, levels=3):
    """Limit of f(eps^2, 0) as eps -> 0 by Richardson in eps^2.

    The corner (0,0) sits on the domain boundary, so quantities there are
    defined as limits along rho = eps^2; the low-density expansion makes the
    error analytic in rho = eps^2.
    """
    eps = eps0 / 2.0 ** np.arange(levels)
    vals = np.array([float(f(e ** 2, 0.0)) for e in eps])
    # vals(e) = L + c1 e^2 + c2 e^4 + ...
    for k in range(1, levels):
        fac = 4.0 ** k
        vals = (fac * vals[1:] - vals[:-1]) / (fac - 1.0)
    return float(vals[0])


def macroscopic_flux(model):
    """Build the FluxPair of a model (requires conditions (A),(C)-(E))."""
    return FluxPair(model, DomainPolygon.from_model(model))


def onsager_residual(model, rho, u, flux=None):
    """Defect of the reciprocity relation

    Psi_u Var(zeta) - Phi_u Cov(eta,zeta) = Phi_rho Var(eta) - Psi_rho Cov(eta,zeta)

    with all moments evaluated by exact sums under pi_{rho,u}.
    """
    fp = flux if flux is not None else macroscopic_flux(model)
    tau, theta, _ = invert_parameters_grid(model, rho, u)
    p = gibbs_measure(model, float(tau), float(theta))
    e, z = model.eta, model.zeta
    var_e = p @ (e * e) - (p @ e) ** 2
    var_z = p @ (z * z) - (p @ z) ** 2
    cov = p @ (e * z) - (p @ e) * (p @ z)
    lhs = fp.Psi_u(rho, u) * var_z - fp.Phi_u(rho, u) * cov
    rhs = fp.Phi_rho(rho, u) * var_e - fp.Psi_rho(rho, u) * cov
    return float(abs(lhs - rhs))
