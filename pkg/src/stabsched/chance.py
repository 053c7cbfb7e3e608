"""Distributionally robust stability constraint in second-order-cone form.

Given coefficient moments (mu, Sigma) and a confidence level eta, any
distribution matching the moments keeps K^T X >= g_lim with probability at
least eta whenever  k_eta * ||Sigma^(1/2) X|| <= mu^T X - g_lim.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .sensitivity import MomentEstimate

PSD_REPAIR_TOL = 1e-8


class InvalidCovarianceError(ValueError):
    """Covariance is materially indefinite (beyond round-off repair)."""


def k_eta(eta: float, symmetric: bool = False) -> float:
    """Robustness multiplier: sqrt(eta/(1-eta)), or sqrt(1/(2(1-eta))) when the
    coefficient distribution is known to be centrally symmetric (eta >= 0.5)."""
    if not 0.0 < eta < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    if symmetric:
        if eta < 0.5:
            raise ValueError("symmetric variant requires eta >= 0.5")
        return math.sqrt(1.0 / (2.0 * (1.0 - eta)))
    return math.sqrt(eta / (1.0 - eta))


def spectral_factorize(sigma: np.ndarray):
    """Eigenpairs (tau_i, q_i) of a covariance, with round-off repair.

    Eigenvalues in [-PSD_REPAIR_TOL, 0) are clipped to zero; anything more
    negative is rejected. Zero factors are dropped, so a zero covariance
    yields no factors at all.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(sigma, sigma.T, atol=1e-10 * max(1.0, np.abs(sigma).max())):
        raise ValueError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    scale = max(1.0, float(np.abs(vals).max())) if vals.size else 1.0
    if vals.min(initial=0.0) < -PSD_REPAIR_TOL * scale:
        raise InvalidCovarianceError(
            f"covariance has eigenvalue {vals.min():.3e}, below the repair threshold")
    vals = np.clip(vals, 0.0, None)
    order = np.argsort(vals)[::-1]
    taus, qs = [], []
    for i in order:
        if vals[i] <= 0.0:
            continue
        q = vecs[:, i]
        lead = int(np.argmax(np.abs(q) > 1e-12))
        if q[lead] < 0:
            q = -q
        taus.append(float(vals[i]))
        qs.append(q)
    tau = np.array(taus)
    q_mat = np.array(qs) if qs else np.zeros((0, sigma.shape[0]))
    return tau, q_mat


@dataclass(frozen=True)
class SocStabilityConstraint:
    """Deployable robust constraint: ||rows @ X|| <= (mu^T X - g_lim) / k_eta."""

    mu: np.ndarray
    tau: np.ndarray                  # positive eigenvalues of Sigma_K
    q: np.ndarray                    # (n_factors, k) orthonormal eigenvector rows
    g_lim: float
    eta: float
    k: float                         # robustness multiplier k_eta

    @classmethod
    def from_moments(cls, moments: MomentEstimate, g_lim: float, eta: float,
                     symmetric: bool = False) -> "SocStabilityConstraint":
        tau, q = spectral_factorize(moments.sigma)
        return cls(mu=np.asarray(moments.mu, dtype=float), tau=tau, q=q,
                   g_lim=float(g_lim), eta=float(eta), k=k_eta(eta, symmetric))

    @property
    def factor_rows(self) -> np.ndarray:
        """(n_factors, k) matrix of sqrt(tau_i) q_i^T rows."""
        return np.sqrt(self.tau)[:, None] * self.q

    def covariance(self) -> np.ndarray:
        return self.q.T @ (self.tau[:, None] * self.q)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "tau": self.tau.tolist(),
                "Q": self.q.tolist(), "g_lim": self.g_lim, "eta": self.eta}


def constraint_from_dict(data: dict, symmetric: bool = False) -> SocStabilityConstraint:
    q = np.array(data["Q"])
    if q.size == 0:
        q = q.reshape(0, len(data["mu"]))
    return SocStabilityConstraint(mu=np.array(data["mu"]), tau=np.array(data["tau"]),
                                  q=q, g_lim=float(data["g_lim"]), eta=float(data["eta"]),
                                  k=k_eta(float(data["eta"]), symmetric))


def save_constraint(constraint: SocStabilityConstraint, path, extra: dict | None = None):
    payload = constraint.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


@dataclass(frozen=True)
class SocEvaluation:
    lhs: float
    rhs: float
    satisfied: bool
    margin: float


def evaluate_soc(constraint: SocStabilityConstraint, x) -> SocEvaluation:
    x = np.asarray(x, dtype=float)
    lhs = float(np.linalg.norm(constraint.factor_rows @ x)) if len(constraint.tau) else 0.0
    rhs = float((constraint.mu @ x - constraint.g_lim) / constraint.k)
    return SocEvaluation(lhs=lhs, rhs=rhs, satisfied=lhs <= rhs, margin=rhs - lhs)


def equivalent_limit(constraint: SocStabilityConstraint, schedule) -> float:
    """Schedule-averaged effective limit: g_lim plus the robustness buffer."""
    xs = np.atleast_2d(np.asarray(schedule, dtype=float))
    if xs.shape[0] == 0:
        raise ValueError("schedule must be nonempty")
    if len(constraint.tau) == 0:
        return constraint.g_lim
    norms = np.linalg.norm(xs @ constraint.factor_rows.T, axis=1)
    return float(np.mean(constraint.g_lim + constraint.k * norms))
