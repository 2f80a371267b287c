"""Local stability tests: Routh-Hurwitz on monic polynomials and a
finite-difference Jacobian oracle."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Verdict(str, enum.Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"
    MARGINAL = "Marginal"


def routh_hurwitz(coeffs, tol: float = 1e-12) -> Verdict:
    """Classify a monic quadratic or cubic by its coefficients.

    ``coeffs`` is highest degree first, e.g. ``(1, a2, a1, a0)``. Equalities
    within ``tol`` (scaled by the largest coefficient) count as Marginal.
    """
    c = [float(v) for v in coeffs]
    if len(c) not in (3, 4):
        raise ValueError(f"only degree 2 or 3 supported, got degree {len(c) - 1}")
    if abs(c[0] - 1.0) > 1e-12:
        raise ValueError("polynomial must be monic")
    eps = tol * max(1.0, *(abs(v) for v in c))
    if len(c) == 3:
        checks = [c[1], c[2]]
    else:
        a2, a1, a0 = c[1:]
        checks = [a2, a0, a2 * a1 - a0]
    if any(v < -eps for v in checks):
        return Verdict.UNSTABLE
    if any(abs(v) <= eps for v in checks):
        return Verdict.MARGINAL
    return Verdict.STABLE


def numeric_jacobian(fn, point, h=None) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``point``.

    The default step is ``1e-6 * max(1, |x_j|)`` per column.
    """
    x = np.asarray(point, dtype=float)
    n = x.size
    f0 = np.asarray(fn(x), dtype=float)
    J = np.empty((f0.size, n))
    for j in range(n):
        hj = h if h is not None else 1e-6 * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += hj
        xm[j] -= hj
        J[:, j] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * hj)
    return J


def eig_signs(matrix, tol: float = 1e-6) -> tuple[int, int, int]:
    """Count eigenvalues with positive, negative, and ~zero real parts."""
    ev = np.linalg.eigvals(np.asarray(matrix, dtype=float))
    scale = max(1.0, float(np.max(np.abs(ev))))
    re = ev.real
    n_pos = int(np.sum(re > tol * scale))
    n_neg = int(np.sum(re < -tol * scale))
    return n_pos, n_neg, len(ev) - n_pos - n_neg


def verdict_from_signs(signs) -> Verdict:
    n_pos, _, n_zero = signs
    if n_pos:
        return Verdict.UNSTABLE
    if n_zero:
        return Verdict.MARGINAL
    return Verdict.STABLE


@dataclass
class StabilityReport:
    """Two-route local stability classification of an equilibrium.

    ``char_poly`` comes from the closed-form characteristic polynomial;
    ``jacobian_eig_signs`` from a finite-difference Jacobian of the vector
    field. ``consistent`` is False when the two verdicts disagree.
    """

    char_poly: tuple[float, ...]
    routh_hurwitz_verdict: Verdict
    jacobian_eig_signs: tuple[int, int, int]
    jacobian_eigenvalues: np.ndarray
    jacobian_char_poly: tuple[float, ...]
    consistent: bool = True
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> Verdict:
        return self.routh_hurwitz_verdict

    def to_dict(self) -> dict:
        return {
            "char_poly": [float(c) for c in self.char_poly],
            "routh_hurwitz_verdict": self.routh_hurwitz_verdict.value,
            "jacobian_char_poly": [float(c) for c in self.jacobian_char_poly],
            "jacobian_eigenvalues": [
                [float(e.real), float(e.imag)] for e in self.jacobian_eigenvalues
            ],
            "jacobian_eig_signs": list(self.jacobian_eig_signs),
            "consistent": self.consistent,
            "notes": list(self.notes),
        }


def build_report(char_poly, jacobian, reference=None, coeff_tol: float = 1e-6) -> StabilityReport:
    """Compare a closed-form characteristic polynomial with a numeric Jacobian.

    Any coefficient mismatch beyond ``coeff_tol`` (relative) is recorded in
    ``notes``; a verdict mismatch additionally clears ``consistent``. An
    optional ``reference`` polynomial (e.g. a published one) is compared the
    same way: differing coefficients are noted, a differing verdict clears
    ``consistent``.
    """
    char_poly = tuple(float(c) for c in char_poly)
    rh = routh_hurwitz(char_poly)
    ev = np.linalg.eigvals(jacobian)
    signs = eig_signs(jacobian)
    jac_poly = tuple(float(c) for c in np.real(np.poly(jacobian)))
    report = StabilityReport(char_poly, rh, signs, ev, jac_poly)
    jac_verdict = verdict_from_signs(signs)
    diffs = [
        abs(a - b) / max(1.0, abs(b)) for a, b in zip(char_poly, jac_poly)
    ]
    if max(diffs) > coeff_tol:
        report.notes.append(
            "closed-form characteristic polynomial "
            f"{_fmt_poly(char_poly)} differs from the numeric-Jacobian "
            f"polynomial {_fmt_poly(jac_poly)}"
        )
    if jac_verdict is not rh:
        report.consistent = False
        report.notes.append(
            f"verdict mismatch: Routh-Hurwitz says {rh.value}, "
            f"Jacobian eigenvalues say {jac_verdict.value}"
        )
    if reference is not None:
        ref = tuple(float(c) for c in reference)
        ref_verdict = routh_hurwitz(ref)
        if max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(char_poly, ref)) > coeff_tol:
            report.notes.append(
                f"reference polynomial {_fmt_poly(ref)} differs from the computed "
                f"{_fmt_poly(char_poly)}; reference verdict {ref_verdict.value}"
            )
        if ref_verdict is not rh:
            report.consistent = False
            report.notes.append(
                f"verdict mismatch: reference polynomial says {ref_verdict.value}, "
                f"computed polynomial says {rh.value}"
            )
    return report


def _fmt_poly(c) -> str:
    deg = len(c) - 1
    terms = []
    for i, v in enumerate(c):
        p = deg - i
        mono = "" if p == 0 else ("s" if p == 1 else f"s^{p}")
        terms.append(f"{v:+.6g}{mono}" if mono else f"{v:+.6g}")
    return " ".join(terms)
