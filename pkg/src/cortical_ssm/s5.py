"""Diagonal MIMO state-space layer (S5 style).

The continuous system dh/dt = A h + B x, y = C h + D x is initialised from
the normal HiPPO matrix, diagonalised to complex eigenvalues, discretised with
a zero-order hold, and evaluated with an associative scan over time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_io import ConfigurationError, make_rng
from .tape import Tensor, node

ZOH_GUARD = 1e-8
# Re(Lambda) is projected to <= -LAMBDA_RE_CEIL after every optimiser step
LAMBDA_RE_CEIL = 1e-4
LOG_DT_RANGE = (np.log(1e-3), np.log(1e-1))


class NumericalError(RuntimeError):
    pass


@dataclass
class HippoSpec:
    Q: int
    A: np.ndarray


@dataclass
class DiagonalizedSSM:
    Lambda: np.ndarray
    EigenBasis: np.ndarray
    EigenBasisInv: np.ndarray


@dataclass
class S5Params:
    Lambda: np.ndarray  # complex [Q]
    B_tilde: np.ndarray  # complex [Q, P]
    C_tilde: np.ndarray  # complex [P, Q]
    D_diag: np.ndarray  # real [P]
    log_Delta: np.ndarray  # real [Q]

    def to_flat(self) -> dict[str, np.ndarray]:
        return {
            "Lambda_re": self.Lambda.real.copy(), "Lambda_im": self.Lambda.imag.copy(),
            "B_re": self.B_tilde.real.copy(), "B_im": self.B_tilde.imag.copy(),
            "C_re": self.C_tilde.real.copy(), "C_im": self.C_tilde.imag.copy(),
            "D": self.D_diag.copy(), "log_Delta": self.log_Delta.copy(),
        }

    @classmethod
    def from_flat(cls, p: dict[str, np.ndarray]) -> "S5Params":
        return cls(p["Lambda_re"] + 1j * p["Lambda_im"], p["B_re"] + 1j * p["B_im"],
                   p["C_re"] + 1j * p["C_im"], np.asarray(p["D"]), np.asarray(p["log_Delta"]))


@dataclass
class DiscreteS5:
    Lambda_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    D_diag: np.ndarray


SSM_KEYS = ("Lambda_re", "Lambda_im", "B_re", "B_im", "C_re", "C_im", "D", "log_Delta")


def build_hippo_n(Q: int) -> HippoSpec:
    """Normal part of HiPPO-LegS: A_LegS + p p^T with p_n = sqrt(n + 1/2)."""
    if Q < 2 or Q % 2:
        raise ConfigurationError(f"state size must be even and >= 2, got {Q}")
    n = np.arange(Q, dtype=float)
    r = np.sqrt(2 * n + 1)
    legs = -np.tril(np.outer(r, r), -1) - np.diag(n + 1)
    p = np.sqrt(n + 0.5)
    return HippoSpec(Q, legs + np.outer(p, p))


def diagonalize(spec: HippoSpec) -> DiagonalizedSSM:
    """Complex eigendecomposition A = V diag(Lambda) V^-1.

    Eigenvalues are ordered by |Im| with each conjugate pair adjacent
    (positive imaginary part first).
    """
    try:
        lam, vec = np.linalg.eig(spec.A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    order = np.lexsort((-lam.imag, np.round(np.abs(lam.imag), 10)))
    lam, vec = lam[order], vec[:, order]
    cond = np.linalg.cond(vec)
    if not np.isfinite(cond) or cond > 1e8:
        raise NumericalError(f"eigenbasis is ill-conditioned (cond = {cond:.3e})")
    return DiagonalizedSSM(lam.astype(complex), vec.astype(complex), np.linalg.inv(vec).astype(complex))


def _zoh_coefficients(Lambda: np.ndarray, Delta: np.ndarray):
    """Returns (Lambda_bar, kappa, guarded) with B_bar = kappa[:, None] * B_tilde."""
    z = Lambda * Delta
    lam_bar = np.exp(z)
    guarded = np.abs(z) < ZOH_GUARD
    safe = np.where(guarded, 1.0, Lambda)
    kappa = np.where(guarded, Delta, (lam_bar - 1.0) / safe)
    return lam_bar, kappa, guarded


def zoh_discretize(Lambda, B_tilde, Delta):
    """Lambda_bar = exp(Lambda * Delta), B_bar = Lambda^-1 (Lambda_bar - 1) B_tilde."""
    Lambda = np.asarray(Lambda, dtype=complex)
    Delta = np.asarray(Delta, dtype=float)
    if np.any(Delta <= 0):
        raise ConfigurationError("timescales must be positive")
    lam_bar, kappa, _ = _zoh_coefficients(Lambda, Delta)
    B = np.asarray(B_tilde)
    return lam_bar, (kappa.reshape(kappa.shape + (1,) * (B.ndim - 1)) * B)


def discretize(p: S5Params) -> DiscreteS5:
    lam_bar, b_bar = zoh_discretize(p.Lambda, p.B_tilde, np.exp(p.log_Delta))
    return DiscreteS5(lam_bar, b_bar, p.C_tilde, p.D_diag)


def associative_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive scan of h_t = a_t * h_{t-1} + b_t (h_0 = 0) along axis -2.

    Uses the combine (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2) in a fixed
    log-depth doubling schedule. ``a`` is [T, Q] and broadcasts over the
    leading axes of ``b`` [..., T, Q].
    """
    T = b.shape[-2]
    a = np.array(np.broadcast_to(a, (T, b.shape[-1])), dtype=np.result_type(a, b))
    b = np.array(b, dtype=np.result_type(a, b))
    d = 1
    while d < T:
        # right-hand sides are materialised before assignment, so the in-place update is safe
        b[..., d:, :] = b[..., d:, :] + a[d:] * b[..., :-d, :]
        a[d:] = a[d:] * a[:-d]
        d *= 2
    return b


def ssm_apply(d: DiscreteS5, u: np.ndarray) -> np.ndarray:
    """Run the discrete system over u[..., T, P]; returns real y[..., T, P]."""
    u = np.asarray(u)
    b = u @ d.B_bar.T
    a = np.broadcast_to(d.Lambda_bar, (u.shape[-2], d.Lambda_bar.shape[0]))
    h = associative_scan(a, b)
    return (h @ d.C_bar.T).real + u * d.D_diag


def ssm_states(d: DiscreteS5, u: np.ndarray) -> np.ndarray:
    """Complex hidden states h[..., T, Q] (before the output projection)."""
    a = np.broadcast_to(d.Lambda_bar, (u.shape[-2], d.Lambda_bar.shape[0]))
    return associative_scan(a, np.asarray(u) @ d.B_bar.T)


def init_s5_params(Q: int, P: int, seed: int) -> S5Params:
    diag = diagonalize(build_hippo_n(Q))
    rng = make_rng(seed)
    B0 = rng.standard_normal((Q, P)) / np.sqrt(Q)
    C0 = rng.standard_normal((P, Q)) / np.sqrt(Q)
    # one timescale per conjugate pair keeps the discrete system conjugate-symmetric, so C h is real
    log_dt = np.repeat(rng.uniform(*LOG_DT_RANGE, size=Q // 2), 2)
    return S5Params(diag.Lambda.copy(), diag.EigenBasisInv @ B0, C0 @ diag.EigenBasis,
                    np.ones(P), log_dt)


def clamp_stable(flat: dict[str, np.ndarray]) -> None:
    """Project every ``*Lambda_re`` entry back below zero, in place."""
    for k, v in flat.items():
        if k.endswith("Lambda_re"):
            np.minimum(v, -LAMBDA_RE_CEIL, out=v)


def ssm_op(u: Tensor, lam_re: Tensor, lam_im: Tensor, b_re: Tensor, b_im: Tensor,
           c_re: Tensor, c_im: Tensor, d: Tensor, log_dt: Tensor) -> Tensor:
    """Tape op for the discretised layer on u[..., T, P].

    The backward pass runs the adjoint recurrence G_t = dL/dh_t + conj(Lambda_bar) G_{t+1}
    as a reversed scan rather than unrolling the graph over time.
    """
    cdtype = np.complex64 if u.data.dtype == np.float32 else np.complex128
    lam = (lam_re.data + 1j * lam_im.data).astype(cdtype)
    dt = np.exp(log_dt.data)
    b_tilde = (b_re.data + 1j * b_im.data).astype(cdtype)
    c_tilde = (c_re.data + 1j * c_im.data).astype(cdtype)
    lam_bar, kappa, guarded = _zoh_coefficients(lam, dt)
    lam_bar, kappa = lam_bar.astype(cdtype), kappa.astype(cdtype)
    b_bar = kappa[:, None] * b_tilde
    T, Q, P = u.shape[-2], lam.shape[0], u.shape[-1]
    a = np.broadcast_to(lam_bar, (T, Q))
    h = associative_scan(a, u.data @ b_bar.T)
    y = (h @ c_tilde.T).real.astype(u.data.dtype) + u.data * d.data

    def back(gy):
        gy_flat = gy.reshape(-1, P)
        g_d = (gy * u.data).reshape(-1, P).sum(axis=0)
        g_c = gy_flat.T @ np.conj(h).reshape(-1, Q)
        gh = gy @ np.conj(c_tilde)
        G = associative_scan(np.conj(a), gh[..., ::-1, :])[..., ::-1, :]
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :] = h[..., :-1, :]
        g_lam_bar = (np.conj(h_prev) * G).reshape(-1, Q).sum(axis=0)
        g_b_bar = G.reshape(-1, Q).T @ u.data.reshape(-1, P)
        g_u = (G @ np.conj(b_bar)).real + gy * d.data
        g_b_tilde = np.conj(kappa)[:, None] * g_b_bar
        g_kappa = (np.conj(b_tilde) * g_b_bar).sum(axis=1)
        safe = np.where(guarded, 1.0, lam)
        dk_dlam = np.where(guarded, dt ** 2 / 2, (dt * lam_bar * safe - (lam_bar - 1.0)) / safe ** 2)
        dk_ddt = np.where(guarded, 1.0, lam_bar)
        g_lam = np.conj(dt * lam_bar) * g_lam_bar + np.conj(dk_dlam) * g_kappa
        g_dt = (np.conj(g_lam_bar) * lam * lam_bar).real + (np.conj(g_kappa) * dk_ddt).real
        rd = u.data.dtype
        return (g_u.astype(rd), g_lam.real.astype(rd), g_lam.imag.astype(rd),
                g_b_tilde.real.astype(rd), g_b_tilde.imag.astype(rd),
                g_c.real.astype(rd), g_c.imag.astype(rd), g_d.astype(rd), (dt * g_dt).astype(rd))

    return node(y, (u, lam_re, lam_im, b_re, b_im, c_re, c_im, d, log_dt), back, "s5_scan")
