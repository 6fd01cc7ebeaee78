"""Selective state-space layer with a scalar-identity transition per head.

Per head the state is an ``N x P`` matrix (N state dims, P channels). With the
transition restricted to ``A = a I`` and zero-order-hold discretization:

    a_bar_t = exp(delta_t * a)
    b_bar_t = (exp(delta_t * a) - 1) / a * B_t
    h_t     = a_bar_t * h_{t-1} + b_bar_t (outer) x_t,     h_0 = 0
    y_t     = C_t^T h_t

``delta_t``, ``B_t`` and ``C_t`` come from the input, which is what makes the
scan selective. ``a = -exp(a_log)`` keeps ``a_bar`` inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor, as_tensor, record

LIMIT_EPS = 1e-12
_SERIES_Z = 1e-4


# ------------------------------------------------------------ discretization
def _expm1_ratio(z: np.ndarray, ez: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """g(z) = (e^z - 1)/z and g'(z) given ``ez = e^z``; Taylor series near 0."""
    small = np.abs(z) < _SERIES_Z
    zs = np.where(small, 1.0, z)
    em = np.expm1(zs)
    g = np.atleast_1d(em / zs)
    gp = np.atleast_1d((zs * ez - em) / (zs * zs))
    if small.any():
        small = np.atleast_1d(small)
        zz = np.atleast_1d(z)[small]
        g[small] = 1.0 + zz / 2.0 + zz * zz / 6.0 + zz ** 3 / 24.0
        gp[small] = 0.5 + zz / 3.0 + zz * zz / 8.0 + zz ** 3 / 30.0
    return g.reshape(z.shape), gp.reshape(z.shape)


def zoh_coefficients(a, delta):
    """Return ``(a_bar, phi, dphi_da)`` where ``b_bar = phi * B``.

    ``phi = (exp(delta*a) - 1)/a``; within ``|a| < 1e-12`` the analytic limit
    ``phi = delta`` is used. ``dphi/d delta`` equals ``a_bar`` on both branches.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    z = np.asarray(delta * a)
    a_bar = np.exp(z)
    g, gp = _expm1_ratio(z, a_bar)
    phi = delta * g
    limit = np.abs(a) < LIMIT_EPS
    if np.any(limit):
        phi = np.where(limit, delta, phi)
    dphi_da = delta * delta * gp
    return a_bar, phi, dphi_da


def discretize(a: float, delta: float, B) -> tuple[float, np.ndarray]:
    """Scalar-identity ZOH step: ``(a_bar, b_bar)`` for one timestep."""
    a_bar, phi, _ = zoh_coefficients(a, delta)
    return float(a_bar), float(phi) * np.asarray(B, dtype=np.float64)


# ---------------------------------------------------------------- the scan
def _first_nonfinite(name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FloatingPointError(f"selective_scan: non-finite {name} at index {idx}")


def _scan_shapes(x, delta, B, C, a):
    if x.ndim < 3:
        raise tc.ShapeError(f"selective_scan: x must be (..., T, H, P), got {x.shape}")
    lead, (T, H, P) = x.shape[:-3], x.shape[-3:]
    if delta.shape != lead + (T, H):
        raise tc.ShapeError(f"selective_scan: delta shape {delta.shape}, expected {lead + (T, H)}")
    if B.shape[:-1] != lead + (T,) or C.shape != B.shape:
        raise tc.ShapeError(
            f"selective_scan: B {B.shape} / C {C.shape} must both be {lead + (T,)} + (N,)")
    if a.shape != (H,):
        raise tc.ShapeError(f"selective_scan: a shape {a.shape}, expected ({H},)")
    return lead, T, H, P, B.shape[-1]


def selective_scan(x, delta, B, C, a) -> Tensor:
    """Sequential selective scan.

    Shapes: ``x (..., T, H, P)``, ``delta (..., T, H)``, ``B, C (..., T, N)``,
    ``a (H,)``; returns ``y (..., T, H, P)``. ``delta`` must be positive.
    """
    x, delta, B, C, a = (as_tensor(v) for v in (x, delta, B, C, a))
    lead, T, H, P, N = _scan_shapes(x, delta, B, C, a)
    for name, v in (("x", x), ("delta", delta), ("B", B), ("C", C), ("a", a)):
        _first_nonfinite(name, v.data)
    S = int(np.prod(lead)) if lead else 1
    xd = x.data.reshape(S, T, H, P)
    dd = delta.data.reshape(S, T, H)
    Bd = B.data.reshape(S, T, N)
    Cd = C.data.reshape(S, T, N)
    ad = a.data

    a_bar, phi, dphi_da = zoh_coefficients(ad, dd)
    # injections phi_t * B_t (outer) x_t for every step at once: (S, T, H, N, P)
    Bx = Bd[:, :, None, :, None] * xd[:, :, :, None, :]
    u = phi[..., None, None] * Bx
    hs = np.empty_like(u)
    h = np.zeros((S, H, N, P))
    decay = a_bar[..., None, None]
    for t in range(T):
        h = decay[:, t] * h
        h += u[:, t]
        hs[:, t] = h
    y = np.matmul(Cd[:, :, None, None, :], hs)[..., 0, :]

    def back(gy):
        gy = gy.reshape(S, T, H, P)
        gC = np.einsum("sthp,sthnp->stn", gy, hs)
        direct = Cd[:, :, None, :, None] * gy[:, :, :, None, :]
        dH = np.empty_like(direct)
        acc = np.zeros((S, H, N, P))
        for t in range(T - 1, -1, -1):
            if t + 1 < T:
                acc = decay[:, t + 1] * acc
                acc += direct[:, t]
            else:
                acc = direct[:, t].copy()
            dH[:, t] = acc
        h_prev = np.concatenate([np.zeros((S, 1, H, N, P)), hs[:, :-1]], axis=1)
        g_abar = np.einsum("sthnp,sthnp->sth", dH, h_prev)
        g_phi = np.einsum("sthnp,sthnp->sth", dH, Bx)
        dHphi = dH * phi[..., None, None]
        gB = np.einsum("sthnp,sthp->stn", dHphi, xd)
        gx = np.einsum("sthnp,stn->sthp", dHphi, Bd)
        # a_bar = exp(delta a);  d phi / d delta = a_bar
        g_delta = g_abar * ad * a_bar + g_phi * a_bar
        g_a = (g_abar * dd * a_bar + g_phi * dphi_da).sum(axis=(0, 1))
        return (gx.reshape(x.shape), g_delta.reshape(delta.shape),
                gB.reshape(B.shape), gC.reshape(C.shape), g_a)

    return record(y.reshape(lead + (T, H, P)), (x, delta, B, C, a), back, "selective_scan")


def dense_recurrence_oracle(x, delta, B, C, a) -> np.ndarray:
    """Reference scan with explicit N x N matrices per step (test use, small sizes only).

    Accepts the same shapes as :func:`selective_scan` (numpy arrays).
    """
    x = np.asarray(x, float)
    delta = np.asarray(delta, float)
    B = np.asarray(B, float)
    C = np.asarray(C, float)
    a = np.atleast_1d(np.asarray(a, float))
    lead, (T, H, P) = x.shape[:-3], x.shape[-3:]
    N = B.shape[-1]
    S = int(np.prod(lead)) if lead else 1
    xs = x.reshape(S, T, H, P)
    ds = delta.reshape(S, T, H)
    Bs = B.reshape(S, T, N)
    Cs = C.reshape(S, T, N)
    eye = np.eye(N)
    y = np.zeros((S, T, H, P))
    for s in range(S):
        for hd in range(H):
            A = a[hd] * eye
            state = np.zeros((N, P))
            for t in range(T):
                dA = ds[s, t, hd] * A
                A_bar = np.diag(np.exp(np.diag(dA)))  # expm of a diagonal matrix
                if abs(a[hd]) < LIMIT_EPS:
                    B_bar = ds[s, t, hd] * Bs[s, t][:, None]
                else:
                    B_bar = np.linalg.solve(dA, (A_bar - eye) @ (ds[s, t, hd] * Bs[s, t][:, None]))
                state = A_bar @ state + B_bar @ xs[s, t, hd][None, :]
                y[s, t, hd] = Cs[s, t] @ state
    return y.reshape(lead + (T, H, P))


# ---------------------------------------------------------------- the layer
@dataclass
class SsmBlockParams:
    """One scan direction. ``in_w`` maps D to [value, gate, B, C, delta-pre]."""

    in_w: Tensor
    in_b: Tensor
    a_log: Tensor
    out_w: Tensor
    out_b: Tensor
    heads: int
    state_dim: int
    inner_dim: int

    @property
    def d_model(self) -> int:
        return self.in_w.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.in_w": self.in_w, f"{prefix}.in_b": self.in_b,
                f"{prefix}.a_log": self.a_log, f"{prefix}.out_w": self.out_w,
                f"{prefix}.out_b": self.out_b}


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm_block(rng: np.random.Generator, d_model: int, heads: int, state_dim: int,
                   inner_dim: int) -> SsmBlockParams:
    if inner_dim % heads:
        raise ValueError(f"inner_dim {inner_dim} not divisible by heads {heads}")
    width = 2 * inner_dim + 2 * state_dim + heads
    in_b = np.zeros(width)
    dt0 = np.exp(np.linspace(np.log(0.05), np.log(0.5), heads)) if heads > 1 else np.array([0.15])
    in_b[-heads:] = _inv_softplus(dt0)
    a = rng.uniform(0.1, 1.0, size=heads)
    return SsmBlockParams(
        in_w=tc.parameter(_uniform(rng, d_model, (d_model, width))),
        in_b=tc.parameter(in_b),
        a_log=tc.parameter(np.log(a)),
        out_w=tc.parameter(_uniform(rng, inner_dim, (inner_dim, d_model))),
        out_b=tc.parameter(np.zeros(d_model)),
        heads=heads, state_dim=state_dim, inner_dim=inner_dim)


def mamba2_layer(z, p: SsmBlockParams) -> Tensor:
    """One direction: project, selective scan, sigmoid gate, project back.

    ``z`` is (..., T, D) and the output has the same shape.
    """
    z = as_tensor(z)
    E, N, H = p.inner_dim, p.state_dim, p.heads
    proj = tc.matmul(z, p.in_w) + p.in_b
    value = proj[..., :E]
    gate = proj[..., E:2 * E]
    B = proj[..., 2 * E:2 * E + N]
    C = proj[..., 2 * E + N:2 * E + 2 * N]
    delta = tc.softplus(proj[..., 2 * E + 2 * N:])
    a = -tc.exp(p.a_log)
    lead_t = value.shape[:-1]
    x = value.reshape(lead_t + (H, E // H))
    y = selective_scan(x, delta, B, C, a).reshape(lead_t + (E,))
    return tc.matmul(y * tc.sigmoid(gate), p.out_w) + p.out_b


def reverse_time(z, axis: int = -2) -> Tensor:
    return tc.flip(z, axis)


@dataclass
class BidirectionalParams:
    fwd: SsmBlockParams
    bwd: SsmBlockParams
    merge_w: Tensor
    merge_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.named(f"{prefix}.fwd")
        out.update(self.bwd.named(f"{prefix}.bwd"))
        out[f"{prefix}.merge_w"] = self.merge_w
        out[f"{prefix}.merge_b"] = self.merge_b
        return out


def init_bidirectional(rng: np.random.Generator, d_model: int, heads: int, state_dim: int,
                       inner_dim: int) -> BidirectionalParams:
    fwd = init_ssm_block(rng, d_model, heads, state_dim, inner_dim)
    bwd = init_ssm_block(rng, d_model, heads, state_dim, inner_dim)
    return BidirectionalParams(
        fwd, bwd,
        merge_w=tc.parameter(_uniform(rng, 2 * d_model, (2 * d_model, d_model))),
        merge_b=tc.parameter(np.zeros(d_model)))


def bidirectional_block(z, p: BidirectionalParams) -> Tensor:
    """Forward and time-reversed scans, each with a residual, merged 2D -> D."""
    z = as_tensor(z)
    u_f = mamba2_layer(z, p.fwd) + z
    u_b = reverse_time(mamba2_layer(reverse_time(z), p.bwd)) + z
    return tc.matmul(tc.concat([u_f, u_b], axis=-1), p.merge_w) + p.merge_b
