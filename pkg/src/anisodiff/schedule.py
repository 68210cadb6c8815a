"""Diffusion-process mathematics: schedules, noising, v-parameterization, DDIM.

Schedule tables are float64. Elementwise volume math is evaluated in float64
and stored as float32. Timesteps are 1-based; ``t = 0`` means alpha_bar = 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import ContractError, ShapeError, Volume


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = 0.0
    beta_end: float = 0.0

    @property
    def T(self) -> int:
        return len(self.beta)

    def ab(self, t: int) -> float:
        """alpha_bar at 1-based timestep t, with ab(0) = 1."""
        if not 0 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def coefs(self, t: int) -> tuple[float, float]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))."""
        a = self.ab(t)
        return float(np.sqrt(a)), float(np.sqrt(1.0 - a))


def build_scaled_linear(
    T: int = 1000, beta_start: float = 0.0005, beta_end: float = 0.0195
) -> NoiseSchedule:
    """Betas linear in sqrt(beta) between beta_start and beta_end."""
    if int(T) != T or T < 1:
        raise ContractError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
        beta[0], beta[-1] = beta_start, beta_end
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha), float(beta_start), float(beta_end))


def _arr(x):
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _wrap(ref, out: np.ndarray):
    out = out.astype(np.float32)
    if isinstance(ref, Volume):
        return Volume(out, ref.spacing)
    return out


def _pair(a, b):
    a_, b_ = _arr(a), _arr(b)
    if a_.shape != b_.shape:
        raise ShapeError(f"shape mismatch {a_.shape} vs {b_.shape}")
    return a_.astype(np.float64), b_.astype(np.float64)


def forward_noise(x0, eps, t: int, s: NoiseSchedule):
    a, b = s.coefs(t)
    x, e = _pair(x0, eps)
    return _wrap(x0, a * x + b * e)


def v_target(x0, eps, t: int, s: NoiseSchedule):
    a, b = s.coefs(t)
    x, e = _pair(x0, eps)
    return _wrap(x0, a * e - b * x)


def x0_from_v(x_t, v, t: int, s: NoiseSchedule):
    a, b = s.coefs(t)
    x, vv = _pair(x_t, v)
    return _wrap(x_t, a * x - b * vv)


def eps_from_v(x_t, v, t: int, s: NoiseSchedule):
    a, b = s.coefs(t)
    x, vv = _pair(x_t, v)
    return _wrap(x_t, b * x + a * vv)


def ddim_step(x_t, v_hat, t: int, t_prev: int, s: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from t to t_prev."""
    if not 0 <= t_prev < t <= s.T:
        raise ContractError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    a, b = s.coefs(t)
    a_prev, b_prev = s.coefs(t_prev)
    x, v = _pair(x_t, v_hat)
    x0 = a * x - b * v
    eps = b * x + a * v
    return _wrap(x_t, a_prev * x0 + b_prev * eps)


def ddim_timesteps(T: int, S: int) -> list[int]:
    """Strictly decreasing path {round(i*T/S) : i = S..1}; the final hop goes to 0."""
    if not 1 <= S <= T:
        raise ContractError(f"need 1 <= S <= T, got S={S}, T={T}")
    # round half up, matching the integer arithmetic floor((2*i*T + S) / (2*S))
    steps = [(2 * i * T + S) // (2 * S) for i in range(S, 0, -1)]
    out: list[int] = []
    for t in steps:
        if t >= 1 and (not out or t < out[-1]):
            out.append(t)
    return out


def timestep_pairs(path: list[int]) -> list[tuple[int, int]]:
    return list(zip(path, path[1:] + [0]))
