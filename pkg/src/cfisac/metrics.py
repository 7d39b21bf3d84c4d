"""Communication and sensing metrics plus signal-level simulators.

A beamformer set is a complex array ``W`` of shape (L, M, N+1): ``W[l]`` is
the per-AP matrix whose first N columns are UE beams and whose last column
is the sensing beam.  User indices are 0-based.

The numpy functions evaluate single scenes exactly; the ``batch_*`` torch
functions are the differentiable batched forms used by training.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
import torch

from .errors import ConfigError
from .scenario import ChannelScene, SystemConfig


def _gram(scene: ChannelScene, W: np.ndarray) -> np.ndarray:
    # G[n, q] = h_n^H w_q with h_n, w_q stacked over APs
    return np.einsum("lmn,lmq->nq", scene.comm_channels.conj(), W)


def sinr_all(scene: ChannelScene, W: np.ndarray, noise_var: float) -> np.ndarray:
    """Per-UE SINR (linear) for all N users."""
    P = np.abs(_gram(scene, W)) ** 2  # (N, N+1)
    N = P.shape[0]
    desired = P[np.arange(N), np.arange(N)]
    interference = P.sum(axis=1) - desired
    return desired / (interference + noise_var)


def sinr_user(scene: ChannelScene, W: np.ndarray, n: int, noise_var: float) -> float:
    N = scene.comm_channels.shape[2]
    if not 0 <= n < N:
        raise IndexError(f"user index {n} out of range for {N} users")
    return float(sinr_all(scene, W, noise_var)[n])


def min_sinr(scene: ChannelScene, W: np.ndarray, noise_var: float) -> float:
    return float(sinr_all(scene, W, noise_var).min())


def _pair_vars(sensing_var, ap_noise_var, L: int):
    s = np.broadcast_to(np.asarray(sensing_var, dtype=float), (L, L))  # s[l, r]
    a = np.broadcast_to(np.asarray(ap_noise_var, dtype=float), (L,))
    return s, a


def ssnr(scene: ChannelScene, W: np.ndarray, sensing_var, ap_noise_var) -> float:
    """Sensing SNR summed over transmit/receive AP pairs.

    ``sensing_var`` is a scalar or an (L, L) array indexed [l, r];
    ``ap_noise_var`` a scalar or a length-L array.
    """
    L = W.shape[0]
    s, a = _pair_vars(sensing_var, ap_noise_var, L)
    denom = a.sum()
    if denom <= 0:
        raise ConfigError("sum of AP noise variances must be > 0")
    beam_gain = np.sum(np.abs(np.einsum("lm,lmq->lq", scene.sensing_steering.conj(), W)) ** 2, axis=1)
    return float((s.sum(axis=1) * beam_gain).sum() / denom)


def ap_power(W: np.ndarray, l: int) -> float:
    return float(np.sum(np.abs(W[l]) ** 2))


def transmit_signal(W_l: np.ndarray, symbols: np.ndarray) -> np.ndarray:
    """x_l = W_l x; ``symbols`` may carry leading batch axes."""
    symbols = np.asarray(symbols)
    if symbols.shape[-1] != W_l.shape[1]:
        raise ValueError(f"expected {W_l.shape[1]} symbols, got {symbols.shape[-1]}")
    return symbols @ W_l.T


def simulate_ue_rx(scene: ChannelScene, W: np.ndarray, n: int, symbols, noise) -> np.ndarray:
    """Received sample(s) y_n = sum_q h_n^H w_q x_q + noise."""
    symbols = np.asarray(symbols)
    if symbols.shape[-1] != W.shape[2]:
        raise ValueError(f"expected {W.shape[2]} symbols, got {symbols.shape[-1]}")
    g = _gram(scene, W)[n]  # (N+1,)
    return symbols @ g + np.asarray(noise)


def simulate_ap_rx(scene: ChannelScene, W: np.ndarray, r: int, symbols, alphas, noise) -> np.ndarray:
    """Echo at AP ``r``: sum_l alpha_lr a(theta_r) a^H(theta_l) x_l + n_r.

    ``alphas[..., l]`` is alpha_{lr}; ``noise`` has the antenna axis last.
    """
    symbols = np.asarray(symbols)
    A = scene.sensing_steering
    L = W.shape[0]
    if symbols.shape[-1] != W.shape[2]:
        raise ValueError(f"expected {W.shape[2]} symbols, got {symbols.shape[-1]}")
    # a^H(theta_l) x_l for every l
    proj = np.stack([transmit_signal(W[l], symbols) @ A[l].conj() for l in range(L)], axis=-1)
    echo = np.sum(np.asarray(alphas) * proj, axis=-1)
    return echo[..., None] * A[r] + np.asarray(noise)


@dataclass(frozen=True)
class MetricReport:
    sinr: np.ndarray  # (N,) linear
    min_sinr: float
    ssnr: float


def evaluate(scene: ChannelScene, W: np.ndarray, system: SystemConfig) -> MetricReport:
    s = sinr_all(scene, W, system.ue_noise_var)
    return MetricReport(
        sinr=s,
        min_sinr=float(s.min()),
        ssnr=ssnr(scene, W, system.sensing_gain_var, system.ap_noise_var),
    )


def _db(x: float) -> float:
    return float(10.0 * np.log10(x)) if x > 0 else float("-inf")


def write_metric_csv(fh: TextIO, reports: Iterable[tuple[int, MetricReport]], num_ues: int) -> None:
    """Columns: scene_id, sinr_1..sinr_N, min_sinr, ssnr, then the same in dB."""
    lin = [f"sinr_{i + 1}" for i in range(num_ues)] + ["min_sinr", "ssnr"]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["scene_id"] + lin + [c + "_db" for c in lin])
    for scene_id, rep in reports:
        vals = [float(v) for v in rep.sinr] + [rep.min_sinr, rep.ssnr]
        w.writerow([scene_id] + [repr(v) for v in vals] + [repr(_db(v)) for v in vals])


# -- batched, differentiable forms -------------------------------------------

def batch_sinr(H: torch.Tensor, W: torch.Tensor, noise_var: float) -> torch.Tensor:
    """H (B, L, M, N), W (B, L, M, N+1) complex -> SINR (B, N)."""
    G = torch.einsum("blmn,blmq->bnq", H.conj(), W)
    P = G.real ** 2 + G.imag ** 2
    desired = torch.diagonal(P[..., : P.shape[1]], dim1=1, dim2=2)
    interference = P.sum(dim=2) - desired
    return desired / (interference + noise_var)


def batch_min_sinr(H: torch.Tensor, W: torch.Tensor, noise_var: float) -> torch.Tensor:
    """Minimum SINR per scene; the gradient flows through the lowest-index minimizer."""
    s = batch_sinr(H, W, noise_var)
    idx = torch.argmin(s.detach(), dim=1, keepdim=True)
    return s.gather(1, idx).squeeze(1)


def batch_ssnr(A: torch.Tensor, W: torch.Tensor, system: SystemConfig) -> torch.Tensor:
    """A (B, L, M), W (B, L, M, N+1) complex -> SSNR (B,) with uniform variances."""
    L = W.shape[1]
    proj = torch.einsum("blm,blmq->blq", A.conj(), W)
    gain = (proj.real ** 2 + proj.imag ** 2).sum(dim=(1, 2))
    return L * system.sensing_gain_var * gain / (L * system.ap_noise_var)
