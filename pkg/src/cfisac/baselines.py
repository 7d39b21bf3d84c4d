"""Per-scene reference optimizers ("surrogate-CVX") and analytic bounds.

The reference pipeline has two stages:

1. :func:`max_min_sinr_surrogate` runs projected gradient ascent on a
   soft-min of the user SINRs with the communication beams restricted to a
   fraction ``rho`` of each AP's budget; the sensing beam is the steering
   vector projected onto the null space of the AP's user channels, so it
   causes no interference. The achieved exact min-SINR is ``gamma_high``.
2. :func:`constrained_ssnr_opt` maximizes SSNR over all beams under
   ``min-SINR >= gamma_high`` with a quadratic penalty whose weight doubles
   every 50 iterations while the constraint is violated.

Both are first-order stand-ins for a bisection + SDP convex pipeline and
are labelled ``surrogate-CVX`` in reports.
"""
from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .metrics import min_sinr, sinr_all, ssnr
from .model import DistributedModel, batch_inputs
from .scenario import ChannelScene, Dataset, SystemConfig

BASELINE_LABEL = "surrogate-CVX"
STUDENT_LABEL = "student"


def ssnr_upper_bound(system: SystemConfig) -> float:
    """SSNR reached when every beam at AP l is parallel to a(theta_l)."""
    L, M = system.num_aps, system.antennas_per_ap
    num = L * system.sensing_gain_var * M * sum(system.power_budget)
    return num / (L * system.ap_noise_var)


def null_space_project(H_l: np.ndarray, v: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Remove from ``v`` every component along the columns of ``H_l`` (M x N)."""
    M, N = H_l.shape
    if N >= M:
        warnings.warn(f"{N} channels span the whole {M}-dim space; null space is empty", RuntimeWarning)
        return np.zeros_like(v, dtype=complex)
    U, s, _ = np.linalg.svd(H_l, full_matrices=False)
    U = U[:, s > rtol * max(s.max(), 1.0)]
    return v - U @ (U.conj().T @ v)


# -- shared numerics ---------------------------------------------------------

def _project(W: np.ndarray, budgets: np.ndarray) -> np.ndarray:
    power = np.sum(np.abs(W) ** 2, axis=(1, 2))
    scale = np.minimum(1.0, np.sqrt(budgets / np.maximum(power, 1e-300)))
    return W * scale[:, None, None]


def _sinr_terms(H: np.ndarray, W: np.ndarray, noise: float):
    G = np.einsum("lmn,lmq->nq", H.conj(), W)
    P = G.real ** 2 + G.imag ** 2
    N = P.shape[0]
    S = P[np.arange(N), np.arange(N)]
    I = P.sum(axis=1) - S + noise
    return G, S, I


def _sinr_grad(H: np.ndarray, G: np.ndarray, S: np.ndarray, I: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """d(sum_n weights_n SINR_n)/dW* for all Q columns."""
    N, Q = G.shape
    coef = -(S / I ** 2)[:, None] * np.ones((N, Q))
    coef[np.arange(N), np.arange(N)] = 1.0 / I
    C = weights[:, None] * coef * G
    return np.einsum("lmn,nq->lmq", H, C)


def _softmin(x: np.ndarray, t: float):
    z = -x / t
    zmax = z.max()
    e = np.exp(z - zmax)
    return -t * (zmax + np.log(e.sum())), e / e.sum()


def _ssnr_gain(system: SystemConfig) -> float:
    return system.sensing_gain_var / system.ap_noise_var


@dataclass
class SurrogateResult:
    gamma_high: float
    comm_beams: np.ndarray  # (L, M, N)
    sensing_beams: np.ndarray  # (L, M)
    converged: bool
    iterations: int

    @property
    def beams(self) -> np.ndarray:
        return np.concatenate([self.comm_beams, self.sensing_beams[:, :, None]], axis=2)


def nullspace_sensing_beams(scene: ChannelScene, budgets: np.ndarray) -> np.ndarray:
    """Per-AP null-space-projected steering vectors scaled to ``budgets``."""
    out = np.zeros_like(scene.sensing_steering)
    for l in range(out.shape[0]):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            v = null_space_project(scene.comm_channels[l], scene.sensing_steering[l])
        nrm = np.linalg.norm(v)
        if nrm > 1e-12 and budgets[l] > 0:
            out[l] = v * np.sqrt(budgets[l]) / nrm
    return out


def zero_forcing_beams(scene: ChannelScene, budgets: np.ndarray) -> np.ndarray:
    """Stacked zero-forcing beams with one common scaling so every AP respects ``budgets``."""
    H = scene.comm_channels
    L, M, N = H.shape
    Hs = H.reshape(L * M, N)
    W = (np.linalg.pinv(Hs.conj().T)).reshape(L, M, N)
    power = np.sum(np.abs(W) ** 2, axis=(1, 2))
    scale = np.sqrt(np.min(budgets / np.maximum(power, 1e-300)))
    return W * scale


def _random_beams(rng: np.random.Generator, shape, budgets: np.ndarray) -> np.ndarray:
    W = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    power = np.sum(np.abs(W) ** 2, axis=(1, 2))
    return W * np.sqrt(budgets / power)[:, None, None]


def _ascend_min_sinr(H, sense, W0, budgets, noise, temperature, max_iter, min_step):
    """Backtracking projected gradient ascent on the soft-min SINR."""
    L, M, N = W0.shape
    scale = np.sqrt(budgets.sum())

    def full(Wc):
        return np.concatenate([Wc, sense[:, :, None]], axis=2)

    def value(Wc):
        G, S, I = _sinr_terms(H, full(Wc), noise)
        sinr = S / I
        f, p = _softmin(sinr, temperature)
        return f, sinr, (G, S, I, p)

    W = _project(W0, budgets)
    f, sinr, aux = value(W)
    best_W, best_min = W, sinr.min()
    step = 0.1 * scale
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        G, S, I, p = aux
        grad = _sinr_grad(H, G, S, I, p)[:, :, :N]
        gnorm = np.linalg.norm(grad)
        if gnorm == 0:
            converged = True
            break
        while step >= min_step * scale:
            W_try = _project(W + step * grad / gnorm, budgets)
            f_try, sinr_try, aux_try = value(W_try)
            if f_try > f:
                W, f, sinr, aux = W_try, f_try, sinr_try, aux_try
                step *= 1.5
                break
            step *= 0.5
        else:
            converged = True
            break
        if sinr.min() > best_min:
            best_W, best_min = W, sinr.min()
    return best_W, float(best_min), converged, it


def max_min_sinr_surrogate(scene: ChannelScene, system: SystemConfig, rho: float = 0.5, *,
                           restarts: int = 4, max_iter: int = 300, temperature: float = 0.01,
                           min_step: float = 1e-6, seed: int = 0) -> SurrogateResult:
    """Best achievable min-SINR with communication power ``rho * P_l`` per AP.

    Restarts begin from matched-filter, zero-forcing and random beams; the
    best exact min-SINR across restarts is returned.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    H = scene.comm_channels
    L, M, N = H.shape
    P = np.asarray(system.power_budget)
    sense = nullspace_sensing_beams(scene, (1.0 - rho) * P)
    if rho == 0.0:
        return SurrogateResult(0.0, np.zeros((L, M, N), complex), sense, True, 0)
    budgets = rho * P
    rng = np.random.default_rng(seed)
    matched = H * np.sqrt(budgets / (M * N))[:, None, None]
    inits = [matched, zero_forcing_beams(scene, budgets)]
    while len(inits) < restarts:
        inits.append(_random_beams(rng, (L, M, N), budgets))
    best = None
    for W0 in inits[:max(restarts, 1)]:
        W, g, conv, it = _ascend_min_sinr(H, sense, W0, budgets, system.ue_noise_var,
                                          temperature, max_iter, min_step)
        if best is None or g > best.gamma_high:
            best = SurrogateResult(g, W, sense, conv, it)
    return best


@dataclass
class BaselineResult:
    gamma_high: float
    beams: np.ndarray  # (L, M, N+1)
    g1: float
    g2: float
    seconds: float = 0.0
    feasible: bool = True
    history: list[float] = field(default_factory=list, repr=False)


def constrained_ssnr_opt(scene: ChannelScene, system: SystemConfig, gamma_high: float,
                         init: np.ndarray | None = None, *, margin: float = 0.98,
                         max_iter: int = 2000, penalty0: float = 1.0, penalty_every: int = 50,
                         slack_tol: float = 1e-3, min_step: float = 1e-7) -> BaselineResult:
    """Maximize SSNR subject to min-SINR >= gamma_high and per-AP power.

    Returns the best iterate with min-SINR >= ``margin * gamma_high``;
    ``history`` holds that best SSNR after each iteration.
    """
    H = scene.comm_channels
    Asv = scene.sensing_steering
    L, M, N = H.shape
    budgets = np.asarray(system.power_budget)
    noise = system.ue_noise_var
    c = _ssnr_gain(system)
    ub = ssnr_upper_bound(system)
    gamma = max(float(gamma_high), 0.0)
    if init is None:
        init = np.concatenate([np.zeros((L, M, N), complex), Asv[:, :, None]], axis=2)
    W = _project(np.array(init, dtype=complex), budgets)

    def value(W, mu):
        proj = np.einsum("lm,lmq->lq", Asv.conj(), W)
        g1 = c * np.sum(np.abs(proj) ** 2)
        G, S, I = _sinr_terms(H, W, noise)
        sinr = S / I
        viol = np.maximum(gamma - sinr, 0.0) / gamma if gamma > 0 else np.zeros(N)
        F = g1 / ub - mu * np.sum(viol ** 2)
        return F, g1, sinr, viol, (proj, G, S, I)

    def gradient(W, mu, viol, aux):
        proj, G, S, I = aux
        g = (c / ub) * Asv[:, :, None] * proj[:, None, :]
        if gamma > 0 and viol.any():
            g = g + _sinr_grad(H, G, S, I, 2.0 * mu * viol / gamma)
        return g

    mu = penalty0
    F, g1, sinr, viol, aux = value(W, mu)
    feasible = sinr.min() >= margin * gamma
    best = (g1, W, sinr) if feasible else None
    history = []
    step = 0.1 * np.sqrt(budgets.sum())
    for it in range(1, max_iter + 1):
        if it % penalty_every == 0 and viol.max() >= slack_tol:
            mu *= 2.0
            F, g1, sinr, viol, aux = value(W, mu)
            step = max(step, 1e-3 * np.sqrt(budgets.sum()))
        grad = gradient(W, mu, viol, aux)
        gnorm = np.linalg.norm(grad)
        moved = False
        while gnorm > 0 and step >= min_step:
            W_try = _project(W + step * grad / gnorm, budgets)
            out = value(W_try, mu)
            if out[0] > F:
                W = W_try
                F, g1, sinr, viol, aux = out
                step *= 1.5
                moved = True
                break
            step *= 0.5
        if sinr.min() >= margin * gamma and (best is None or g1 > best[0]):
            best = (g1, W, sinr)
        history.append(best[0] if best is not None else float("nan"))
        if not moved and viol.max() < slack_tol:
            break
        if not moved:
            step = 1e-3 * np.sqrt(budgets.sum())
    if best is None:
        W0 = _project(np.array(init, dtype=complex), budgets)
        s0 = sinr_all(scene, W0, noise)
        return BaselineResult(gamma, W0, ssnr(scene, W0, system.sensing_gain_var, system.ap_noise_var),
                              float(s0.min()), feasible=False, history=history)
    g1, Wb, sb = best
    return BaselineResult(gamma, Wb, float(g1), float(sb.min()), history=history)


def run_baseline(scene: ChannelScene, system: SystemConfig, rho: float = 0.5, seed: int = 0,
                 **surrogate_kw) -> BaselineResult:
    """Full two-stage reference solve for one scene, timed."""
    t0 = time.perf_counter()
    sur = max_min_sinr_surrogate(scene, system, rho, seed=seed, **surrogate_kw)
    res = constrained_ssnr_opt(scene, system, sur.gamma_high, init=sur.beams)
    res.seconds = time.perf_counter() - t0
    res.gamma_high = sur.gamma_high
    return res


# -- run-time / quality comparison -----------------------------------------------

@dataclass
class BenchmarkReport:
    rows: list[tuple[int, str, float, float, float]]
    summary: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scene_id", "method", "g1", "g2", "seconds"])
        for r in self.rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4])])
        return buf.getvalue()


def time_student(model: DistributedModel, H: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, float]:
    """Beams for one scene and the slowest per-AP inference time (APs run in parallel)."""
    dtype = next(model.parameters()).dtype
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    Ht = torch.tensor(H[None], dtype=cdtype)
    At = torch.tensor(A[None], dtype=cdtype)
    beams, times = [], []
    with torch.inference_mode():
        for l in range(H.shape[0]):
            t0 = time.perf_counter()
            x = batch_inputs(Ht, At, l, model.spec.kind)
            w = model.beams_ap(l, x)
            times.append(time.perf_counter() - t0)
            beams.append(w[0].to(torch.complex128).numpy())
    return np.stack(beams), max(times)


def benchmark_compare(dataset: Dataset, model: DistributedModel, system: SystemConfig,
                      n_points: int = 200, *, seed: int = 0, rho: float = 0.5,
                      single_thread: bool = True) -> BenchmarkReport:
    """Baseline pipeline vs student inference on ``n_points`` random scenes."""
    n = min(n_points, len(dataset))
    if n < n_points:
        warnings.warn(f"n_points={n_points} exceeds dataset size; using {n}", RuntimeWarning)
    pick = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n, replace=False))
    old_threads = torch.get_num_threads()
    if single_thread:
        torch.set_num_threads(1)
    model.eval()
    H_all, A_all = dataset.channel_arrays()
    rows, gammas = [], []
    try:
        time_student(model, H_all[pick[0]], A_all[pick[0]])  # warm-up
        for i in pick:
            scene = dataset.scene(int(i))
            W, secs = time_student(model, H_all[i], A_all[i])
            rows.append((int(i), STUDENT_LABEL,
                         ssnr(scene, W, system.sensing_gain_var, system.ap_noise_var),
                         min_sinr(scene, W, system.ue_noise_var), secs))
            base = run_baseline(scene, system, rho, seed=int(i))
            rows.append((int(i), BASELINE_LABEL, base.g1, base.g2, base.seconds))
            gammas.append(base.gamma_high)
    finally:
        torch.set_num_threads(old_threads)
    report = _summarize(rows, single_thread, rho, n)
    report.summary["baseline_mean_gamma_high"] = float(np.mean(gammas))
    return report


def _summarize(rows, single_thread, rho, n) -> BenchmarkReport:
    summary = {"baseline_label": BASELINE_LABEL, "n_points": n, "rho": rho,
               "single_thread": bool(single_thread)}
    for method in (STUDENT_LABEL, BASELINE_LABEL):
        sel = [r for r in rows if r[1] == method]
        key = "baseline" if method == BASELINE_LABEL else "student"
        summary[f"{key}_mean_g1"] = float(np.mean([r[2] for r in sel]))
        summary[f"{key}_mean_g2"] = float(np.mean([r[3] for r in sel]))
        summary[f"{key}_mean_seconds"] = float(np.mean([r[4] for r in sel]))
    summary["speedup"] = summary["baseline_mean_seconds"] / summary["student_mean_seconds"]
    return BenchmarkReport(rows, summary)
