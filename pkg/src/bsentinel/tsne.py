"""Exact O(n^2) t-SNE to 2D for embedding-space diagnostics.

Conditional bandwidths are found by per-row binary search on the precision
so each row's perplexity matches the target; the map is optimized by
momentum gradient descent with the usual per-coordinate gain adaptation,
early exaggeration for the first 250 iterations, and a momentum switch at
iteration 250. Logged KL values are always computed against the true
(unexaggerated) affinities.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

_EPS = 1e-12
MAX_POINTS = 5000

ROLE_IMAGE = "image"
ROLE_TEXT_CLEAN = "text-T1"
ROLE_TEXT_BACKDOOR = "text-T2"


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch_iter: int = 250
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be at least 1, got {self.iterations}")
        if self.perplexity <= 1.0:
            raise ValueError(f"perplexity must exceed 1, got {self.perplexity}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass
class ProjectedPoints:
    coords: np.ndarray  # (n, 2)
    provenance: list[str]
    roles: list[str]
    kl_checkpoints: list[tuple[int, float]]  # (iteration, KL) every 50 iters
    final_kl: float

    def __len__(self) -> int:
        return len(self.coords)


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _row_entropy_probs(shifted_d2: np.ndarray, beta: float, i: int) -> tuple[float, np.ndarray]:
    """Shannon entropy (bits) and conditional probabilities for one row at
    precision beta. Distances arrive shifted by the row's off-diagonal
    minimum, so the nearest neighbor never underflows."""
    p = np.exp(-shifted_d2 * beta)
    p[i] = 0.0
    p /= p.sum()
    nz = p > 0
    entropy = -float((p[nz] * np.log2(p[nz])).sum())
    return entropy, p


def conditional_affinities(x: np.ndarray, perplexity: float,
                           tol: float = 1e-4, max_iter: int = 64) -> np.ndarray:
    """Row-stochastic conditional affinities whose per-row perplexity matches
    the target within ``tol`` (binary search on the precision, at most
    ``max_iter`` total search steps per row). Rows with tied nearest
    neighbors bottom out at their achievable perplexity; the closest-seen
    distribution is kept."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise ValueError(f"need at least 4 points, got {n}")
    if perplexity >= n - 1:
        raise ValueError(f"perplexity {perplexity} is infeasible for {n} points (must be < {n - 1})")
    target_entropy = np.log2(perplexity)
    d2 = _squared_distances(x)
    p_cond = np.zeros((n, n), dtype=np.float64)
    off_diag = d2 + np.diag(np.full(n, np.inf))
    for i in range(n):
        shifted = d2[i] - off_diag[i].min()
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        entropy, p = _row_entropy_probs(shifted, beta, i)
        best_gap, best_p = abs(2.0**entropy - perplexity), p
        for _ in range(max_iter):
            if best_gap <= tol:
                break
            if entropy > target_entropy:  # distribution too flat: raise precision
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else 0.5 * (beta + beta_hi)
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else 0.5 * (beta + beta_lo)
            entropy, p = _row_entropy_probs(shifted, beta, i)
            gap = abs(2.0**entropy - perplexity)
            if gap < best_gap:
                best_gap, best_p = gap, p
        p_cond[i] = best_p
    return p_cond


def pairwise_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized joint affinities: (P(j|i) + P(i|j)) / (2n); zero diagonal,
    entries sum to 1."""
    p_cond = conditional_affinities(x, perplexity)
    n = p_cond.shape[0]
    p = (p_cond + p_cond.T) / (2.0 * n)
    np.fill_diagonal(p, 0.0)
    return p


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], _EPS))).sum())


def _q_distribution(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + _squared_distances(y))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    return np.maximum(q, _EPS), num


def project(x: np.ndarray, config: TsneConfig,
            provenance: Sequence[str] | None = None,
            roles: Sequence[str] | None = None) -> ProjectedPoints:
    """Gradient descent on KL(P || Q) with a Student-t map distribution.

    Inputs beyond MAX_POINTS are seeded-subsampled. KL is reported every 50
    iterations, always against the unexaggerated P.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    provenance = list(provenance) if provenance is not None else ["unknown"] * n
    roles = list(roles) if roles is not None else [ROLE_IMAGE] * n
    if len(provenance) != n or len(roles) != n:
        raise ValueError("provenance/role tags must match the number of points")

    rng = np.random.default_rng([config.seed, 0x75E])
    if n > MAX_POINTS:
        keep = np.sort(rng.choice(n, size=MAX_POINTS, replace=False))
        x = x[keep]
        provenance = [provenance[i] for i in keep]
        roles = [roles[i] for i in keep]
        n = MAX_POINTS

    p_true = pairwise_affinities(x, config.perplexity)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)

    checkpoints: list[tuple[int, float]] = []
    for it in range(config.iterations):
        exaggerating = it < config.exaggeration_iters
        p = p_true * config.early_exaggeration if exaggerating else p_true
        q, num = _q_distribution(y)
        # gradient: 4 * sum_j (p_ij - q_ij) * num_ij * (y_i - y_j)
        coeff = (p - q) * num
        grad = 4.0 * ((np.diag(coeff.sum(axis=1)) - coeff) @ y)

        momentum = config.momentum_early if it < config.momentum_switch_iter else config.momentum_late
        flip = np.sign(grad) != np.sign(velocity)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - config.learning_rate * (gains * grad)
        y = y + velocity

        if (it + 1) % 50 == 0 or it + 1 == config.iterations:
            q, _ = _q_distribution(y)
            checkpoints.append((it + 1, _kl_divergence(p_true, q)))

    return ProjectedPoints(
        coords=y,
        provenance=provenance,
        roles=roles,
        kl_checkpoints=checkpoints,
        final_kl=checkpoints[-1][1],
    )


# ---------------------------------------------------------------------------
# exports

_PALETTE = {
    "clean": "#4c78a8",
    "BadnetsSQ": "#f58518",
    "BadnetsPX": "#e45756",
    "TrojanSQ": "#72b7b2",
    "TrojanWM": "#54a24b",
    "L2Inv": "#eeca3b",
    "L0Inv": "#b279a2",
    "unknown": "#9d9d9d",
}


def scatter_csv(points: ProjectedPoints) -> str:
    lines = ["x,y,role,provenance"]
    for (px, py), role, prov in zip(points.coords, points.roles, points.provenance):
        lines.append(f"{float(px)!r},{float(py)!r},{role},{prov}")
    return "\n".join(lines) + "\n"


def scatter_svg(points: ProjectedPoints, size: int = 640, margin: float = 24.0) -> str:
    coords = points.coords
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)

    def to_px(p):
        scaled = (p - lo) / span
        return (
            margin + scaled[0] * (size - 2 * margin),
            size - margin - scaled[1] * (size - 2 * margin),
        )

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for point, role, prov in zip(coords, points.roles, points.provenance):
        cx, cy = to_px(point)
        color = _PALETTE.get(prov, _PALETTE["unknown"])
        if role == ROLE_IMAGE:
            parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}" fill-opacity="0.7"/>')
        else:
            # text embeddings render as outlined diamonds so they stand out
            half = 8.0
            label = "T1" if role == ROLE_TEXT_CLEAN else "T2"
            parts.append(
                f'<path d="M {cx:.2f} {cy - half:.2f} L {cx + half:.2f} {cy:.2f} '
                f'L {cx:.2f} {cy + half:.2f} L {cx - half:.2f} {cy:.2f} Z" '
                f'fill="black" stroke="{color}" stroke-width="2"/>'
            )
            parts.append(
                f'<text x="{cx + half + 2:.2f}" y="{cy + 4:.2f}" font-size="12" '
                f'font-family="sans-serif">{label}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_scatter(points: ProjectedPoints, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        path.write_text(scatter_csv(points))
    elif format == "svg":
        path.write_text(scatter_svg(points))
    else:
        raise ValueError(f"unknown scatter format {format!r}")
