"""Differentially private Gaussian KDE sketches from random cosine features.

For feature i with direction w_i ~ N(0, I_D) and phase b_i ~ U[0, 2*pi), let

    f_i(z) = sqrt(2) * cos(sqrt(2) * w_i . z + b_i)

Over the randomness of (w_i, b_i), E[f_i(x) * f_i(y)] = exp(-||x - y||^2),
the Gaussian kernel. A sketch therefore stores the per-feature dataset means
F_i = mean_x f_i(x) plus Laplace noise, and answers KDE queries as
(1/I) * sum_i F_i * f_i(y). Only the noisy means are privacy-bearing; the
feature directions and phases derive from a public seed.

Prefix queries against a sketch of k-block vectors work by zero padding: if
every data block has squared norm u, then for a query y of ell < k blocks

    exp(u * (k - ell)) * exp(-||x - pad(y)||^2) = exp(-||x[:ell] - y||^2)

exactly, because the padded blocks contribute exactly u each to the squared
distance. The same sketch thus serves every prefix length, at the cost of
multiplying the estimate (and its error) by exp(u * (k - ell)).
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .budget import as_epsilon, dumps_canonical
from .randomness import child_seeds, laplace

SKETCH_FORMAT = "dpkps-sketch-v1"
BLOCK_NORM_TOLERANCE = 1e-6

# Noiseless sketches exist only so tests can compare against exact oracles.
# The flag is rejected unless this test-only environment key is set, and no
# CLI path ever sets or forwards it.
NOISELESS_ENV_KEY = "DPKPS_ALLOW_NOISELESS"


class SketchAccuracyWarning(UserWarning):
    """The dataset is small enough that the accuracy guarantee may not hold."""


@dataclass(frozen=True)
class KdeEstimate:
    """A KDE query result. Noise can push ``value`` outside [0, 1]."""

    value: float
    prefix_len: int
    blowup: float


@dataclass(frozen=True)
class DpKdeSketch:
    """The released KDE data structure for one block geometry.

    All fields are fixed after build. ``omegas``/``betas`` regenerate
    deterministically from ``seed``, so serialization stores only the seed,
    a checksum, and the noisy means.
    """

    block_dim: int
    num_blocks: int
    block_sq_norm: float
    num_features: int
    omegas: np.ndarray
    betas: np.ndarray
    noisy_means: np.ndarray
    epsilon: Fraction
    dataset_size: int
    seed: int
    noise_disabled: bool = False

    @property
    def dim(self) -> int:
        return self.block_dim * self.num_blocks


def gaussian_kernel(x: np.ndarray, y: np.ndarray) -> float:
    """exp(-||x - y||^2), the kernel every sketch estimates."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-np.dot(diff, diff)))


def exact_kde_many(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Brute-force Gaussian KDE of each query against ``points``.

    This is the test oracle the sketches are judged against; it shares no
    code with the sketch query path.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, dim) array")
    if queries.ndim != 2 or queries.shape[1] != points.shape[1]:
        raise ValueError(
            f"queries must be (m, {points.shape[1]}), got {queries.shape}"
        )
    sq_dists = (
        np.sum(points**2, axis=1)[:, None]
        + np.sum(queries**2, axis=1)[None, :]
        - 2.0 * points @ queries.T
    )
    np.maximum(sq_dists, 0.0, out=sq_dists)
    return np.exp(-sq_dists).mean(axis=0)


def exact_kde(points: np.ndarray, query: np.ndarray) -> float:
    return float(exact_kde_many(points, np.asarray(query, dtype=np.float64)[None, :])[0])


def exact_prefix_kde(
    points: np.ndarray, query: np.ndarray, block_dim: int, prefix_blocks: int
) -> float:
    """Exact KDE of an ell-block query against the first ell blocks of points."""
    points = np.asarray(points, dtype=np.float64)
    width = block_dim * prefix_blocks
    if np.asarray(query).shape[0] != width:
        raise ValueError(f"query must have dimension {width}")
    return exact_kde(points[:, :width], query)


def laplace_scale(epsilon: Fraction, num_features: int, dataset_size: int) -> float:
    """Noise scale for the released mean-feature vector.

    Features are bounded by sqrt(2), so dropping one record moves each of
    the ``num_features`` means by at most 2*sqrt(2)/max(n-1, 1); the Laplace
    mechanism at that L1 sensitivity gives scale 2*sqrt(2)*I / (eps * (n-1)).
    """
    return float(
        2.0 * np.sqrt(2.0) * num_features / (float(epsilon) * max(dataset_size - 1, 1))
    )


def _feature_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    feature_seed, noise_seed = child_seeds(seed, 2)
    return np.random.default_rng(feature_seed), np.random.default_rng(noise_seed)


def _sample_features(seed: int, num_features: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    feature_rng, _ = _feature_rngs(seed)
    omegas = feature_rng.standard_normal((num_features, dim))
    betas = feature_rng.uniform(0.0, 2.0 * np.pi, num_features)
    return omegas, betas


def _check_block_norms(blocks_sq: np.ndarray, block_sq_norm: float, what: str) -> None:
    worst = float(np.max(np.abs(blocks_sq - block_sq_norm)))
    if worst > BLOCK_NORM_TOLERANCE:
        raise ValueError(
            f"{what}: block squared norms deviate from {block_sq_norm} "
            f"by up to {worst:.3g} (tolerance {BLOCK_NORM_TOLERANCE})"
        )


def _feature_matrix(omegas: np.ndarray, betas: np.ndarray, points: np.ndarray) -> np.ndarray:
    # (n, I) feature matrix; the hot loop is this single matrix product.
    arg = np.sqrt(2.0) * (points @ omegas.T) + betas
    return np.sqrt(2.0) * np.cos(arg)


def _features(sketch: DpKdeSketch, points: np.ndarray) -> np.ndarray:
    return _feature_matrix(sketch.omegas, sketch.betas, points)


def build_sketch(
    points: np.ndarray,
    *,
    epsilon: Fraction | int | float | str,
    num_features: int,
    block_dim: int,
    block_sq_norm: float,
    seed: int,
    noise_disabled: bool = False,
) -> DpKdeSketch:
    """Build the released sketch for a private point set.

    ``points`` is an (n, block_dim * k) array where every block of every row
    has squared norm ``block_sq_norm`` (within 1e-6). The result is
    epsilon-DP under drop-one-row adjacency; rows must therefore be one
    vector per protected record.
    """
    if noise_disabled and not os.environ.get(NOISELESS_ENV_KEY):
        raise RuntimeError(
            "noise_disabled is a test-only flag; set the "
            f"{NOISELESS_ENV_KEY} environment key to use it"
        )
    eps = as_epsilon(epsilon)
    if num_features < 1:
        raise ValueError(f"num_features must be >= 1, got {num_features}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, dim) array")
    n, dim = points.shape
    if block_dim < 1 or dim % block_dim != 0:
        raise ValueError(f"dimension {dim} is not a multiple of block_dim {block_dim}")
    num_blocks = dim // block_dim
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    blocks_sq = np.sum(points.reshape(n, num_blocks, block_dim) ** 2, axis=2)
    _check_block_norms(blocks_sq, block_sq_norm, "dataset")

    if not noise_disabled and n * float(eps) < num_features:
        warnings.warn(
            f"dataset of size {n} may be too small for the requested accuracy "
            f"(n * epsilon = {n * float(eps):.3g} < num_features = {num_features}); "
            "estimates may be noise-dominated",
            SketchAccuracyWarning,
            stacklevel=2,
        )

    omegas, betas = _sample_features(seed, num_features, dim)
    means = _feature_matrix(omegas, betas, points).mean(axis=0)
    if not noise_disabled:
        _, noise_rng = _feature_rngs(seed)
        means = means + laplace(noise_rng, laplace_scale(eps, num_features, n), num_features)
    return DpKdeSketch(
        block_dim=block_dim,
        num_blocks=num_blocks,
        block_sq_norm=float(block_sq_norm),
        num_features=num_features,
        omegas=omegas,
        betas=betas,
        noisy_means=means,
        epsilon=eps,
        dataset_size=n,
        seed=seed,
        noise_disabled=noise_disabled,
    )


def query_many(sketch: DpKdeSketch, queries: np.ndarray) -> np.ndarray:
    """Raw KDE estimates for full-dimension queries, one per row."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != sketch.dim:
        raise ValueError(f"queries must be (m, {sketch.dim}), got {queries.shape}")
    return _features(sketch, queries) @ sketch.noisy_means / sketch.num_features


def query(sketch: DpKdeSketch, y: np.ndarray) -> KdeEstimate:
    """KDE estimate at a full-dimension point. Runs in O(dim * I)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (sketch.dim,):
        raise ValueError(f"query must have dimension {sketch.dim}, got {y.shape}")
    value = float(query_many(sketch, y[None, :])[0])
    return KdeEstimate(value=value, prefix_len=sketch.num_blocks, blowup=1.0)


def query_prefix(sketch: DpKdeSketch, y: np.ndarray, prefix_blocks: int) -> KdeEstimate:
    """Estimate the KDE over length-ell prefixes of the sketched dataset.

    ``y`` must be the concatenation of ``prefix_blocks`` blocks, each with the
    sketch's block squared norm. The query is zero-padded to full dimension
    and the result multiplied by exp(u * (k - ell)).
    """
    y = np.asarray(y, dtype=np.float64)
    if not 1 <= prefix_blocks <= sketch.num_blocks:
        raise ValueError(
            f"prefix_blocks must be in 1..{sketch.num_blocks}, got {prefix_blocks}"
        )
    width = sketch.block_dim * prefix_blocks
    if y.shape != (width,):
        raise ValueError(f"prefix query must have dimension {width}, got {y.shape}")
    blocks_sq = np.sum(y.reshape(prefix_blocks, sketch.block_dim) ** 2, axis=1)
    _check_block_norms(blocks_sq, sketch.block_sq_norm, "prefix query")
    padded = np.zeros(sketch.dim, dtype=np.float64)
    padded[:width] = y
    blowup = float(
        np.exp(sketch.block_sq_norm * (sketch.num_blocks - prefix_blocks))
    )
    raw = float(query_many(sketch, padded[None, :])[0])
    return KdeEstimate(value=raw * blowup, prefix_len=prefix_blocks, blowup=blowup)


def query_prefix_extensions(
    sketch: DpKdeSketch, prefix: np.ndarray, candidates: np.ndarray
) -> np.ndarray:
    """Score every single-block extension of a shared prefix in one batch.

    ``prefix`` is the flat concatenation of ell-1 already-scaled blocks (may
    be empty) and ``candidates`` an (m, block_dim) array of scaled candidate
    blocks. Returns the m prefix-KDE estimates at prefix length ell,
    including the zero-padding blowup factor. The shared-prefix projection
    is computed once, so the per-candidate cost is O(block_dim * I).
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    d = sketch.block_dim
    if prefix.ndim != 1 or prefix.shape[0] % d != 0:
        raise ValueError(f"prefix length {prefix.shape} is not a multiple of {d}")
    if candidates.ndim != 2 or candidates.shape[1] != d:
        raise ValueError(f"candidates must be (m, {d}), got {candidates.shape}")
    filled = prefix.shape[0] // d
    ell = filled + 1
    if ell > sketch.num_blocks:
        raise ValueError(
            f"extension length {ell} exceeds sketch blocks {sketch.num_blocks}"
        )
    if filled:
        blocks_sq = np.sum(prefix.reshape(filled, d) ** 2, axis=1)
        _check_block_norms(blocks_sq, sketch.block_sq_norm, "prefix")
    _check_block_norms(
        np.sum(candidates**2, axis=1), sketch.block_sq_norm, "candidates"
    )
    prefix_proj = sketch.omegas[:, : filled * d] @ prefix
    cand_proj = candidates @ sketch.omegas[:, filled * d : ell * d].T
    arg = np.sqrt(2.0) * (prefix_proj + cand_proj) + sketch.betas
    raw = (np.sqrt(2.0) * np.cos(arg)) @ sketch.noisy_means / sketch.num_features
    blowup = float(np.exp(sketch.block_sq_norm * (sketch.num_blocks - ell)))
    return raw * blowup


def _omega_checksum(omegas: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(omegas).tobytes()).hexdigest()


def save_sketch(sketch: DpKdeSketch, path: str | Path) -> None:
    """Persist a sketch. Feature directions are stored as seed + checksum."""
    payload = {
        "format": SKETCH_FORMAT,
        "block_dim": sketch.block_dim,
        "num_blocks": sketch.num_blocks,
        "block_sq_norm": sketch.block_sq_norm,
        "num_features": sketch.num_features,
        "epsilon": str(sketch.epsilon),
        "dataset_size": sketch.dataset_size,
        "seed": sketch.seed,
        "noise_disabled": sketch.noise_disabled,
        "omega_sha256": _omega_checksum(sketch.omegas),
        "noisy_means": [float(v) for v in sketch.noisy_means],
    }
    Path(path).write_text(dumps_canonical(payload), encoding="utf-8")


def load_sketch(path: str | Path) -> DpKdeSketch:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != SKETCH_FORMAT:
        raise ValueError(f"{path}: unrecognized sketch format {data.get('format')!r}")
    dim = data["block_dim"] * data["num_blocks"]
    omegas, betas = _sample_features(data["seed"], data["num_features"], dim)
    if _omega_checksum(omegas) != data["omega_sha256"]:
        raise ValueError(
            f"{path}: regenerated feature directions do not match the stored checksum"
        )
    noisy_means = np.array(data["noisy_means"], dtype=np.float64)
    if noisy_means.shape[0] != data["num_features"]:
        raise ValueError(f"{path}: expected {data['num_features']} noisy means")
    return DpKdeSketch(
        block_dim=data["block_dim"],
        num_blocks=data["num_blocks"],
        block_sq_norm=data["block_sq_norm"],
        num_features=data["num_features"],
        omegas=omegas,
        betas=betas,
        noisy_means=noisy_means,
        epsilon=Fraction(data["epsilon"]),
        dataset_size=data["dataset_size"],
        seed=data["seed"],
        noise_disabled=data["noise_disabled"],
    )
