"""Infinite-width NTK of fully connected ReLU networks.

For one hidden layer the kernel is the arc-cosine closed form

    K(x, x') = c * (E[relu(u) relu(u')] + E[relu'(u) relu'(u')] * x.x'/d0)

with (u, u') the pre-activations ``w.x/sqrt(d0)``, ``w.x'/sqrt(d0)``,
``w ~ N(0, I)``. Depth ``L > 1`` uses the usual layer-wise recursion of the
two Gaussian expectations; that recursion is an extension checked only
against the Monte Carlo oracle (``ntk_eval_mc``), which is why
``KernelSpec.is_extension`` is reported wherever a kernel is used.
"""

from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset, make_rng

COS_CLAMP = 1.0 - 1e-12
PSD_TOL = 1e-8
SYM_TOL = 1e-10


@functools.lru_cache(maxsize=None)
def _relu_second_moment(n_draws=1_000_000, seed=0):
    z = make_rng(seed).standard_normal(n_draws)
    return float(np.mean(np.maximum(z, 0.0) ** 2))


@dataclass(frozen=True)
class KernelSpec:
    """Architecture behind the analytic NTK.

    ``c_norm`` must satisfy E[relu(z)^2] = 1/c_norm for standard normal z,
    i.e. c_norm = 2; the check is done numerically (1% tolerance).
    ``input_dim`` fixes d0 when given; otherwise d0 is taken from the data.
    """

    depth: int = 1
    c_norm: float = 2.0
    activation: str = "relu"
    input_dim: int | None = None

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"depth must be a positive integer, got {self.depth}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}; only 'relu' has a closed form here")
        if not self.c_norm > 0:
            raise ValueError("c_norm must be positive")
        if self.input_dim is not None and self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        moment = _relu_second_moment()
        if abs(self.c_norm * moment - 1.0) > 0.01:
            raise ValueError(
                f"c_norm={self.c_norm} inconsistent with relu: c * E[relu(z)^2] = {self.c_norm * moment:.4f}")

    @property
    def is_extension(self):
        return self.depth > 1

    def d0(self, d):
        if self.input_dim is not None and self.input_dim != d:
            raise ValueError(f"input dimension {d} does not match spec input_dim={self.input_dim}")
        return d

    def to_dict(self):
        return {"depth": self.depth, "c_norm": self.c_norm, "activation": self.activation,
                "input_dim": self.input_dim, "depth_recursion_extension": self.is_extension}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("depth_recursion_extension", None)
        return cls(**d)


def _as_matrix(X):
    if isinstance(X, Dataset):
        return X.X
    X = np.asarray(X, dtype=float)
    return X.reshape(1, -1) if X.ndim == 1 else X


def _check_pair(spec, A, B):
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    d0 = spec.d0(A.shape[1])
    qa = np.einsum("ij,ij->i", A, A) / d0
    qb = np.einsum("ij,ij->i", B, B) / d0
    if np.any(qa == 0) or np.any(qb == 0):
        raise ValueError("zero-norm input: the kernel angle is undefined")
    return d0, qa, qb


def _identical_pairs(A, B, sigma, qa, qb):
    """Mask of (i, j) with A[i] == B[j] bitwise.

    For such pairs cos is exactly 1, but sigma and the norms are rounded
    differently, and arccos near 1 turns an ulp into a ~1e-8 angle.
    """
    mask = np.zeros(sigma.shape, dtype=bool)
    cand = np.argwhere((qa[:, None] == qb[None, :])
                       & (np.abs(sigma - np.sqrt(np.outer(qa, qb))) <= 1e-12 * np.abs(sigma)))
    for i, j in cand:
        mask[i, j] = np.array_equal(A[i], B[j])
    return mask


def _arccos_terms(sigma, qa, qb, same=None):
    """cos, angle, and the mask of entries within the clamp band of +-1.

    Values use the exact angle; the mask only freezes the angle in
    derivatives, where 1/sin(psi) would otherwise blow up.
    """
    norm = np.sqrt(np.outer(qa, qb))
    cos = np.clip(sigma / norm, -1.0, 1.0)
    if same is not None:
        cos[same] = 1.0
    clamped = np.abs(cos) > COS_CLAMP
    return norm, cos, np.arccos(cos), clamped


def _ntk_block(spec, A, B):
    d0, qa, qb = _check_pair(spec, A, B)
    c = spec.c_norm
    sigma = A @ B.T / d0
    same = _identical_pairs(A, B, sigma, qa, qb)
    theta = sigma
    for _ in range(spec.depth):
        norm, cos, psi, _ = _arccos_terms(sigma, qa, qb, same)
        j = np.sin(psi) + (np.pi - psi) * cos
        sigma_dot = c * (np.pi - psi) / (2 * np.pi)
        sigma = c * norm * j / (2 * np.pi)
        theta = sigma + theta * sigma_dot
        qa = c * qa / 2
        qb = c * qb / 2
    return theta


def ntk_eval(spec: KernelSpec, x, x_prime) -> float:
    """Analytic NTK between two input vectors."""
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    return float(_ntk_block(spec, x[None, :], x_prime[None, :])[0, 0])


def gram(spec: KernelSpec, A, B=None, block_size=256, threads=1) -> np.ndarray:
    """Kernel matrix between the rows of ``A`` and ``B``.

    With ``B`` omitted (or the same object as ``A``) only the upper triangle
    is evaluated and mirrored, so the result is exactly symmetric. Row
    blocks are independent and may run on ``threads`` workers.
    """
    same = B is None or B is A
    XA = _as_matrix(A)
    XB = XA if same else _as_matrix(B)
    _check_pair(spec, XA, XB)
    n = XA.shape[0]
    starts = list(range(0, n, block_size))

    def work(start):
        stop = min(start + block_size, n)
        cols = slice(start, None) if same else slice(None)
        return start, stop, _ntk_block(spec, XA[start:stop], XB[cols])

    out = np.zeros((n, XB.shape[0]))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(work, starts))
    else:
        blocks = [work(s) for s in starts]
    for start, stop, block in blocks:
        if same:
            out[start:stop, start:] = block
        else:
            out[start:stop] = block
    if same:
        out = np.triu(out) + np.triu(out, 1).T
    return out


def _grad_coeffs(spec: KernelSpec, A, B):
    """d K(a_i, b_j) / d a_i = U[i, j] b_j + V[i, j] a_i.

    Every quantity in the recursion depends on a_i only through a_i . b_j and
    |a_i|^2, so each derivative is a combination of b_j and a_i; carrying the
    two coefficient matrices avoids materializing an (nA, nB, d) tensor.
    Entries with |cos psi| > 1 - 1e-12 are treated as having a constant
    angle, so the derivative stays bounded at collinear inputs.
    """
    d0, qa, qb = _check_pair(spec, A, B)
    c = spec.c_norm
    sigma = A @ B.T / d0
    same = _identical_pairs(A, B, sigma, qa, qb)
    # d sigma = u_s b + v_s a ; d qa = g a
    u_s = np.full(sigma.shape, 1.0 / d0)
    v_s = np.zeros(sigma.shape)
    g = np.full(qa.shape, 2.0 / d0)
    theta, u_t, v_t = sigma, u_s, v_s
    for _ in range(spec.depth):
        norm, cos, psi, clamped = _arccos_terms(sigma, qa, qb, same)
        sin = np.sin(psi)
        j = sin + (np.pi - psi) * cos
        # d cos = d sigma / norm - cos / (2 qa) d qa
        u_c = u_s / norm
        v_c = v_s / norm - (cos / (2 * qa[:, None])) * g[:, None]
        u_c = np.where(clamped, 0.0, u_c)
        v_c = np.where(clamped, 0.0, v_c)
        # d norm = norm / (2 qa) d qa
        v_n = (norm / (2 * qa[:, None])) * g[:, None]

        k = c / (2 * np.pi)
        new_sigma = k * norm * j
        w = norm * (np.pi - psi)
        u_ns = k * (w * u_c)
        v_ns = k * (j * v_n + w * v_c)
        sigma_dot = k * (np.pi - psi)
        inv_sin = k / np.where(clamped, 1.0, sin)
        u_sd, v_sd = inv_sin * u_c, inv_sin * v_c

        u_t = u_ns + u_t * sigma_dot + theta * u_sd
        v_t = v_ns + v_t * sigma_dot + theta * v_sd
        theta = new_sigma + theta * sigma_dot
        sigma, u_s, v_s = new_sigma, u_ns, v_ns
        qa = c * qa / 2
        qb = c * qb / 2
        g = c * g / 2
    return u_t, v_t


def ntk_grad_block(spec: KernelSpec, A, B) -> np.ndarray:
    """d K(a_i, b_j) / d a_i for every pair, shape (len(A), len(B), d)."""
    A = _as_matrix(A)
    B = _as_matrix(B)
    U, V = _grad_coeffs(spec, A, B)
    return U[..., None] * B[None, :, :] + V[..., None] * A[:, None, :]


def ntk_grad_weighted(spec: KernelSpec, A, B, W) -> np.ndarray:
    """sum_j W[i, j] d K(a_i, b_j) / d a_i, shape (len(A), d).

    ``W`` may be a length-nB vector (shared by every row) or an (nA, nB) matrix.
    """
    A = _as_matrix(A)
    B = _as_matrix(B)
    U, V = _grad_coeffs(spec, A, B)
    W = np.broadcast_to(np.asarray(W, dtype=float), U.shape)
    return (W * U) @ B + (W * V).sum(axis=1)[:, None] * A


def ntk_grad_x(spec: KernelSpec, x, x_prime) -> np.ndarray:
    """Gradient of ``ntk_eval(spec, x, x_prime)`` with respect to ``x``."""
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    return ntk_grad_block(spec, x[None, :], x_prime[None, :])[0, 0]


def ntk_eval_mc(spec: KernelSpec, x, x_prime, n_samples, seed=0, chunk=50_000):
    """Monte Carlo estimate of the NTK expectation and its standard error.

    Depth 1 averages over first-layer weight draws ``w ~ N(0, I_d0)``.
    Deeper kernels are estimated layer by layer: each layer's Gaussian
    expectations are sampled from a bivariate normal whose covariance is
    the previous layer's Monte Carlo estimate. The standard error then
    only reflects the last layer's sampling noise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    d0, qa, qb = _check_pair(spec, x[None, :], x_prime[None, :])
    c = spec.c_norm
    rng = make_rng(seed)
    sigma_ab = float(x @ x_prime / d0)
    qa, qb = float(qa[0]), float(qb[0])
    theta = sigma_ab

    for layer in range(spec.depth):
        last = layer == spec.depth - 1
        s1 = s2 = 0.0
        m_prod = m_dot = m_aa = m_bb = 0.0
        done = 0
        while done < n_samples:
            m = min(chunk, n_samples - done)
            if layer == 0:
                w = rng.standard_normal((m, d0))
                u, v = w @ x / np.sqrt(d0), w @ x_prime / np.sqrt(d0)
            else:
                cov = np.array([[qa, sigma_ab], [sigma_ab, qb]])
                uv = rng.multivariate_normal(np.zeros(2), cov, size=m, method="eigh")
                u, v = uv[:, 0], uv[:, 1]
            ru, rv = np.maximum(u, 0.0), np.maximum(v, 0.0)
            prod = ru * rv
            dot = ((u > 0) & (v > 0)).astype(float)
            m_prod += prod.sum()
            m_dot += dot.sum()
            m_aa += (ru * ru).sum()
            m_bb += (rv * rv).sum()
            if last:
                sample = c * (prod + dot * theta)
                s1 += sample.sum()
                s2 += (sample * sample).sum()
            done += m
        n = float(n_samples)
        sigma_ab_next = c * m_prod / n
        theta = sigma_ab_next + theta * c * m_dot / n
        sigma_ab, qa, qb = sigma_ab_next, c * m_aa / n, c * m_bb / n

    mean = s1 / n_samples
    if n_samples > 1:
        var = max(s2 / n_samples - mean ** 2, 0.0) * n_samples / (n_samples - 1)
        se = float(np.sqrt(var / n_samples))
    else:
        se = float("nan")
    return float(theta), se


@dataclass(frozen=True, eq=False)
class GramEigen:
    """Symmetric PSD matrix with descending eigenvalues and orthonormal eigenvectors (columns)."""

    K: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self):
        return self.K.shape[0]

    @property
    def lambda_max(self):
        return float(self.eigenvalues[0])

    @property
    def lambda_min(self):
        return float(self.eigenvalues[-1])

    def reconstruct(self):
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T

    def project(self, Y):
        """Coordinates V_i . Y of a vector in the eigenbasis."""
        return self.eigenvectors.T @ np.asarray(Y, dtype=float)


def eigendecompose(K) -> GramEigen:
    K = np.array(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {K.shape}")
    scale = max(np.abs(K).max(), np.finfo(float).tiny)
    if np.abs(K - K.T).max() > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    try:
        lam, V = np.linalg.eigh((K + K.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigendecomposition failed to converge: {exc}") from exc
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    lam_max = max(lam[0], 0.0)
    if lam[-1] < -PSD_TOL * lam_max or (lam_max == 0.0 and lam[-1] < 0):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {lam[-1]:.3e})")
    lam = np.where(lam < 0, 0.0, lam)
    for arr in (K, lam, V):
        arr.flags.writeable = False
    return GramEigen(K, lam, V)
