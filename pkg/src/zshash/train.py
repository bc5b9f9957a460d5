"""The hashing model and its alternating optimizer.

The objective over P (m x l projection), W (l x e code-to-semantics map),
R (e x e orthogonal alignment) and B (l x n binary codes) is

    |R'Y - W'B|_F^2 + lam |W|_F^2 + alpha |P'phi(X) - B|_F^2
        + beta |P|_F^2 + gamma Tr(P' phi(X) L phi(X)' P)

with B constrained to {-1,+1}. Each block has an exact minimizer:

* P: ridge system (phi phi' + (beta/alpha) I + (gamma/alpha) phi L phi')
  P = phi B';
* B: cyclic discrete coordinate descent over bit rows,
  q_i = sgn(h_i - B_noti' W_noti u_i) with H = W R' Y + alpha P' phi(X);
* R: orthogonal Procrustes, R = U V' from the SVD of Y (W'B)';
* W: ridge regression, W = (B B' + lam I)^-1 B Y' R.

sgn(0) is +1 everywhere. Because every block update is an exact minimizer
of its subproblem, the objective is non-increasing across block updates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import sqrt
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import SolverError, ValidationError
from .featurize import AnchorSet, KernelizedFeatures, kernel_map_batch, sample_anchors

if TYPE_CHECKING:
    from .data_io import FeatureMatrix
    from .graph import LaplacianMatrix

# Cap on full DCC row sweeps per B update; the sweep normally reaches a
# fixed point in a handful of passes, the cap only guards against
# floating-point tie cycling.
DCC_MAX_PASSES = 30


def sign_pm1(x: np.ndarray) -> np.ndarray:
    """Elementwise sign into {-1,+1} with sign(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class Hyperparameters:
    """Training weights and schedule. Defaults follow the reference
    configuration (alpha 1e-5, gamma 1e-6, lam 1e-2, beta 1e-4, 10
    iterations, 1000 anchors)."""

    l: int
    lam: float = 1e-2
    alpha: float = 1e-5
    beta: float = 1e-4
    gamma: float = 1e-6
    max_iters: int = 10
    tol: float = 1e-5
    seed: int = 0
    m: int = 1000
    delta: float | None = None

    def __post_init__(self):
        if self.l < 1:
            raise ValidationError(f"code length must be >= 1, got {self.l}")
        if self.m < 1:
            raise ValidationError(f"anchor count must be >= 1, got {self.m}")
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValidationError(f"alpha must be positive and finite, got {self.alpha}")
        for name in ("lam", "beta", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ValidationError(f"{name} must be >= 0 and finite, got {v}")
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (self.tol >= 0):
            raise ValidationError(f"tol must be >= 0, got {self.tol}")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError(f"seed must fit an unsigned 64-bit integer, got {self.seed}")
        if self.delta is not None and not (self.delta > 0):
            raise ValidationError(f"delta must be positive, got {self.delta}")


@dataclass(frozen=True)
class ZshModel:
    """Trained parameters. B is the training-time code matrix; models
    loaded from disk carry B=None since encoding does not need it."""

    P: np.ndarray
    W: np.ndarray
    R: np.ndarray
    B: np.ndarray | None
    anchors: AnchorSet
    hyper: Hyperparameters

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        W = np.asarray(self.W, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        m, l = P.shape
        if m != self.anchors.m:
            raise ValidationError(f"P has {m} rows but the anchor set has {self.anchors.m}")
        if W.shape[0] != l:
            raise ValidationError(f"W has {W.shape[0]} rows, expected {l}")
        e = W.shape[1]
        if R.shape != (e, e):
            raise ValidationError(f"R must be {e} x {e}, got {R.shape}")
        resid = np.max(np.abs(R.T @ R - np.eye(e)))
        if resid > 1e-8:
            raise ValidationError(f"R is not orthogonal (residual {resid:.3e})")
        if self.B is not None:
            B = np.asarray(self.B, dtype=np.float64)
            if B.ndim != 2 or B.shape[0] != l:
                raise ValidationError(f"B must have {l} rows, got {B.shape}")
            if not np.all(np.abs(B) == 1.0):
                raise ValidationError("B entries must all be -1 or +1")
            object.__setattr__(self, "B", B)
        for name, arr in (("P", P), ("W", W), ("R", R)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @property
    def l(self) -> int:
        return self.P.shape[1]

    @property
    def e(self) -> int:
        return self.W.shape[1]


@dataclass
class TrainTrace:
    """Objective history of a training run."""

    initial_objective: float
    initial_terms: tuple[float, float, float, float, float]
    objectives: list[float] = field(default_factory=list)
    terms: list[tuple[float, float, float, float, float]] = field(default_factory=list)
    block_objectives: list[dict[str, float]] = field(default_factory=list)
    rel_changes: list[float] = field(default_factory=list)
    iter_seconds: list[float] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.objectives)


def _phi_values(phiX) -> np.ndarray:
    if isinstance(phiX, KernelizedFeatures):
        return phiX.values
    return np.asarray(phiX, dtype=np.float64)


def _laplacian_sparse(L) -> sp.csr_matrix:
    mat = getattr(L, "matrix", L)
    if sp.issparse(mat):
        return mat.tocsr()
    return sp.csr_matrix(np.asarray(mat, dtype=np.float64))


def _objective_terms(P, W, B, R, phi, Y, L_sp, lam, alpha, beta, gamma):
    F = P.T @ phi
    t1 = float(np.sum((R.T @ Y - W.T @ B) ** 2))
    t2 = lam * float(np.sum(W * W))
    t3 = alpha * float(np.sum((F - B) ** 2))
    t4 = beta * float(np.sum(P * P))
    t5 = gamma * float(np.sum(F * (L_sp @ F.T).T))
    return (t1, t2, t3, t4, t5)


def objective(model: ZshModel, phiX, Y, L) -> float:
    """Evaluate the full training objective at the model's parameters."""
    if model.B is None:
        raise ValidationError("model carries no training codes B; "
                              "the objective is undefined")
    phi = _phi_values(phiX)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != (model.e, model.B.shape[1]):
        raise ValidationError(
            f"Y must be {model.e} x {model.B.shape[1]}, got {Y.shape}")
    if phi.shape != (model.m, model.B.shape[1]):
        raise ValidationError(
            f"phi(X) must be {model.m} x {model.B.shape[1]}, got {phi.shape}")
    h = model.hyper
    terms = _objective_terms(model.P, model.W, model.B, model.R, phi, Y,
                             _laplacian_sparse(L), h.lam, h.alpha, h.beta, h.gamma)
    value = float(sum(terms))
    if not np.isfinite(value):
        raise SolverError("objective evaluated to a non-finite value")
    return value


# ---------------------------------------------------------------------------
# Block updates
# ---------------------------------------------------------------------------

def update_P(phiX, B, L, alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Exact minimizer of the P block:
    P = (phi phi' + (beta/alpha) I + (gamma/alpha) phi L phi')^-1 phi B'."""
    phi = _phi_values(phiX)
    B = np.asarray(B, dtype=np.float64)
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    system = _p_system_matrix(phi, _laplacian_sparse(L), alpha, beta, gamma)
    factor = _factor_p_system(system)
    return scipy.linalg.cho_solve(factor, phi @ B.T)


def _p_system_matrix(phi, L_sp, alpha, beta, gamma):
    m = phi.shape[0]
    system = phi @ phi.T + (beta / alpha) * np.eye(m)
    if gamma != 0:
        system += (gamma / alpha) * (phi @ (L_sp @ phi.T))
    return system


def _factor_p_system(system):
    try:
        return scipy.linalg.cho_factor(system)
    except scipy.linalg.LinAlgError:
        raise SolverError(
            "the P-update system matrix is singular; set beta > 0 to "
            "regularize it") from None


def update_B(W, R, Y, P, phiX, alpha: float, B_init,
             max_passes: int = DCC_MAX_PASSES,
             objective_trace: list | None = None) -> np.ndarray:
    """Cyclic discrete coordinate descent on the binary codes.

    With H = W R' Y + alpha P' phi(X), row i is set to
    q_i = sgn(h_i - B_noti' W_noti u_i), cycling rows until a full pass
    changes no bit or max_passes is hit. When objective_trace is a list,
    the reduced objective |W'B|^2 - 2 Tr(B'H) is appended after every row
    update.
    """
    W = np.asarray(W, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    phi = _phi_values(phiX)
    B = np.array(B_init, dtype=np.float64, copy=True)
    if not np.all(np.abs(B) == 1.0):
        raise ValidationError("B_init entries must all be -1 or +1")
    l = B.shape[0]
    H = W @ (R.T @ Y) + alpha * (P.T @ phi)
    G = W @ W.T

    def reduced_objective():
        return float(np.sum((W.T @ B) ** 2) - 2.0 * np.sum(B * H))

    for _ in range(max_passes):
        changed = False
        for i in range(l):
            # sum_{j != i} q_j (u_j . u_i), via the full correlation minus row i
            corr = B.T @ G[:, i]
            s = corr - B[i] * G[i, i]
            q = sign_pm1(H[i] - s)
            if not np.array_equal(q, B[i]):
                B[i] = q
                changed = True
            if objective_trace is not None:
                objective_trace.append(reduced_objective())
        if not changed:
            break
    return B


def solve_rotation(Y, M) -> np.ndarray:
    """Orthogonal matrix minimizing |R'Y - M|_F via the SVD of Y M'."""
    Y = np.asarray(Y, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    U, _, Vt = np.linalg.svd(Y @ M.T)
    return U @ Vt


def update_R(Y, W, B) -> np.ndarray:
    """Exact minimizer of the alignment block: Procrustes with M = W'B."""
    W = np.asarray(W, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    return solve_rotation(Y, W.T @ B)


def update_W(B, Y, R, lam: float) -> np.ndarray:
    """Closed-form ridge solution W = (B B' + lam I)^-1 B Y' R."""
    B = np.asarray(B, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    l = B.shape[0]
    system = B @ B.T + lam * np.eye(l)
    rhs = B @ (Y.T @ R)
    try:
        return scipy.linalg.solve(system, rhs, assume_a="pos")
    except np.linalg.LinAlgError:
        raise SolverError(
            "the W-update system matrix is singular; set lam > 0 to "
            "regularize it") from None


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------

def _random_orthogonal(e: int, rng: np.random.Generator) -> np.ndarray:
    gauss = rng.standard_normal((e, e))
    q, r = np.linalg.qr(gauss)
    return q * np.where(np.diag(r) >= 0, 1.0, -1.0)


def initialize(n: int, m: int, l: int, e: int, seed: int):
    """Seeded random starting point: B uniform in {-1,+1}, P and W scaled
    Gaussians, R a random orthogonal matrix."""
    rng = np.random.default_rng(seed)
    B = np.where(rng.random((l, n)) < 0.5, -1.0, 1.0)
    P = rng.standard_normal((m, l)) / sqrt(m)
    W = rng.standard_normal((l, e)) / sqrt(l)
    R = _random_orthogonal(e, rng)
    return B, P, W, R


def train(X: "FeatureMatrix", Y, L: "LaplacianMatrix", hyper: Hyperparameters,
          workers: int | None = 1) -> tuple[ZshModel, TrainTrace]:
    """Fit the model by alternating exact block updates (P, B, R, W per
    iteration) until the relative objective change drops below hyper.tol
    or hyper.max_iters is reached."""
    Y = np.asarray(Y, dtype=np.float64)
    n = X.n
    if Y.ndim != 2 or Y.shape[1] != n:
        raise ValidationError(f"Y must have one column per item, got {Y.shape} for n={n}")
    if not np.all(np.isfinite(Y)):
        raise ValidationError("Y contains non-finite entries")
    L_sp = _laplacian_sparse(L)
    if L_sp.shape != (n, n):
        raise ValidationError(f"Laplacian must be {n} x {n}, got {L_sp.shape}")
    e = Y.shape[0]

    seed_seq = np.random.SeedSequence(hyper.seed)
    anchor_seed, init_seed = (int(s) for s in seed_seq.generate_state(2, dtype=np.uint64))
    anchor_set = sample_anchors(X, hyper.m, anchor_seed, delta=hyper.delta)
    phiX = kernel_map_batch(X, anchor_set, workers)
    phi = phiX.values

    B, P, W, R = initialize(n, hyper.m, hyper.l, e, init_seed)

    system = _p_system_matrix(phi, L_sp, hyper.alpha, hyper.beta, hyper.gamma)
    factor = _factor_p_system(system)

    def terms_at(P_, W_, B_, R_):
        return _objective_terms(P_, W_, B_, R_, phi, Y, L_sp,
                                hyper.lam, hyper.alpha, hyper.beta, hyper.gamma)

    def checked(value: float, block: str) -> float:
        if not np.isfinite(value):
            raise SolverError(f"non-finite objective after {block} update")
        return value

    init_terms = terms_at(P, W, B, R)
    prev = checked(float(sum(init_terms)), "initialization")
    trace = TrainTrace(initial_objective=prev, initial_terms=init_terms)

    for _ in range(hyper.max_iters):
        t0 = time.perf_counter()
        blocks: dict[str, float] = {}

        P = scipy.linalg.cho_solve(factor, phi @ B.T)
        blocks["P"] = checked(float(sum(terms_at(P, W, B, R))), "P")

        B = update_B(W, R, Y, P, phi, hyper.alpha, B)
        blocks["B"] = checked(float(sum(terms_at(P, W, B, R))), "B")

        R = update_R(Y, W, B)
        blocks["R"] = checked(float(sum(terms_at(P, W, B, R))), "R")

        W = update_W(B, Y, R, hyper.lam)
        end_terms = terms_at(P, W, B, R)
        cur = blocks["W"] = checked(float(sum(end_terms)), "W")

        trace.block_objectives.append(blocks)
        trace.objectives.append(cur)
        trace.terms.append(end_terms)
        trace.iter_seconds.append(time.perf_counter() - t0)
        rel = abs(prev - cur) / (1.0 + abs(prev))
        trace.rel_changes.append(rel)
        prev = cur
        if rel < hyper.tol:
            trace.stop_reason = "tol"
            break
    else:
        trace.stop_reason = "max_iters"

    model = ZshModel(P=P, W=W, R=R, B=B, anchors=anchor_set, hyper=hyper)
    return model, trace


def write_trace_csv(trace: TrainTrace, path) -> None:
    """Emit iter,objective,term1..term5 rows (row 0 is the initial point)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("iter,objective,term1,term2,term3,term4,term5\n")

        def row(i, obj, terms):
            cells = ",".join("%.17g" % t for t in terms)
            f.write("%d,%.17g,%s\n" % (i, obj, cells))

        row(0, trace.initial_objective, trace.initial_terms)
        for i, (obj, terms) in enumerate(zip(trace.objectives, trace.terms), start=1):
            row(i, obj, terms)
