"""Constrained MMSE filter design for multi-branch decision-feedback receivers.

Each detection branch applies, per stream j, a feedforward filter ``w`` on the
received vector and a feedback filter ``f`` on already-made symbol decisions,

    z_j = w^H r - f^H s_dec.

The feedback taps are restricted by a 0/1 shape matrix ``S`` through the
constraint ``S f = 0``: ones in S mark taps forced to zero.  Different
branches use different tap patterns (permutations of a successive-cancellation
template, or a parallel-cancellation template), producing distinct candidate
decisions that a detector can choose among.

The design solves, per (stream, branch),

    min E|s_j - w^H r + f^H s_hat|^2   s.t.   S f = 0,

with the feedback magnitude throttled by a scalar ``beta`` in [0, 1]
(0 = pure linear MMSE, 1 = full decision feedback).  Three equivalent routes
are provided: an alternating (coupled) update sharing a single covariance
inverse across all streams and branches, an exact closed form used as the
oracle, and a channel-matrix shortcut valid under the ideal-decision model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sysmodel import ChannelRealization

__all__ = [
    "ShapeConstraint",
    "BranchSpec",
    "SecondOrderStats",
    "FilterBank",
    "projection_matrix",
    "sic_shapes",
    "permuted_shapes",
    "pic_shapes",
    "make_branch",
    "perfect_feedback_stats",
    "design_statistical",
    "design_closed_form",
    "design_perfect_feedback",
    "mse_objective",
    "mmse_value",
    "mmse_linear",
    "branch_mmse",
    "immse_metric",
]

# relative cutoff for pseudo-inverses of shape-matrix Grams
PINV_RTOL = 1e-12
# condition number beyond which a "numerical" design input is rejected
COND_LIMIT = 1e14


# ---------------------------------------------------------------------------
# Shape constraints and projections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeConstraint:
    """0/1 matrix marking feedback taps forced to zero for one stream.

    The active constraint is ``matrix @ f == 0``; a diagonal one at (k, k)
    removes tap k from the feedback path of stream ``stream``.
    """

    matrix: np.ndarray
    stream: int
    branch: int = 0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("shape-constraint matrix must be square")
        if m.size and not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("shape-constraint entries must be 0 or 1")
        # the projection formula below only annihilates S for symmetric
        # patterns; every supported tap pattern (diagonal or a permutation
        # conjugate of one) is symmetric, so reject anything else up front
        if not np.array_equal(m, m.T):
            raise ValueError("shape-constraint matrix must be symmetric")
        object.__setattr__(self, "matrix", m)


def projection_matrix(shape) -> np.ndarray:
    """Projector onto the feasible tap set {f : S f = 0}.

    Computed as ``I - S^H (S^H S)^+ S`` with a pseudo-inverse so singular
    Grams (the common case for 0/1 patterns) are handled uniformly.  The
    result is Hermitian and idempotent.
    """
    s = shape.matrix if isinstance(shape, ShapeConstraint) else np.asarray(shape, float)
    gram = s.conj().T @ s
    return np.eye(s.shape[1]) - s.conj().T @ np.linalg.pinv(gram, rcond=PINV_RTOL) @ s


def _sic_template(n_t: int, stream: int) -> np.ndarray:
    # Natural-order template for stream j (0-based): the last j diagonal
    # slots are forced off; the pattern depth grows with the stream index.
    s = np.zeros((n_t, n_t))
    for k in range(n_t - stream, n_t):
        s[k, k] = 1.0
    return s


def sic_shapes(n_t: int, own_rule: bool = True) -> list[ShapeConstraint]:
    """Successive-cancellation tap patterns for the natural detection order.

    ``own_rule=True`` (default) additionally forces each stream's own tap so
    a decision can never cancel the stream it belongs to; ``False`` keeps the
    raw block template.
    """
    if n_t < 1:
        raise ValueError("n_t must be at least 1")
    shapes = []
    for j in range(n_t):
        s = _sic_template(n_t, j)
        if own_rule:
            s[j, j] = 1.0
        shapes.append(ShapeConstraint(s, j, 0))
    return shapes


def permuted_shapes(
    n_t: int, perm, branch: int = 0, own_rule: bool = True
) -> list[ShapeConstraint]:
    """Tap patterns for a branch that detects streams in the order ``perm``.

    The natural-order templates are conjugated by the permutation matrix of
    ``perm`` (``P^T S P``), which re-targets each template at the streams
    occupying the corresponding detection slots of this branch.
    """
    perm = np.asarray(perm, dtype=int)
    if sorted(perm.tolist()) != list(range(n_t)):
        raise ValueError(f"perm must be a permutation of 0..{n_t - 1}, got {perm}")
    p = np.zeros((n_t, n_t))
    p[np.arange(n_t), perm] = 1.0
    shapes = []
    for j in range(n_t):
        s = p.T @ _sic_template(n_t, j) @ p
        if own_rule:
            s[j, j] = 1.0
        shapes.append(ShapeConstraint(s, j, branch))
    return shapes


def pic_shapes(n_t: int, branch: int = 0) -> list[ShapeConstraint]:
    """Parallel-cancellation tap patterns: ``S_j = I - diag(e_j)``.

    The own-tap rule is deliberately not applied here -- it would turn S into
    the identity and disable feedback entirely.
    """
    if n_t < 1:
        raise ValueError("n_t must be at least 1")
    shapes = []
    for j in range(n_t):
        s = np.eye(n_t)
        s[j, j] = 0.0
        shapes.append(ShapeConstraint(s, j, branch))
    return shapes


@dataclass
class BranchSpec:
    """One detection branch: an ordering plus per-stream tap constraints.

    Attributes:
        index: branch number l.
        ordering: detection order; ``ordering[q]`` is the stream detected at
            step q.
        shapes: per-stream ShapeConstraint, indexed by natural stream index.
        projections: (n_t, n_t, n_t) stack; ``projections[j]`` maps stream
            j's feedback filter into its feasible set.
        beta: feedback-magnitude knob in [0, 1].
        gamma: bookkeeping-only norm-scaling companion of beta (no closed
            form relates the two except the endpoints, so beta is the knob).
    """

    index: int
    ordering: np.ndarray
    shapes: list
    projections: np.ndarray
    beta: float
    gamma: float | None = None

    def __post_init__(self):
        self.ordering = np.asarray(self.ordering, dtype=int)
        n = len(self.shapes)
        if sorted(self.ordering.tolist()) != list(range(n)):
            raise ValueError("branch ordering must be a permutation of the streams")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def n_streams(self) -> int:
        return len(self.shapes)


def make_branch(
    n_t: int,
    ordering,
    beta: float,
    index: int = 0,
    pattern: str = "sic",
    own_rule: bool = True,
) -> BranchSpec:
    """Assemble a branch with successive (default) or parallel tap patterns.

    In the successive pattern the stream detected at step q keeps feedback
    taps only on the streams decided at steps before q: its own tap and all
    later streams are forced off, so cancellation follows this branch's
    detection order.  (Equivalently: the block templates of
    :func:`sic_shapes`, conjugated onto this branch's ordering and paired
    with the detection steps from last to first — the template with the
    largest forced block belongs to the first-detected stream.)  The
    parallel pattern instead frees every tap except the stream's own and is
    ordering-independent.
    """
    ordering = np.asarray(ordering, dtype=int)
    if pattern == "sic":
        if sorted(ordering.tolist()) != list(range(n_t)):
            raise ValueError(
                f"ordering must be a permutation of 0..{n_t - 1}, got {ordering}"
            )
        shapes: list = [None] * n_t
        for step, stream in enumerate(ordering):
            s = np.zeros((n_t, n_t))
            later = ordering[step + 1 :]
            s[later, later] = 1.0
            if own_rule:
                s[stream, stream] = 1.0
            shapes[stream] = ShapeConstraint(s, int(stream), index)
    elif pattern == "pic":
        shapes = pic_shapes(n_t, index)
    else:
        raise ValueError(f"unknown tap pattern {pattern!r} (use 'sic' or 'pic')")
    proj = np.stack([projection_matrix(s) for s in shapes])
    return BranchSpec(index, ordering, shapes, proj, float(beta))


# ---------------------------------------------------------------------------
# Second-order statistics
# ---------------------------------------------------------------------------

@dataclass
class SecondOrderStats:
    """Second-order quantities consumed by the filter design.

    Attributes:
        r_cov: (n_rx, n_rx) input covariance E[r r^H].
        cross: (n_rx, n_tx) cross-correlation E[r s_dec^H] with the fed-back
            decision vector.
        p_mat: (n_rx, n_tx); column j is E[r s_j^*].
        t_mat: (n_tx, n_tx); column j is E[s_dec s_j^*] (zero under the
            model that the feedback vector never contains the stream being
            detected).
        sigma_s2, sigma_n2: symbol and noise powers.
    """

    r_cov: np.ndarray
    cross: np.ndarray
    p_mat: np.ndarray
    t_mat: np.ndarray
    sigma_s2: float = 1.0
    sigma_n2: float = 0.0

    @property
    def n_rx(self) -> int:
        return self.r_cov.shape[0]

    @property
    def n_tx(self) -> int:
        return self.cross.shape[1]


def perfect_feedback_stats(
    channel: ChannelRealization, sigma_s2: float = 1.0
) -> SecondOrderStats:
    """Exact statistics under ideal decisions: R = sigma_s2 H H^H + sigma_n2 I,
    cross = sigma_s2 H, p_j = sigma_s2 H e_j, t_j = 0."""
    h = np.asarray(channel.gains, dtype=complex)
    n_rx, n_tx = h.shape
    r = sigma_s2 * (h @ h.conj().T) + channel.noise_variance * np.eye(n_rx)
    q = sigma_s2 * h
    return SecondOrderStats(
        r, q, q.copy(), np.zeros((n_tx, n_tx)), sigma_s2, channel.noise_variance
    )


@dataclass
class FilterBank:
    """Feedforward/feedback filters for every (branch, stream) pair.

    ``w[l, j]`` is the length-n_rx feedforward filter and ``f[l, j]`` the
    length-n_tx feedback filter of stream j on branch l.
    """

    w: np.ndarray
    f: np.ndarray
    branches: list

    @property
    def n_branches(self) -> int:
        return self.w.shape[0]

    @property
    def n_streams(self) -> int:
        return self.w.shape[1]

    def entry(self, j: int, l: int = 0):
        return self.w[l, j], self.f[l, j]


# ---------------------------------------------------------------------------
# Design routes
# ---------------------------------------------------------------------------

def _as_branch_list(branches):
    return [branches] if isinstance(branches, BranchSpec) else list(branches)


def _checked_inverse(mat: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise np.linalg.LinAlgError(
            f"{what} is numerically singular (condition number {cond:.3e})"
        )
    return np.linalg.inv(mat)


def design_statistical(
    stats: SecondOrderStats,
    branches,
    iterations: int = 2,
    tol: float | None = None,
    max_iterations: int = 500,
    r_inv: np.ndarray | None = None,
) -> FilterBank:
    """Coupled (alternating) design sharing one covariance inverse.

    Starting from f = 0, alternates

        w <- R^{-1} (p_j + Q f)
        f <- (beta / sigma_s2) * Proj (Q^H w - t_j)

    for ``iterations`` sweeps (default two).  Passing ``tol`` switches to
    fixed-point mode: the alternation runs until the feedback update moves by
    less than ``tol`` relatively, up to ``max_iterations`` sweeps, which
    recovers the exact closed-form pair.  The single R^{-1} is computed once
    (or supplied) and reused for every stream and branch.
    """
    branch_list = _as_branch_list(branches)
    if r_inv is None:
        r_inv = _checked_inverse(stats.r_cov, "input covariance")
    q = stats.cross
    n_tx = stats.n_tx
    w = np.zeros((len(branch_list), n_tx, stats.n_rx), dtype=complex)
    f = np.zeros((len(branch_list), n_tx, n_tx), dtype=complex)
    n_sweeps = max_iterations if tol is not None else iterations
    for li, br in enumerate(branch_list):
        for j in range(n_tx):
            pj = stats.p_mat[:, j]
            tj = stats.t_mat[:, j]
            proj = br.projections[j]
            fj = np.zeros(n_tx, dtype=complex)
            wj = r_inv @ pj
            for _ in range(n_sweeps):
                wj = r_inv @ (pj + q @ fj)
                f_new = (br.beta / stats.sigma_s2) * (proj @ (q.conj().T @ wj - tj))
                step = np.linalg.norm(f_new - fj)
                fj = f_new
                if tol is not None and step <= tol * max(np.linalg.norm(fj), 1.0):
                    wj = r_inv @ (pj + q @ fj)
                    break
            w[li, j] = wj
            f[li, j] = fj
    return FilterBank(w, f, branch_list)


def design_closed_form(stats: SecondOrderStats, branches) -> FilterBank:
    """Exact joint solution of the coupled equations (the design oracle).

    Per (stream, branch):

        w = (R - (beta/sigma_s2) Q Proj Q^H)^{-1} (p_j - (beta/sigma_s2) Q Proj t_j)
        f = (beta / sigma_s2) * Proj (Q^H w - t_j)

    One matrix inversion per (stream, branch) pair, so this is the slow
    reference route.
    """
    branch_list = _as_branch_list(branches)
    q = stats.cross
    n_tx = stats.n_tx
    w = np.zeros((len(branch_list), n_tx, stats.n_rx), dtype=complex)
    f = np.zeros((len(branch_list), n_tx, n_tx), dtype=complex)
    for li, br in enumerate(branch_list):
        scale = br.beta / stats.sigma_s2
        for j in range(n_tx):
            proj = br.projections[j]
            core = stats.r_cov - scale * (q @ proj @ q.conj().T)
            cond = np.linalg.cond(core)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise np.linalg.LinAlgError(
                    f"feedback-reduced covariance is numerically singular "
                    f"(condition number {cond:.3e})"
                )
            pj = stats.p_mat[:, j]
            tj = stats.t_mat[:, j]
            wj = np.linalg.solve(core, pj - scale * (q @ (proj @ tj)))
            w[li, j] = wj
            f[li, j] = scale * (proj @ (q.conj().T @ wj - tj))
    return FilterBank(w, f, branch_list)


def design_perfect_feedback(
    channel: ChannelRealization,
    branches,
    sigma_s2: float = 1.0,
    iterations: int = 2,
    tol: float | None = None,
    max_iterations: int = 500,
) -> FilterBank:
    """Channel-matrix shortcut of the coupled design under ideal decisions.

    Alternates

        w <- (H H^H + (sigma_n2/sigma_s2) I)^{-1} H (e_j + f)
        f <- beta * Proj H^H w

    from f = 0, matching :func:`design_statistical` fed with the
    perfect-feedback statistics sweep for sweep.  The ridge term keeps the
    inverse well defined whenever the noise power is positive.
    """
    branch_list = _as_branch_list(branches)
    h = np.asarray(channel.gains, dtype=complex)
    n_rx, n_tx = h.shape
    a = h @ h.conj().T + (channel.noise_variance / sigma_s2) * np.eye(n_rx)
    a_inv = _checked_inverse(a, "regularized channel Gram matrix")
    w = np.zeros((len(branch_list), n_tx, n_rx), dtype=complex)
    f = np.zeros((len(branch_list), n_tx, n_tx), dtype=complex)
    n_sweeps = max_iterations if tol is not None else iterations
    eye = np.eye(n_tx)
    for li, br in enumerate(branch_list):
        for j in range(n_tx):
            proj = br.projections[j]
            fj = np.zeros(n_tx, dtype=complex)
            wj = a_inv @ (h @ eye[j])
            for _ in range(n_sweeps):
                wj = a_inv @ (h @ (eye[j] + fj))
                f_new = br.beta * (proj @ (h.conj().T @ wj))
                step = np.linalg.norm(f_new - fj)
                fj = f_new
                if tol is not None and step <= tol * max(np.linalg.norm(fj), 1.0):
                    wj = a_inv @ (h @ (eye[j] + fj))
                    break
            w[li, j] = wj
            f[li, j] = fj
    return FilterBank(w, f, branch_list)


def design_soft_feedback(
    channel: ChannelRealization,
    branches,
    fed_power,
    sigma_s2: float = 1.0,
) -> FilterBank:
    """Exact filter pairs when the feedback symbols are only partly reliable.

    ``fed_power[t]`` is the mean squared magnitude of the feedback estimate
    for stream t (0 = uninformative, full symbol power = confident
    decisions).  After cancellation a fed-back stream then leaves a residual
    power of ``sigma_s2 - beta (2 - beta) fed_power[t]`` (floored at zero),
    and the feedforward filter is the exact MMSE solution against those
    residuals:

        w = sigma_s2 (H D H^H + sigma_n2 I)^{-1} h_j
        f = beta * m o (H^H w)

    where D carries the per-stream residual powers (full power off the
    feedback support) and m is the branch's 0/1 tap-support mask.  With
    ``fed_power = sigma_s2`` and beta = 1 this reproduces the converged
    ideal-decision design; with ``fed_power = 0`` the feedforward filter
    collapses to plain linear MMSE and the feedback taps only remove a zero
    mean.  Used by the iterative receiver, which re-derives the bank each
    pass from the measured reliability of the decoder feedback.
    """
    branch_list = _as_branch_list(branches)
    h = np.asarray(channel.gains, dtype=complex)
    n_rx, n_tx = h.shape
    rho = np.broadcast_to(np.asarray(fed_power, dtype=float), (n_tx,)).copy()
    if np.any(rho < 0.0):
        raise ValueError("fed_power entries must be nonnegative")
    w = np.zeros((len(branch_list), n_tx, n_rx), dtype=complex)
    f = np.zeros((len(branch_list), n_tx, n_tx), dtype=complex)
    eye = np.eye(n_rx)
    for li, br in enumerate(branch_list):
        cancel = br.beta * (2.0 - br.beta)
        for j in range(n_tx):
            mask = np.real(np.diagonal(br.projections[j])) > 0.5
            d = np.full(n_tx, sigma_s2)
            d[mask] = np.clip(sigma_s2 - cancel * rho[mask], 0.0, None)
            core = (h * d) @ h.conj().T + channel.noise_variance * eye
            cond = np.linalg.cond(core)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise np.linalg.LinAlgError(
                    f"residual-interference covariance is numerically singular "
                    f"(condition number {cond:.3e})"
                )
            wj = sigma_s2 * np.linalg.solve(core, h[:, j])
            w[li, j] = wj
            f[li, j] = br.beta * mask * (h.conj().T @ wj)
    return FilterBank(w, f, branch_list)


# ---------------------------------------------------------------------------
# Error measures
# ---------------------------------------------------------------------------

def mse_objective(w, f, stats: SecondOrderStats, j: int) -> float:
    """Mean squared error of an arbitrary filter pair for stream j.

    Full quadratic form, valid away from the optimum (used to verify that the
    designed filters actually minimize it over the feasible set).
    """
    pj = stats.p_mat[:, j]
    tj = stats.t_mat[:, j]
    val = (
        stats.sigma_s2
        - 2.0 * np.real(np.vdot(w, pj))
        + np.real(np.vdot(w, stats.r_cov @ w))
        - 2.0 * np.real(np.vdot(w, stats.cross @ f))
        + 2.0 * np.real(np.vdot(f, tj))
        + stats.sigma_s2 * np.real(np.vdot(f, f))
    )
    return float(val)


def mmse_value(w, f, stats: SecondOrderStats, j: int) -> float:
    """Residual MMSE of a designed pair.

    Collapsed form ``sigma_s2 - w^H R w + t_j^H f + f^H t_j + sigma_s2 f^H f``;
    it equals :func:`mse_objective` when w is MMSE-consistent with f.
    """
    tj = stats.t_mat[:, j]
    return float(
        stats.sigma_s2
        - np.real(np.vdot(w, stats.r_cov @ w))
        + 2.0 * np.real(np.vdot(tj, f))
        + stats.sigma_s2 * np.real(np.vdot(f, f))
    )


def mmse_linear(stats: SecondOrderStats, r_inv: np.ndarray | None = None) -> np.ndarray:
    """Per-stream MMSE of the plain linear receiver, sigma_s2 - p_j^H R^{-1} p_j."""
    if r_inv is None:
        r_inv = _checked_inverse(stats.r_cov, "input covariance")
    quad = np.real(np.sum(stats.p_mat.conj() * (r_inv @ stats.p_mat), axis=0))
    return stats.sigma_s2 - quad


def branch_mmse(stats: SecondOrderStats, branch: BranchSpec) -> np.ndarray:
    """Per-stream residual MMSE of one branch's exact (closed-form) filters."""
    bank = design_closed_form(stats, branch)
    return np.array(
        [mmse_value(bank.w[0, j], bank.f[0, j], stats, j) for j in range(stats.n_tx)]
    )


def immse_metric(s_hat, w, f, r, s_dec, mode: str = "full", energy=None) -> float:
    """Per-vector selection metric for one candidate decision.

    ``full`` is the complete instantaneous squared error
    ``|s_hat - (w^H r - f^H s_dec)|^2``.  ``reduced`` plugs the rank-one
    sample estimates into the collapsed MMSE expression:
    ``|s_hat|^2 - |w^H r|^2 + |f^H s_dec|^2``.
    ``energy`` overrides the leading ``|s_hat|^2`` term with a constant (for
    constant-modulus constellations the two coincide).
    """
    z_ff = np.vdot(w, r)
    z_fb = np.vdot(f, s_dec)
    lead = float(energy) if energy is not None else abs(s_hat) ** 2
    if mode == "reduced":
        return float(lead - abs(z_ff) ** 2 + abs(z_fb) ** 2)
    if mode == "full":
        return float(abs(s_hat - (z_ff - z_fb)) ** 2)
    raise ValueError(f"unknown metric mode {mode!r} (use 'reduced' or 'full')")
