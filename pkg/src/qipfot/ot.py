"""Entropic optimal transport between labeled scalar clouds.

The solver family is layered: plain Sinkhorn scaling, a class (group-lasso)
regularized variant solved by majorization-minimization, and a graph-Laplacian
regularized variant solved by generalized conditional gradient.  Each layer
short-circuits to the one below when its regularization weight is zero, so the
reductions are bitwise.

Sinkhorn runs as diagonal scaling against the Gibbs kernel for speed, with
log-domain absorption whenever the scaling vectors threaten overflow and a pure
log-sum-exp fallback for pathological cases, so small epsilon is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionMismatchError, UnknownLabelError

GROUP_SMOOTHING = 1e-12       # delta inside the majorization weight
ABSORB_LIMIT = 1e100          # scaling magnitude that triggers absorption
MAX_ABSORPTIONS = 200
SCALED_PATH_MIN_SIZE = 4096   # below this many plan entries, log-domain only
INNER_ITER_CAP = 200          # per-pass budget inside the outer loops (warm-started)
MAX_STEP_HALVINGS = 30


@dataclass(frozen=True)
class OtConfig:
    """Solver settings.

    epsilon assumes costs normalized to [0, 1] (see cost_matrix); lam is the
    graph-Laplacian strength (0 disables that layer), eta the class strength.
    """

    epsilon: float = 0.01
    eta: float = 0.1
    lam: float = 0.0
    max_sinkhorn_iters: int = 1000
    outer_iters: int = 10
    marginal_tol: float = 1e-9
    knn: int = 5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.eta < 0 or self.lam < 0:
            raise ValueError("regularization strengths must be >= 0")
        if self.marginal_tol <= 0:
            raise ValueError("marginal_tol must be > 0")
        if self.max_sinkhorn_iters < 1 or self.outer_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.knn < 1:
            raise ValueError("knn must be >= 1")


@dataclass(frozen=True)
class LabeledCloud:
    """Scalar feature samples tagged with moment-index class labels."""

    features: np.ndarray   # N x 1
    labels: np.ndarray     # N ints
    weights: np.ndarray    # N, positive, sums to 1

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.ndim != 2 or feats.shape[1] != 1:
            raise DimensionMismatchError(f"features must be N x 1, got {feats.shape}")
        labels = np.asarray(self.labels, dtype=int)
        weights = np.asarray(self.weights, dtype=float)
        n = feats.shape[0]
        if labels.shape != (n,) or weights.shape != (n,):
            raise DimensionMismatchError("features, labels and weights must share length")
        if not np.all(weights > 0):
            raise ValueError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, features, labels) -> "LabeledCloud":
        feats = np.asarray(features, dtype=float)
        n = feats.shape[0]
        return cls(features=feats, labels=labels, weights=np.full(n, 1.0 / n))


@dataclass
class CouplingMatrix:
    plan: np.ndarray
    row_marginal_err: float
    col_marginal_err: float
    converged: bool
    n_iters: int
    objective_trace: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class MomentCoupling:
    """Class-aggregated plan: mass[k, l] = total mass from source class k to target class l."""

    mass: np.ndarray
    orders: tuple[int, ...]


def cost_matrix(src: LabeledCloud, tgt: LabeledCloud) -> np.ndarray:
    """Squared scalar distance, max-normalized into [0, 1] (zero matrix stays zero)."""
    diff = src.features[:, 0][:, None] - tgt.features[:, 0][None, :]
    cost = diff * diff
    top = cost.max()
    if top > 0:
        cost = cost / top
    return cost


def _marginal_errors(plan, mu, nu):
    row = float(np.abs(plan.sum(axis=1) - mu).max())
    col = float(np.abs(plan.sum(axis=0) - nu).max())
    return row, col


def _sinkhorn_log(C, mu, nu, eps, tol, max_iters, fe, ge):
    """Log-domain reference iteration.  fe, ge are potentials divided by eps."""
    Mc = -C / eps
    log_mu = np.log(mu)
    log_nu = np.log(nu)
    it = 0
    while it < max_iters:
        it += 1
        fe = log_mu - logsumexp(Mc + ge[None, :], axis=1)
        ge = log_nu - logsumexp(Mc + fe[:, None], axis=0)
        plan = np.exp(Mc + fe[:, None] + ge[None, :])
        row_err, col_err = _marginal_errors(plan, mu, nu)
        if row_err <= tol and col_err <= tol:
            break
    plan = np.exp(Mc + fe[:, None] + ge[None, :])
    row_err, col_err = _marginal_errors(plan, mu, nu)
    return plan, fe, ge, it, row_err, col_err


def _sinkhorn_scaled(C, mu, nu, eps, tol, max_iters, fe, ge):
    """Diagonal-scaling iteration with absorption; falls back to log-domain."""
    Mc = -C / eps
    log_mu = np.log(mu)

    def rebuild_rows(ge_cur):
        # recenter fe so every kernel row sums to exactly mu (no dead rows)
        fe_new = log_mu - logsumexp(Mc + ge_cur[None, :], axis=1)
        return fe_new, np.exp(Mc + fe_new[:, None] + ge_cur[None, :])

    fe, K = rebuild_rows(ge)
    n, m = C.shape
    u = np.ones(n)
    v = np.ones(m)
    Kv = K @ v
    it = 0
    absorptions = 0
    row_err = col_err = np.inf
    while it < max_iters:
        if absorptions > MAX_ABSORPTIONS:
            plan, fe2, ge2, extra, row_err, col_err = _sinkhorn_log(
                C, mu, nu, eps, tol, max_iters - it, fe + np.log(u), ge + np.log(v)
            )
            return plan, fe2, ge2, it + extra, row_err, col_err
        if not np.all(Kv > 0) or not np.all(np.isfinite(Kv)):
            # dead rows: absorb finite scalings and recenter
            ge = ge + np.log(v)
            fe, K = rebuild_rows(ge)
            u = np.ones(n)
            v = np.ones(m)
            Kv = K @ v
            absorptions += 1
            continue
        it += 1
        u = mu / Kv
        Ktu = K.T @ u
        if not np.all(Ktu > 0) or not np.all(np.isfinite(Ktu)):
            # dead or overflowed columns: fold v in, recenter rows, restart scalings
            ge = ge + np.log(v)
            fe, K = rebuild_rows(ge)
            u = np.ones(n)
            v = np.ones(m)
            Kv = K @ v
            absorptions += 1
            continue
        v = nu / Ktu
        Kv = K @ v
        row_err = float(np.abs(u * Kv - mu).max())
        col_err = float(np.abs(v * Ktu - nu).max())
        if row_err <= tol and col_err <= tol:
            break
        if max(u.max(), v.max()) > ABSORB_LIMIT or min(u.min(), v.min()) < 1.0 / ABSORB_LIMIT:
            fe = fe + np.log(u)
            ge = ge + np.log(v)
            K = np.exp(Mc + fe[:, None] + ge[None, :])
            u = np.ones(n)
            v = np.ones(m)
            Kv = K @ v
            absorptions += 1
    plan = (u[:, None] * K) * v[None, :]
    row_err, col_err = _marginal_errors(plan, mu, nu)
    return plan, fe + np.log(u), ge + np.log(v), it, row_err, col_err


def sinkhorn(cost, mu, nu, config: OtConfig, _potentials=None) -> CouplingMatrix:
    """Entropic OT plan between weight vectors mu and nu under the given cost.

    Stops when both marginal sup-errors reach config.marginal_tol or the
    iteration budget runs out; a non-converged plan is still returned with its
    achieved errors (converged=False).
    """
    C = np.asarray(cost, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if C.ndim != 2 or C.shape != (mu.shape[0], nu.shape[0]):
        raise DimensionMismatchError(
            f"cost shape {C.shape} does not match weights ({mu.shape[0]}, {nu.shape[0]})"
        )
    if not np.all(np.isfinite(C)) or C.min() < 0:
        raise ValueError("cost matrix must be finite and nonnegative")
    eps = config.epsilon
    if _potentials is None:
        fe = np.zeros(mu.shape[0])
        ge = np.zeros(nu.shape[0])
    else:
        fe, ge = _potentials
    if C.size <= SCALED_PATH_MIN_SIZE:
        plan, fe, ge, iters, row_err, col_err = _sinkhorn_log(
            C, mu, nu, eps, config.marginal_tol, config.max_sinkhorn_iters, fe, ge
        )
    else:
        plan, fe, ge, iters, row_err, col_err = _sinkhorn_scaled(
            C, mu, nu, eps, config.marginal_tol, config.max_sinkhorn_iters, fe, ge
        )
    result = CouplingMatrix(
        plan=plan,
        row_marginal_err=row_err,
        col_marginal_err=col_err,
        converged=row_err <= config.marginal_tol and col_err <= config.marginal_tol,
        n_iters=iters,
    )
    result._potentials = (fe, ge)  # warm-start handle for the outer loops
    return result


def _class_indices(labels: np.ndarray):
    classes = np.unique(labels)
    return [(c, np.flatnonzero(labels == c)) for c in classes]


def _group_weight_matrix(plan, class_idx, shape):
    """Majorization weight: W[i, j] = 0.5 (||plan[class(i), j]||_2 + delta)^(-1/2)."""
    W = np.empty(shape)
    for _, idx in class_idx:
        norms = np.sqrt(np.einsum("ij,ij->j", plan[idx], plan[idx]))
        W[idx] = 0.5 / np.sqrt(norms + GROUP_SMOOTHING)
    return W


def group_lasso_ot(cost, src: LabeledCloud, tgt: LabeledCloud, config: OtConfig) -> CouplingMatrix:
    """Sinkhorn with a class-purity penalty on source moment labels.

    Majorization-minimization: each outer pass reruns Sinkhorn on the cost
    shifted by eta * W, where W reweights cells against splitting a target
    point across several source classes.  eta = 0 is exactly plain sinkhorn.

    Inner passes are warm-started and capped at INNER_ITER_CAP iterations each;
    the returned marginal errors are the ones actually achieved.
    """
    mu = src.weights
    nu = tgt.weights
    if config.eta == 0:
        return sinkhorn(cost, mu, nu, config)
    C = np.asarray(cost, dtype=float)
    inner = replace(config, max_sinkhorn_iters=min(config.max_sinkhorn_iters, INNER_ITER_CAP))
    class_idx = _class_indices(src.labels)
    W = np.zeros(C.shape)
    potentials = None
    result = None
    for _ in range(config.outer_iters):
        result = sinkhorn(C + config.eta * W, mu, nu, inner, _potentials=potentials)
        potentials = result._potentials
        W = _group_weight_matrix(result.plan, class_idx, C.shape)
    return result


def _knn_graph(features: np.ndarray, knn: int) -> np.ndarray:
    """Symmetric binary k-nearest-neighbor graph on scalar features.

    Ties resolve by sample index (stable sort), so the graph is deterministic.
    """
    f = features[:, 0]
    n = f.shape[0]
    k = min(knn, n - 1)
    S = np.zeros((n, n))
    if k <= 0:
        return S
    dist = np.abs(f[:, None] - f[None, :])
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    rows = np.repeat(np.arange(n), k)
    S[rows, order[:, :k].ravel()] = 1.0
    return np.maximum(S, S.T)


def _entropy_term(plan):
    return float(np.where(plan > 0, plan * (np.log(np.where(plan > 0, plan, 1.0)) - 1.0), 0.0).sum())


def _group_penalty(plan, class_idx):
    total = 0.0
    for _, idx in class_idx:
        norms = np.sqrt(np.einsum("ij,ij->j", plan[idx], plan[idx]))
        total += float(np.sqrt(norms + GROUP_SMOOTHING).sum())
    return total


def laplacian_reg_ot(cost, src: LabeledCloud, tgt: LabeledCloud, config: OtConfig) -> CouplingMatrix:
    """Adds a structure-preserving penalty on the source barycentric map.

    Objective: <plan, C> + eps H(plan) + eta * group penalty
    + lam * sum_{i,i'} S_{ii'} (T_i - T_{i'})^2, with S the knn graph on source
    features and T_i the barycentric image of source point i.  Solved by
    generalized conditional gradient: the quadratic term is linearized at the
    current plan, the subproblem is one Sinkhorn solve, and iterates mix with
    step 2/(t+2).  lam = 0 is exactly group_lasso_ot.
    """
    if config.lam == 0:
        return group_lasso_ot(cost, src, tgt, config)
    C = np.asarray(cost, dtype=float)
    mu = src.weights
    nu = tgt.weights
    F = tgt.features[:, 0]
    S = _knn_graph(src.features, config.knn)
    L = np.diag(S.sum(axis=1)) - S
    class_idx = _class_indices(src.labels)

    def laplacian_term(plan):
        T = (plan @ F) / mu
        return float(2.0 * T @ (L @ T))

    def objective(plan):
        val = float((plan * C).sum()) + config.epsilon * _entropy_term(plan)
        if config.eta > 0:
            val += config.eta * _group_penalty(plan, class_idx)
        return val + config.lam * laplacian_term(plan)

    plan = np.outer(mu, nu)
    trace = [objective(plan)]
    potentials = None
    sub = None
    all_converged = True
    total_iters = 0
    for t in range(config.outer_iters):
        T = (plan @ F) / mu
        grad_lap = (4.0 * (L @ T) / mu)[:, None] * F[None, :]
        lin = C + config.lam * grad_lap
        if config.eta > 0:
            lin = lin + config.eta * _group_weight_matrix(plan, class_idx, C.shape)
        low = lin.min()
        if low < 0:
            # constant shifts leave the plan unchanged; keep the subproblem cost nonneg
            lin = lin - low
        sub = sinkhorn(lin, mu, nu, config, _potentials=potentials)
        potentials = sub._potentials
        all_converged = all_converged and sub.converged
        total_iters += sub.n_iters
        step = 2.0 / (t + 2.0)
        plan = (1.0 - step) * plan + step * sub.plan
        trace.append(objective(plan))
    row_err, col_err = _marginal_errors(plan, mu, nu)
    tol = config.marginal_tol
    return CouplingMatrix(
        plan=plan,
        row_marginal_err=row_err,
        col_marginal_err=col_err,
        converged=all_converged and row_err <= tol and col_err <= tol,
        n_iters=total_iters,
        objective_trace=trace,
    )


def aggregate_by_class(coupling: CouplingMatrix, src_labels, tgt_labels, orders) -> MomentCoupling:
    """Sum plan mass over (source class, target class) blocks."""
    plan = coupling.plan
    src_labels = np.asarray(src_labels, dtype=int)
    tgt_labels = np.asarray(tgt_labels, dtype=int)
    if src_labels.shape[0] != plan.shape[0] or tgt_labels.shape[0] != plan.shape[1]:
        raise DimensionMismatchError("label vectors must match plan dimensions")
    orders = tuple(int(k) for k in orders)
    index = {k: i for i, k in enumerate(orders)}
    for lab in np.unique(src_labels):
        if int(lab) not in index:
            raise UnknownLabelError(f"source label {lab} not in orders {orders}")
    for lab in np.unique(tgt_labels):
        if int(lab) not in index:
            raise UnknownLabelError(f"target label {lab} not in orders {orders}")
    m = len(orders)
    Zs = np.zeros((plan.shape[0], m))
    Zs[np.arange(plan.shape[0]), [index[int(l)] for l in src_labels]] = 1.0
    Zt = np.zeros((plan.shape[1], m))
    Zt[np.arange(plan.shape[1]), [index[int(l)] for l in tgt_labels]] = 1.0
    mass = Zs.T @ plan @ Zt
    return MomentCoupling(mass=mass, orders=orders)
