"""Exact Boltzmann distributions, Gibbs sampling and a reference RBM.

Probability tables are flat arrays over 2^k joint states; the state index is
sum_i z_i 2^i (unit 0 is the least significant bit).
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit, logsumexp

from .params import ConfigurationError

MAX_ENUMERABLE = 25


class IntractableError(ValueError):
    pass


class ZeroProbabilityEvidence(ValueError):
    pass


@dataclass
class BoltzmannTarget:
    """p*(z) proportional to exp(z^T W z / 2 + z^T b) over binary z."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float).ravel()
        n = self.b.size
        if self.W.shape != (n, n):
            raise ConfigurationError(f"W must be {n}x{n}, got {self.W.shape}")
        if not np.array_equal(self.W, self.W.T):
            raise ConfigurationError("W must be symmetric")
        if np.any(np.diag(self.W) != 0):
            raise ConfigurationError("W must have a zero diagonal")

    @property
    def n(self) -> int:
        return self.b.size

    @classmethod
    def random_beta(cls, n: int = 5, seed=None, a: float = 0.5) -> "BoltzmannTarget":
        """Weights and biases drawn from 2 [Beta(a, a) - 0.5]."""
        rng = np.random.default_rng(seed)
        b = 2.0 * (rng.beta(a, a, n) - 0.5)
        upper = np.triu(2.0 * (rng.beta(a, a, (n, n)) - 0.5), 1)
        return cls(upper + upper.T, b)

    def log_weight(self, states) -> np.ndarray:
        z = np.asarray(states, dtype=float)
        return 0.5 * np.einsum("si,ij,sj->s", z, self.W, z) + z @ self.b


def all_states(n: int) -> np.ndarray:
    idx = np.arange(2 ** n, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(np.uint8)


def enumerate_target(target: BoltzmannTarget) -> np.ndarray:
    """Exact p* over all 2^N states, normalized with log-sum-exp."""
    if target.n > MAX_ENUMERABLE:
        raise IntractableError(
            f"{target.n} units cannot be enumerated (limit {MAX_ENUMERABLE}); use gibbs_sample instead"
        )
    logw = target.log_weight(all_states(target.n))
    return np.exp(logw - logsumexp(logw))


def _as_grid(table: np.ndarray) -> tuple[np.ndarray, int]:
    table = np.asarray(table, dtype=float)
    n = int(round(np.log2(table.size)))
    if 2 ** n != table.size:
        raise ConfigurationError("table length must be a power of two")
    return table.reshape([2] * n, order="F"), n


def marginal(table, subset) -> np.ndarray:
    """Marginal table over ``subset`` (in the given order)."""
    grid, n = _as_grid(table)
    subset = list(subset)
    others = tuple(i for i in range(n) if i not in subset)
    reduced = grid.sum(axis=others) if others else grid
    kept = sorted(subset)
    reduced = np.transpose(reduced, [kept.index(i) for i in subset]) if subset else reduced
    return np.asarray(reduced).reshape(-1, order="F")


def conditional(table, evidence: dict) -> np.ndarray:
    """Renormalized table over the free units given ``evidence`` ({unit: 0/1})."""
    grid, n = _as_grid(table)
    if not evidence:
        return np.asarray(table, dtype=float).copy()
    index = []
    for i in range(n):
        if i in evidence:
            if evidence[i] not in (0, 1):
                raise ConfigurationError("evidence values must be 0 or 1")
            index.append(int(evidence[i]))
        else:
            index.append(slice(None))
    for i in evidence:
        if not 0 <= i < n:
            raise ConfigurationError(f"evidence refers to unknown unit {i}")
    sliced = np.asarray(grid[tuple(index)]).reshape(-1, order="F")
    mass = sliced.sum()
    if not mass > 0:
        raise ZeroProbabilityEvidence(f"evidence {evidence} has zero probability")
    return sliced / mass


def dkl(p, p_star) -> float:
    """Kullback-Leibler divergence sum p ln(p / p_star), with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(p_star, dtype=float)
    if p.shape != q.shape:
        raise ConfigurationError("tables differ in size")
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    return float(max(0.0, np.sum(p[support] * np.log(p[support] / q[support]))))


def moments(table) -> tuple[np.ndarray, np.ndarray]:
    """First moments <z_i> and the matrix of second moments <z_i z_j> of a table."""
    table = np.asarray(table, dtype=float)
    n = int(round(np.log2(table.size)))
    z = all_states(n).astype(float)
    return table @ z, (z * table[:, None]).T @ z


def write_table_csv(path, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state_index", "probability"])
        for k, p in enumerate(np.asarray(table, dtype=float).tolist()):
            writer.writerow([k, repr(p)])


def read_table_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = np.zeros(int(data[:, 0].max()) + 1)
    out[data[:, 0].astype(int)] = data[:, 1]
    return out


# -- Gibbs sampling ---------------------------------------------------------

@numba.njit(cache=True)
def _gibbs_kernel(W, b, z, n_sweeps, free, random_scan, per_update, out, seed):
    np.random.seed(seed)
    n = z.shape[0]
    free_idx = np.flatnonzero(free)
    m = free_idx.shape[0]
    row = 0
    for sweep in range(n_sweeps):
        for k in range(m):
            if random_scan:
                i = free_idx[np.random.randint(m)]
            else:
                i = free_idx[k]
            field = b[i]
            for j in range(n):
                field += W[i, j] * z[j]
            z[i] = 1 if np.random.random() < 1.0 / (1.0 + np.exp(-field)) else 0
            if per_update:
                out[row, :] = z
                row += 1
        if not per_update:
            out[row, :] = z
            row += 1
        if m == 0 and per_update:
            out[row, :] = z
            row += 1


def gibbs_sample(target: BoltzmannTarget, steps: int, seed=None, clamps: dict | None = None,
                 init=None, random_scan: bool = False, per_update: bool = False) -> np.ndarray:
    """Single-site Gibbs chain; one recorded state per sweep (or per update).

    Clamped units ({unit: value}) keep their value throughout.
    """
    if steps < 1:
        raise ConfigurationError("need at least one Gibbs step")
    rng = np.random.default_rng(seed)
    n = target.n
    z = rng.integers(0, 2, n).astype(np.float64) if init is None else np.asarray(init, dtype=np.float64).copy()
    free = np.ones(n, dtype=np.bool_)
    for i, v in (clamps or {}).items():
        z[i] = v
        free[i] = False
    n_free = int(free.sum())
    rows = steps * max(n_free, 1) if per_update else steps
    out = np.zeros((rows, n), dtype=np.uint8)
    _gibbs_kernel(target.W, target.b, z, steps, free, random_scan, per_update, out,
                  int(rng.integers(2 ** 31 - 1)))
    return out


# -- reference RBM ------------------------------------------------------------

RBM_MAGIC = b"RBMP"
RBM_VERSION = 1


@dataclass
class RBM:
    """Classification RBM: visible and label units both couple to the hidden layer.

    ``W`` has shape (n_visible + n_label, n_hidden); rows are visible units first.
    """

    W: np.ndarray
    b_visible: np.ndarray
    b_hidden: np.ndarray
    b_label: np.ndarray

    @property
    def n_visible(self) -> int:
        return self.b_visible.size

    @property
    def n_hidden(self) -> int:
        return self.b_hidden.size

    @property
    def n_label(self) -> int:
        return self.b_label.size

    @classmethod
    def initial(cls, n_visible, n_hidden, n_label, seed=None, data_mean=None, scale=0.01):
        rng = np.random.default_rng(seed)
        W = scale * rng.standard_normal((n_visible + n_label, n_hidden))
        if data_mean is not None:
            p = np.clip(np.asarray(data_mean, dtype=float), 1e-3, 1 - 1e-3)
            b_v = np.log(p / (1 - p))
        else:
            b_v = np.zeros(n_visible)
        return cls(W, b_v, np.zeros(n_hidden), np.zeros(n_label))

    def copy(self) -> "RBM":
        return RBM(self.W.copy(), self.b_visible.copy(), self.b_hidden.copy(), self.b_label.copy())

    def to_target(self) -> BoltzmannTarget:
        """Equivalent Boltzmann machine with unit order (visible, hidden, label)."""
        nv, nh, nl = self.n_visible, self.n_hidden, self.n_label
        n = nv + nh + nl
        W = np.zeros((n, n))
        W[:nv, nv:nv + nh] = self.W[:nv]
        W[nv + nh:, nv:nv + nh] = self.W[nv:]
        W = W + W.T
        return BoltzmannTarget(W, np.concatenate([self.b_visible, self.b_hidden, self.b_label]))

    @classmethod
    def from_target(cls, target: BoltzmannTarget, n_visible, n_hidden, n_label) -> "RBM":
        nv, nh = n_visible, n_hidden
        W = np.vstack([target.W[:nv, nv:nv + nh], target.W[nv + nh:, nv:nv + nh]])
        b = target.b
        return cls(W, b[:nv].copy(), b[nv:nv + nh].copy(), b[nv + nh:].copy())

    def hidden_prob(self, v, l):
        return expit(np.hstack([v, l]) @ self.W + self.b_hidden)

    def visible_prob(self, h):
        act = h @ self.W.T
        return expit(act[:, :self.n_visible] + self.b_visible), expit(act[:, self.n_visible:] + self.b_label)

    def gibbs(self, n_steps, v=None, l=None, clamp_visible=None, clamp_label=None, seed=None,
              n_chains=None):
        """Layer-wise block Gibbs: hidden | (visible, label), then (visible, label) | hidden.

        ``clamp_visible`` / ``clamp_label`` are boolean masks of clamped units
        whose values are taken from ``v`` / ``l``. Returns per-step arrays
        (visible, hidden, label) of shape (n_steps, chains, units).
        """
        rng = np.random.default_rng(seed)
        if v is None:
            v = rng.integers(0, 2, (n_chains or 1, self.n_visible))
        if l is None:
            l = rng.integers(0, 2, (np.shape(v)[0], self.n_label))
        v = np.array(v, dtype=float, ndmin=2)
        l = np.array(l, dtype=float, ndmin=2)
        cv = np.zeros(self.n_visible, bool) if clamp_visible is None else np.asarray(clamp_visible, bool)
        cl = np.zeros(self.n_label, bool) if clamp_label is None else np.asarray(clamp_label, bool)
        v0, l0 = v.copy(), l.copy()
        out_v = np.zeros((n_steps,) + v.shape, dtype=np.uint8)
        out_h = np.zeros((n_steps, v.shape[0], self.n_hidden), dtype=np.uint8)
        out_l = np.zeros((n_steps,) + l.shape, dtype=np.uint8)
        for t in range(n_steps):
            h = (rng.random((v.shape[0], self.n_hidden)) < self.hidden_prob(v, l)).astype(float)
            pv, pl = self.visible_prob(h)
            v = np.where(cv, v0, rng.random(pv.shape) < pv).astype(float)
            l = np.where(cl, l0, rng.random(pl.shape) < pl).astype(float)
            out_v[t], out_h[t], out_l[t] = v, h, l
        return out_v, out_h, out_l

    def classify_gibbs(self, images, n_steps: int = 200, burn_in: int = 20, seed=None):
        """Label = most active label unit while the visible layer is clamped."""
        images = np.asarray(images, dtype=float)
        clamp = np.ones(self.n_visible, bool)
        _, _, lab = self.gibbs(n_steps + burn_in, v=images, clamp_visible=clamp, seed=seed)
        activity = lab[burn_in:].mean(axis=0)
        return np.argmax(activity, axis=1), activity

    def classify_exact(self, images) -> np.ndarray:
        """argmax_k of the free energy with label k on and all others off."""
        images = np.asarray(images, dtype=float)
        scores = np.zeros((images.shape[0], self.n_label))
        for k in range(self.n_label):
            l = np.zeros((images.shape[0], self.n_label))
            l[:, k] = 1
            act = np.hstack([images, l]) @ self.W + self.b_hidden
            scores[:, k] = self.b_label[k] + np.logaddexp(0, act).sum(axis=1)
        return np.argmax(scores, axis=1)


def pretrain_rbm(data, labels, n_hidden: int = 60, n_label=None, epochs: int = 50,
                 learning_rate: float = 0.05, momentum: float = 0.6, per_class: int = 7,
                 weight_decay: float = 1e-4, cd_steps: int = 1, seed=None, init: RBM | None = None) -> RBM:
    """Contrastive-divergence training of a classification RBM.

    Minibatches hold ``per_class`` images of every class; labels enter as
    one-hot binary units.
    """
    data = np.asarray(data)
    if data.size and not np.isin(data, (0, 1)).all():
        raise ConfigurationError("RBM pre-training needs binary data")
    labels = np.asarray(labels, dtype=np.int64)
    n_label = int(labels.max()) + 1 if n_label is None else n_label
    rng = np.random.default_rng(seed)
    rbm = init.copy() if init is not None else RBM.initial(data.shape[1], n_hidden, n_label, rng,
                                                           data_mean=data.mean(axis=0))
    onehot = np.eye(n_label)[labels]
    by_class = [np.flatnonzero(labels == k) for k in range(n_label)]
    n_batches = max(1, int(np.ceil(data.shape[0] / (per_class * n_label))))
    vel_W = np.zeros_like(rbm.W)
    vel_bv = np.zeros_like(rbm.b_visible)
    vel_bh = np.zeros_like(rbm.b_hidden)
    vel_bl = np.zeros_like(rbm.b_label)
    for _ in range(epochs):
        perms = [rng.permutation(ix) for ix in by_class]
        for k in range(n_batches):
            idx = np.concatenate([
                p[np.arange(k * per_class, (k + 1) * per_class) % p.size] for p in perms if p.size
            ])
            v0 = data[idx].astype(float)
            l0 = onehot[idx]
            ph0 = rbm.hidden_prob(v0, l0)
            h = (rng.random(ph0.shape) < ph0).astype(float)
            for _ in range(cd_steps):
                pv, pl = rbm.visible_prob(h)
                v1 = (rng.random(pv.shape) < pv).astype(float)
                l1 = (rng.random(pl.shape) < pl).astype(float)
                ph1 = rbm.hidden_prob(v1, l1)
                h = (rng.random(ph1.shape) < ph1).astype(float)
            m = idx.size
            pos = np.hstack([v0, l0]).T @ ph0 / m
            neg = np.hstack([v1, l1]).T @ ph1 / m
            vel_W = momentum * vel_W + learning_rate * (pos - neg - weight_decay * rbm.W)
            vel_bv = momentum * vel_bv + learning_rate * (v0 - v1).mean(axis=0)
            vel_bh = momentum * vel_bh + learning_rate * (ph0 - ph1).mean(axis=0)
            vel_bl = momentum * vel_bl + learning_rate * (l0 - l1).mean(axis=0)
            rbm.W += vel_W
            rbm.b_visible += vel_bv
            rbm.b_hidden += vel_bh
            rbm.b_label += vel_bl
    return rbm


def write_rbm(path, rbm: RBM):
    """Little-endian record: magic, version, N_v, N_h, N_l, weights (row-major), biases."""
    with open(path, "wb") as fh:
        fh.write(RBM_MAGIC)
        fh.write(struct.pack("<4I", RBM_VERSION, rbm.n_visible, rbm.n_hidden, rbm.n_label))
        for arr in (rbm.W, rbm.b_visible, rbm.b_hidden, rbm.b_label):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_rbm(path) -> RBM:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RBM_MAGIC:
        raise ValueError(f"not an RBM record (magic {blob[:4]!r})")
    version, nv, nh, nl = struct.unpack_from("<4I", blob, 4)
    if version != RBM_VERSION:
        raise ValueError(f"unsupported RBM record version {version}")
    sizes = [(nv + nl) * nh, nv, nh, nl]
    expected = 20 + 8 * sum(sizes)
    if len(blob) != expected:
        raise ValueError(f"RBM record truncated: expected {expected} bytes, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8", offset=20)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return RBM(parts[0].reshape(nv + nl, nh).copy(), parts[1].copy(), parts[2].copy(), parts[3].copy())
