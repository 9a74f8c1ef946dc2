"""Encoding frame matrices: construction, fast application, and spectral diagnostics.

A frame here is a tall operator S (rows x n) used to build a redundant linear
representation of a dataset.  Structured kinds (steiner, haar, hadamard) keep a
compact representation and apply via sparse products or fast transforms; the
dense matrix is only ever formed on explicit request (export, small oracles).

All tight kinds are stored with the convention S^T S = beta * I.  Spectral
reports normalise subset Grams by 1/(eta*beta) so that a tight frame with all
blocks present has a flat unit spectrum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np
import scipy.sparse as sp

UNIT_EIG_TOL = 1e-8


class FrameError(ValueError):
    """Unsupported or inconsistent frame construction."""


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


# ---------------------------------------------------------------------------
# fast transforms

def fwht(x, axis: int = 0):
    """Orthonormal Walsh-Hadamard transform along `axis` (length must be 2**k)."""
    y = np.array(np.moveaxis(np.asarray(x, dtype=float), axis, 0), copy=True)
    n = y.shape[0]
    if not _is_pow2(n):
        raise FrameError(f"transform length {n} is not a power of two")
    tail = y.shape[1:]
    h = 1
    while h < n:
        y = y.reshape(n // (2 * h), 2, h, *tail)
        a = y[:, 0] + y[:, 1]
        b = y[:, 0] - y[:, 1]
        y = np.stack([a, b], axis=1)
        h *= 2
    y = y.reshape(n, *tail) / math.sqrt(n)
    return np.moveaxis(y, 0, axis)


def haar_transform(x, axis: int = 0):
    """Apply the orthonormal Haar wavelet matrix H_n (recursive pair sum/diff)."""
    y = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = y.shape[0]
    if not _is_pow2(n):
        raise FrameError(f"transform length {n} is not a power of two")
    return np.moveaxis(_haar(y), 0, axis)


def _haar(z):
    if z.shape[0] == 1:
        return z.copy()
    s = (z[0::2] + z[1::2]) / math.sqrt(2.0)
    d = (z[0::2] - z[1::2]) / math.sqrt(2.0)
    return np.concatenate([_haar(s), d], axis=0)


def haar_transform_t(x, axis: int = 0):
    """Apply H_n^T, the transpose of the Haar wavelet matrix."""
    y = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = y.shape[0]
    if not _is_pow2(n):
        raise FrameError(f"transform length {n} is not a power of two")
    return np.moveaxis(_haar_t(y), 0, axis)


def _haar_t(u):
    n = u.shape[0]
    if n == 1:
        return u.copy()
    half = n // 2
    s = _haar_t(u[:half])
    out = np.empty_like(u)
    out[0::2] = (s + u[half:]) / math.sqrt(2.0)
    out[1::2] = (s - u[half:]) / math.sqrt(2.0)
    return out


def sylvester_hadamard(v: int) -> np.ndarray:
    """Unnormalised +/-1 Hadamard matrix of power-of-two order."""
    if not _is_pow2(v):
        raise FrameError(f"no Sylvester Hadamard matrix of order {v}")
    h = np.array([[1.0]])
    while h.shape[0] < v:
        h = np.block([[h, h], [h, -h]])
    return h


# ---------------------------------------------------------------------------
# partition

@dataclass(frozen=True)
class RowBlockPartition:
    """Contiguous partition of frame rows into m worker blocks."""

    m: int
    offsets: tuple[int, ...]

    def __post_init__(self):
        if len(self.offsets) != self.m + 1 or self.offsets[0] != 0:
            raise FrameError("partition offsets must be 0-anchored with m+1 entries")
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise FrameError("every row block must be nonempty")

    @classmethod
    def equal(cls, rows: int, m: int) -> "RowBlockPartition":
        if m < 1 or rows % m != 0:
            raise FrameError(f"cannot split {rows} rows into {m} equal blocks")
        step = rows // m
        return cls(m, tuple(range(0, rows + 1, step)))

    def block_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    def block_size(self, i: int) -> int:
        return self.offsets[i + 1] - self.offsets[i]


# ---------------------------------------------------------------------------
# frame matrix

class FrameMatrix:
    """Tall encoding operator with structured storage and a row-block partition.

    Supported kinds: steiner, haar, hadamard, gaussian, identity, replication.
    Instances are immutable after construction and safe for concurrent reads.
    """

    def __init__(self, kind, n, rows, beta, m, seed, params, storage,
                 replica_groups=None, etf_rows=False):
        self.kind = kind
        self.n = int(n)
        self.rows = int(rows)
        self.beta = Fraction(beta)
        self.seed = seed
        self.params = dict(params)
        self.partition = RowBlockPartition.equal(rows, m)
        self.etf_rows = etf_rows
        self.replica_groups = replica_groups
        self._storage = storage
        self._grams = None
        if self.rows < self.n:
            raise FrameError("frame must have at least as many rows as columns")

    @property
    def m(self) -> int:
        return self.partition.m

    # -- application ------------------------------------------------------

    def apply(self, v):
        """S @ v for a vector or matrix with leading dimension n."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise FrameError(f"apply: expected leading dimension {self.n}, got {v.shape[0]}")
        return self._storage.apply(v)

    def apply_transpose(self, u):
        """S^T @ u for a vector or matrix with leading dimension rows."""
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.rows:
            raise FrameError(f"apply_transpose: expected leading dimension {self.rows}, got {u.shape[0]}")
        return self._storage.apply_t(u)

    def apply_block(self, i, v):
        """S_i @ v, the slice of the encoded image owned by worker i."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise FrameError(f"apply_block: expected leading dimension {self.n}, got {v.shape[0]}")
        return self._storage.apply_block(self.partition.block_slice(i), v)

    def apply_block_transpose(self, i, u):
        """S_i^T @ u for a block-sized input."""
        u = np.asarray(u, dtype=float)
        sl = self.partition.block_slice(i)
        if u.shape[0] != sl.stop - sl.start:
            raise FrameError("apply_block_transpose: block size mismatch")
        return self._storage.apply_block_t(sl, u, self.rows)

    def block_support(self, i) -> np.ndarray:
        """Indices of data coordinates touched by worker i's rows."""
        return self._storage.block_support(self.partition.block_slice(i), self.n)

    def block_sparse(self, i):
        """S_i as a sparse matrix if the storage is sparse, else None."""
        return self._storage.block_sparse(self.partition.block_slice(i))

    def dense(self) -> np.ndarray:
        """Materialise the full matrix (export and small oracles only)."""
        return self.apply(np.eye(self.n))

    def block_gram(self, i) -> np.ndarray:
        """S_i^T S_i as a dense n x n matrix."""
        b = self.apply_block(i, np.eye(self.n))
        return b.T @ b

    def _gram_stack(self) -> np.ndarray:
        if self._grams is None:
            g = np.stack([self.block_gram(i) for i in range(self.m)])
            g.setflags(write=False)
            self._grams = g
        return self._grams

    # -- serialisation ------------------------------------------------------

    def header(self) -> dict:
        return {
            "container": "frame",
            "version": 1,
            "kind": self.kind,
            "n": self.n,
            "rows": self.rows,
            "beta_num": self.beta.numerator,
            "beta_den": self.beta.denominator,
            "m": self.m,
            "seed": self.seed,
            "params": self.params,
        }

    def save(self, path):
        from .container import write_container
        write_container(path, self.header(), {})

    def __repr__(self):
        return (f"FrameMatrix(kind={self.kind!r}, shape=({self.rows}, {self.n}), "
                f"beta={self.beta}, m={self.m})")


# storage strategies ---------------------------------------------------------

class _SparseStorage:
    def __init__(self, mat: sp.csr_matrix):
        self.mat = mat
        self.mat_t = mat.T.tocsr()

    def apply(self, v):
        return self.mat @ v

    def apply_t(self, u):
        return self.mat_t @ u

    def apply_block(self, sl, v):
        return self.mat[sl] @ v

    def apply_block_t(self, sl, u, rows):
        return self.mat_t[:, sl] @ u

    def block_support(self, sl, n):
        block = self.mat[sl].tocoo()
        return np.unique(block.col)

    def block_sparse(self, sl):
        return self.mat[sl]


class _DenseStorage:
    def __init__(self, mat: np.ndarray):
        self.mat = mat

    def apply(self, v):
        return self.mat @ v

    def apply_t(self, u):
        return self.mat.T @ u

    def apply_block(self, sl, v):
        return self.mat[sl] @ v

    def apply_block_t(self, sl, u, rows):
        return self.mat[sl].T @ u

    def block_support(self, sl, n):
        return np.arange(n)

    def block_sparse(self, sl):
        return None


class _ScatterTransformStorage:
    """S = scale * T[:, positions]: scatter input into a length-N vector, transform."""

    def __init__(self, size, positions, scale, fwd, bwd):
        self.size = size
        self.positions = positions
        self.scale = scale
        self.fwd = fwd
        self.bwd = bwd

    def _embed(self, v):
        z = np.zeros((self.size,) + v.shape[1:])
        z[self.positions] = v
        return z

    def apply(self, v):
        return self.scale * self.fwd(self._embed(v))

    def apply_t(self, u):
        return self.scale * self.bwd(u)[self.positions]

    def apply_block(self, sl, v):
        return self.apply(v)[sl]

    def apply_block_t(self, sl, u, rows):
        z = np.zeros((rows,) + u.shape[1:])
        z[sl] = u
        return self.apply_t(z)

    def block_support(self, sl, n):
        return np.arange(n)

    def block_sparse(self, sl):
        return None


# ---------------------------------------------------------------------------
# constructions

def steiner_etf(v: int, seed: int = 0, m: int | None = None, split_blocks: int = 1) -> FrameMatrix:
    """Steiner equiangular tight frame from 2-element subsets of {1..v}.

    Shape v^2 x v(v-1)/2 with redundancy 2v/(v-1).  Each group of v rows comes
    from one row of the pair-incidence matrix, with its ones replaced by
    distinct (non-constant) Hadamard columns, scaled to unit row norm.
    `split_blocks=2` deals half-groups to workers instead of whole groups.
    """
    if not _is_pow2(v) or v < 4:
        raise FrameError(f"steiner construction needs a power-of-two order >= 4, got {v}")
    if split_blocks not in (1, 2):
        raise FrameError("split_blocks must be 1 or 2")
    n = v * (v - 1) // 2
    rows = v * v
    if m is None:
        m = v
    h = sylvester_hadamard(v)
    pair_col = {pair: c for c, pair in enumerate(combinations(range(v), 2))}

    data, ri, ci = [], [], []
    scale = 1.0 / math.sqrt(v - 1)
    for a in range(v):
        support = sorted(pair_col[tuple(sorted((a, b)))] for b in range(v) if b != a)
        for j, c in enumerate(support):
            col = h[:, j + 1] * scale  # skip the all-ones column
            data.append(col)
            ri.append(np.arange(a * v, (a + 1) * v))
            ci.append(np.full(v, c))
    mat = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
        shape=(rows, n),
    )

    if split_blocks == 2:
        units = 2 * v
        if units % m != 0:
            raise FrameError(f"cannot deal {units} half-blocks to {m} workers")
        step = v // 2
        order = np.concatenate([
            np.arange(u * step, (u + 1) * step)
            for j in range(m) for u in range(j, units, m)
        ])
        mat = mat[order]
    elif rows % m != 0:
        raise FrameError(f"worker count {m} must divide {rows} rows")

    return FrameMatrix(
        kind="steiner", n=n, rows=rows, beta=Fraction(2 * v, v - 1), m=m, seed=seed,
        params={"v": v, "split_blocks": split_blocks},
        storage=_SparseStorage(mat), etf_rows=True,
    )


def haar_subsampled(n: int, beta: int, seed: int = 0, m: int | None = None) -> FrameMatrix:
    """Column-subsampled Haar wavelet matrix, rescaled so S^T S = beta * I.

    `n` is the Haar order (power of two); the frame maps n/beta coordinates to
    n encoded rows.
    """
    if not _is_pow2(n):
        raise FrameError(f"haar order {n} is not a power of two")
    beta = int(beta)
    if beta < 1 or n % beta != 0:
        raise FrameError(f"redundancy {beta} must divide the order {n}")
    cols = n // beta
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    positions = np.sort(rng.choice(n, size=cols, replace=False))
    positions.setflags(write=False)
    if m is None:
        m = beta
    storage = _ScatterTransformStorage(
        size=n, positions=positions, scale=math.sqrt(beta),
        fwd=haar_transform_t, bwd=haar_transform,
    )
    return FrameMatrix(
        kind="haar", n=cols, rows=n, beta=Fraction(beta), m=m, seed=seed,
        params={"order": n, "beta": beta}, storage=storage,
    )


def hadamard_randomized(n: int, beta: int, seed: int = 0, m: int | None = None) -> FrameMatrix:
    """Zero-pad to beta*n seeded-random positions, then orthonormal WHT, times sqrt(beta)."""
    beta = int(beta)
    size = beta * n
    if not _is_pow2(size):
        raise FrameError(f"padded length {size} is not a power of two")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    positions = np.sort(rng.choice(size, size=n, replace=False))
    positions.setflags(write=False)
    if m is None:
        m = beta
    storage = _ScatterTransformStorage(
        size=size, positions=positions, scale=math.sqrt(beta),
        fwd=fwht, bwd=fwht,
    )
    return FrameMatrix(
        kind="hadamard", n=n, rows=size, beta=Fraction(beta), m=m, seed=seed,
        params={"beta": beta}, storage=storage,
    )


def gaussian_frame(n: int, beta: int, seed: int = 0, m: int | None = None) -> FrameMatrix:
    """Dense i.i.d. Gaussian frame with entries N(0, 1/n), so E[S^T S] = beta * I."""
    beta = int(beta)
    if beta < 1:
        raise FrameError("redundancy must be a positive integer")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    mat = rng.standard_normal((beta * n, n)) / math.sqrt(n)
    mat.setflags(write=False)
    if m is None:
        m = beta
    return FrameMatrix(
        kind="gaussian", n=n, rows=beta * n, beta=Fraction(beta), m=m, seed=seed,
        params={"beta": beta}, storage=_DenseStorage(mat),
    )


def identity_frame(n: int, m: int = 1) -> FrameMatrix:
    """The uncoded case: S = I_n."""
    return FrameMatrix(
        kind="identity", n=n, rows=n, beta=Fraction(1), m=m, seed=0,
        params={}, storage=_SparseStorage(sp.identity(n, format="csr")),
    )


def replication_frame(n: int, beta: int, m: int) -> FrameMatrix:
    """Row-duplicated identity: m/beta distinct partitions, each held by beta workers.

    Rows carry 1/sqrt(beta) so S^T S = I; the gather layer is expected to
    discard duplicate copies of a partition and rescale (see replica_groups).
    """
    beta = int(beta)
    if beta < 1 or m % beta != 0:
        raise FrameError(f"replication factor {beta} must divide the worker count {m}")
    groups = m // beta
    if n % groups != 0:
        raise FrameError(f"{groups} partitions must divide {n} data rows")
    slice_rows = n // groups
    blocks = []
    eye = sp.identity(n, format="csr") / math.sqrt(beta)
    for i in range(m):
        p = i % groups
        blocks.append(eye[p * slice_rows:(p + 1) * slice_rows])
    mat = sp.vstack(blocks, format="csr")
    return FrameMatrix(
        kind="replication", n=n, rows=m * slice_rows, beta=Fraction(beta), m=m, seed=0,
        params={"beta": beta}, storage=_SparseStorage(mat),
        replica_groups=tuple(i % groups for i in range(m)),
    )


def subsample_columns(frame: FrameMatrix, n_keep: int, seed: int = 0) -> FrameMatrix:
    """Keep a seeded-random subset of data columns (fits a frame to awkward sizes).

    Tightness S^T S = beta' I is preserved with beta' = rows / n_keep; rows are
    no longer unit-norm, so the result is not an ETF.
    """
    if not 1 <= n_keep <= frame.n:
        raise FrameError(f"cannot keep {n_keep} of {frame.n} columns")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1]))
    keep = np.sort(rng.choice(frame.n, size=n_keep, replace=False))
    st = frame._storage
    if isinstance(st, _SparseStorage):
        storage = _SparseStorage(st.mat[:, keep].tocsr())
    elif isinstance(st, _ScatterTransformStorage):
        positions = st.positions[keep].copy()
        positions.setflags(write=False)
        storage = _ScatterTransformStorage(st.size, positions, st.scale, st.fwd, st.bwd)
    else:
        mat = st.mat[:, keep].copy()
        mat.setflags(write=False)
        storage = _DenseStorage(mat)
    params = dict(frame.params)
    params["subsample"] = {"n_keep": n_keep, "seed": seed, "parent_n": frame.n}
    return FrameMatrix(
        kind=frame.kind, n=n_keep, rows=frame.rows, beta=Fraction(frame.rows, n_keep),
        m=frame.m, seed=frame.seed, params=params, storage=storage,
        replica_groups=frame.replica_groups, etf_rows=False,
    )


_BUILDERS = {
    "steiner": lambda p, seed, m: steiner_etf(p["v"], seed=seed, m=m, split_blocks=p.get("split_blocks", 1)),
    "haar": lambda p, seed, m: haar_subsampled(p["order"], p["beta"], seed=seed, m=m),
    "hadamard": lambda p, seed, m: hadamard_randomized(p["n"], p["beta"], seed=seed, m=m),
    "gaussian": lambda p, seed, m: gaussian_frame(p["n"], p["beta"], seed=seed, m=m),
    "identity": lambda p, seed, m: identity_frame(p["n"], m=m),
    "replication": lambda p, seed, m: replication_frame(p["n"], p["beta"], m=m),
}


def load_frame(path) -> FrameMatrix:
    """Rebuild a frame from its serialised parameters (structured kinds store no entries)."""
    from .container import read_container
    header, _ = read_container(path)
    if header.get("container") != "frame":
        raise FrameError(f"{path} is not a frame container")
    params = dict(header["params"])
    sub = params.pop("subsample", None)
    kind = header["kind"]
    base_n = sub["parent_n"] if sub else header["n"]
    if kind in ("hadamard", "gaussian", "identity", "replication"):
        params.setdefault("n", base_n)
    frame = _BUILDERS[kind](params, header["seed"], header["m"])
    if sub:
        frame = subsample_columns(frame, sub["n_keep"], seed=sub["seed"])
    return frame


# ---------------------------------------------------------------------------
# spectral diagnostics

@dataclass
class SpectrumReport:
    """Extreme subset-Gram eigenvalues over examined worker subsets.

    `epsilon` bounds the deviation of (1/(eta*beta)) S_A^T S_A from identity;
    `unit_eig_multiplicity` is the (min, max) per-subset count of eigenvalues
    of (1/beta) S_A^T S_A within 1e-8 of 1.
    """

    eta: float
    subsets_examined: int
    min_eig: float
    max_eig: float
    epsilon: float
    unit_eig_multiplicity: tuple[int, int]
    mode: str

    @property
    def certificate(self) -> bool:
        return self.mode == "exhaustive"

    def to_json(self) -> str:
        return json.dumps({
            "eta": self.eta,
            "epsilon": self.epsilon,
            "min_eig": self.min_eig,
            "max_eig": self.max_eig,
            "subsets": self.subsets_examined,
            "mode": self.mode,
            "unit_eig_multiplicity": list(self.unit_eig_multiplicity),
        }, indent=2)


def gram_eigs(frame: FrameMatrix, subset, eta: float | None = None) -> np.ndarray:
    """Ascending eigenvalues of (1/(eta*beta)) S_A^T S_A for a worker subset A."""
    subset = tuple(subset)
    if not subset:
        raise FrameError("subset must be nonempty")
    if eta is None:
        eta = len(subset) / frame.m
    grams = frame._gram_stack()
    g = grams[list(subset)].sum(axis=0)
    return np.linalg.eigvalsh(g / (eta * float(frame.beta)))


def estimate_restricted_isometry(frame: FrameMatrix, eta: float, mode: str = "exhaustive",
                                 trials: int = 200, seed: int = 0,
                                 exhaustive_limit: int = 10 ** 6) -> SpectrumReport:
    """Measure how far subset Grams stray from identity, over k-subsets with k = eta*m.

    Exhaustive mode enumerates every subset and is a certificate; sampled mode
    draws `trials` subsets uniformly without replacement per trial (seeded) and
    is only an estimate.
    """
    m = frame.m
    k = int(round(eta * m))
    if k < 1 or k > m or abs(k - eta * m) > 1e-9:
        raise FrameError(f"eta={eta} does not give an integer subset size for m={m}")
    beta = float(frame.beta)
    grams = frame._gram_stack()

    if mode == "exhaustive":
        total = math.comb(m, k)
        if total > exhaustive_limit:
            raise FrameError(
                f"exhaustive mode would examine {total} subsets (> {exhaustive_limit}); use sampled mode")
        subsets = combinations(range(m), k)
    elif mode == "sampled":
        def _draw():
            for trial in range(trials):
                rng = np.random.default_rng(np.random.SeedSequence([seed, trial]))
                yield tuple(np.sort(rng.choice(m, size=k, replace=False)))
        subsets = _draw()
    else:
        raise FrameError(f"unknown spectrum mode {mode!r}")

    lo, hi = math.inf, -math.inf
    mult_lo, mult_hi = None, None
    count = 0
    scale = 1.0 / (eta * beta)
    for subset in subsets:
        g = grams[list(subset)].sum(axis=0)
        eigs = np.linalg.eigvalsh(g * scale)
        lo = min(lo, eigs[0])
        hi = max(hi, eigs[-1])
        mult = int(np.sum(np.abs(eigs * eta - 1.0) <= UNIT_EIG_TOL))
        mult_lo = mult if mult_lo is None else min(mult_lo, mult)
        mult_hi = mult if mult_hi is None else max(mult_hi, mult)
        count += 1

    return SpectrumReport(
        eta=eta, subsets_examined=count, min_eig=float(lo), max_eig=float(hi),
        epsilon=max(1.0 - lo, hi - 1.0, 0.0),
        unit_eig_multiplicity=(mult_lo, mult_hi),
        mode=mode,
    )


# ---------------------------------------------------------------------------
# coherence

def welch_bound(n: int, beta) -> float:
    """Lower bound on the maximal coherence of a unit-norm frame of beta*n rows in R^n."""
    beta = Fraction(beta)
    if n * beta <= 1:
        raise FrameError("welch bound needs more than one frame vector")
    return math.sqrt(float((beta - 1) / (n * beta - 1)))


def max_coherence(frame: FrameMatrix, tile_entries: int = 10 ** 6) -> float:
    """Largest |<row_i, row_j>| over distinct rows, densified lazily in row tiles.

    Rows are normalised first when the frame is not unit-norm (e.g. after
    column subsampling); ETF kinds are checked against the stored scaling.
    """
    tile = max(1, tile_entries // max(frame.n, 1))
    tiles = []
    for start in range(0, frame.rows, tile):
        stop = min(start + tile, frame.rows)
        block = np.zeros((stop - start, frame.rows))
        block[np.arange(stop - start), np.arange(start, stop)] = 1.0
        tiles.append(frame.apply_transpose(block.T).T)
    norms = [np.linalg.norm(t, axis=1) for t in tiles]
    unit = all(np.allclose(nm, 1.0, atol=1e-10) for nm in norms)
    if frame.etf_rows and not unit:
        raise FrameError("ETF frame lost unit row norms")
    if not unit:
        tiles = [t / nm[:, None] for t, nm in zip(tiles, norms)]
    best = 0.0
    for i, a in enumerate(tiles):
        for j, b in enumerate(tiles):
            if j < i:
                continue
            prods = np.abs(a @ b.T)
            if i == j:
                np.fill_diagonal(prods, 0.0)
            best = max(best, float(prods.max()))
    return best
