"""Compressed scene state: Gaussian arrays plus two shared-row codebooks.

Every Gaussian stores its position and opacity logit privately and two
integer indices (g2sh, g2sr) into the SH and SR codebooks. Codebook rows
are reference counted; a row whose refcount drops to zero is returned to
a free list and may be reused by a later allocation.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

SR_DIM = 7  # 3 log-scales + 4 quaternion components


def sh_dim(degree: int) -> int:
    """Row width of the SH codebook for a given spherical-harmonics degree."""
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"sh_degree must be in 0..3, got {degree}")
    return 3 * (degree + 1) ** 2


def degree_from_dim(dim: int) -> int:
    for deg in (0, 1, 2, 3):
        if sh_dim(deg) == dim:
            return deg
    raise ValueError(f"SH codebook dim {dim} does not match any degree 0..3")


class Codebook:
    """Dense row store with refcounts, split-lineage parents and a free list.

    Rows are float32, shape (capacity, dim). Dead rows stay in place; the
    free list hands back the lowest dead index first so allocation order is
    deterministic.
    """

    def __init__(self, rows: np.ndarray):
        rows = np.ascontiguousarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValueError("codebook rows must be 2-D")
        self.rows = rows
        self.refcount = np.zeros(len(rows), dtype=np.int64)
        self.parent = np.full(len(rows), -1, dtype=np.int32)
        self._free: list[int] = []

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def capacity(self) -> int:
        return self.rows.shape[0]

    @property
    def live_count(self) -> int:
        return self.capacity - len(self._free)

    @property
    def free_set(self) -> set:
        return set(self._free)

    def is_live(self, r: int) -> bool:
        return 0 <= r < self.capacity and self.refcount[r] > 0

    def live_indices(self) -> np.ndarray:
        """Ascending indices of live rows."""
        return np.flatnonzero(self.refcount > 0)

    def row(self, r: int) -> np.ndarray:
        if not self.is_live(r):
            raise ValueError(f"codebook row {r} is not live")
        return self.rows[r].copy()

    def alloc(self, value: np.ndarray, parent: int = -1) -> int:
        """Allocate a row with refcount 1, reusing the lowest free slot."""
        value = np.asarray(value, dtype=np.float32)
        if value.shape != (self.dim,):
            raise ValueError(f"row value must have shape ({self.dim},)")
        if parent != -1 and not self.is_live(parent):
            raise ValueError(f"parent row {parent} is not live")
        if self._free:
            r = heapq.heappop(self._free)
            self.rows[r] = value
        else:
            r = self.capacity
            self.rows = np.concatenate([self.rows, value[None, :]], axis=0)
            self.refcount = np.concatenate([self.refcount, [0]])
            self.parent = np.concatenate([self.parent, [-1]]).astype(np.int32)
        self.refcount[r] = 1
        self.parent[r] = parent
        return r

    def incref(self, r: int) -> None:
        if not self.is_live(r):
            raise ValueError(f"cannot reference dead row {r}")
        self.refcount[r] += 1

    def decref(self, r: int) -> bool:
        """Drop one reference; returns True if the row was freed."""
        if not self.is_live(r):
            raise ValueError(f"cannot release dead row {r}")
        self.refcount[r] -= 1
        if self.refcount[r] == 0:
            self.parent[r] = -1
            # Lineage pointing at a freed row is stale: break it.
            self.parent[self.parent == r] = -1
            heapq.heappush(self._free, int(r))
            return True
        return False

    def lineage_pairs(self) -> np.ndarray:
        """(child, parent) index pairs where both rows are live, child-ascending."""
        children = np.flatnonzero((self.parent >= 0) & (self.refcount > 0))
        return np.stack([children, self.parent[children]], axis=1) if len(children) else np.zeros((0, 2), dtype=np.int64)


@dataclass
class GaussianArrays:
    """Per-Gaussian storage; all arrays share length N."""

    positions: np.ndarray       # (N, 3) float32, world units
    opacity_logits: np.ndarray  # (N,) float32; opacity = sigmoid(logit)
    g2sh: np.ndarray            # (N,) int32 row indices into the SH codebook
    g2sr: np.ndarray            # (N,) int32 row indices into the SR codebook

    @property
    def count(self) -> int:
        return len(self.positions)

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))


@dataclass
class ModelState:
    """Full compressed scene: Gaussian arrays plus SH and SR codebooks."""

    gaussians: GaussianArrays
    sh: Codebook
    sr: Codebook
    iteration: int = 0
    rng_seed: int = 0

    @property
    def num_gaussians(self) -> int:
        return self.gaussians.count

    @property
    def sh_degree(self) -> int:
        return degree_from_dim(self.sh.dim)


def init_one_to_one(n: int, sh_degree: int, seed: int,
                    position_box: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> ModelState:
    """Random state with one private codebook row per Gaussian.

    Positions are uniform in `position_box`; opacity logits start at 0
    (opacity 0.5); SH rows have uniform DC terms in [-0.5, 0.5] and zero
    higher orders; SR rows start isotropic at 1% of the box diagonal with
    identity rotation.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    dim = sh_dim(sh_degree)

    lo = np.asarray(position_box[0], dtype=np.float64)
    hi = np.asarray(position_box[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ValueError("position_box must be ((x0,y0,z0), (x1,y1,z1)) with hi > lo")

    rng = np.random.default_rng(seed)
    positions = rng.uniform(lo, hi, size=(n, 3)).astype(np.float32)
    logits = np.zeros(n, dtype=np.float32)

    sh_rows = np.zeros((n, dim), dtype=np.float32)
    sh_rows[:, 0:3] = rng.uniform(-0.5, 0.5, size=(n, 3)).astype(np.float32)

    diag = float(np.linalg.norm(hi - lo))
    sr_rows = np.zeros((n, SR_DIM), dtype=np.float32)
    sr_rows[:, 0:3] = np.log(0.01 * diag)
    sr_rows[:, 3] = 1.0  # identity quaternion (w, x, y, z)

    sh = Codebook(sh_rows)
    sr = Codebook(sr_rows)
    sh.refcount[:] = 1
    sr.refcount[:] = 1

    arrays = GaussianArrays(
        positions=positions,
        opacity_logits=logits,
        g2sh=np.arange(n, dtype=np.int32),
        g2sr=np.arange(n, dtype=np.int32),
    )
    return ModelState(gaussians=arrays, sh=sh, sr=sr, iteration=0, rng_seed=seed)


def lookup(state: ModelState, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Codebook rows (sh_row, sr_row) backing Gaussian i."""
    if not 0 <= i < state.num_gaussians:
        raise ValueError(f"gaussian index {i} out of range for N={state.num_gaussians}")
    return (state.sh.row(int(state.gaussians.g2sh[i])),
            state.sr.row(int(state.gaussians.g2sr[i])))


def remap_gaussian(state: ModelState, i: int, which: str, new_row: int) -> None:
    """Point Gaussian i at a different live row of the named codebook.

    The old row loses a reference and is freed if that was the last one.
    """
    if not 0 <= i < state.num_gaussians:
        raise ValueError(f"gaussian index {i} out of range for N={state.num_gaussians}")
    book, index_arr = _book_of(state, which)
    old = int(index_arr[i])
    if new_row == old:
        return
    if not book.is_live(new_row):
        raise ValueError(f"target row {new_row} is not live")
    book.incref(new_row)
    index_arr[i] = new_row
    book.decref(old)


def _book_of(state: ModelState, which: str) -> tuple[Codebook, np.ndarray]:
    if which == "sh":
        return state.sh, state.gaussians.g2sh
    if which == "sr":
        return state.sr, state.gaussians.g2sr
    raise ValueError(f"codebook name must be 'sh' or 'sr', got {which!r}")


def densify(state: ModelState, growth_rate: float, cap: int,
            rng: np.random.Generator, jitter_sigma: float = 0.02) -> int:
    """Clone Gaussians sampled proportional to opacity; clones share rows.

    Adds k = min(floor(growth_rate * N), cap - N) Gaussians. Each clone
    copies the source position plus isotropic normal jitter and the source
    opacity logit, and increments the refcounts of the shared rows.
    Returns the number added.
    """
    if growth_rate <= 0:
        raise ValueError("growth_rate must be positive")
    g = state.gaussians
    n = g.count
    if cap < n:
        raise ValueError(f"cap {cap} is below current count {n}")
    k = min(int(growth_rate * n), cap - n)
    if k <= 0:
        return 0

    opac = g.opacities()
    probs = opac / opac.sum()
    src = rng.choice(n, size=k, replace=True, p=probs)
    jitter = rng.normal(0.0, jitter_sigma, size=(k, 3))

    g.positions = np.concatenate(
        [g.positions, (g.positions[src].astype(np.float64) + jitter).astype(np.float32)])
    g.opacity_logits = np.concatenate([g.opacity_logits, g.opacity_logits[src]])
    g.g2sh = np.concatenate([g.g2sh, g.g2sh[src]])
    g.g2sr = np.concatenate([g.g2sr, g.g2sr[src]])

    np.add.at(state.sh.refcount, g.g2sh[n:], 1)
    np.add.at(state.sr.refcount, g.g2sr[n:], 1)
    return k


def model_bytes(state: ModelState) -> tuple[int, int, float]:
    """(compressed_bytes, dense_equivalent_bytes, ratio) for the current state.

    Accounting assumes float32 parameters and 32-bit indices: per Gaussian
    12 B position + 4 B opacity + 2*4 B indices, plus the live codebook rows;
    the dense equivalent stores every Gaussian's full parameter vector.
    """
    n = state.num_gaussians
    if n == 0:
        return 0, 0, 1.0
    dim = state.sh.dim
    compressed = n * (3 * 4 + 4 + 4 + 4) + state.sh.live_count * dim * 4 + state.sr.live_count * SR_DIM * 4
    dense = n * (3 + 1 + dim + SR_DIM) * 4
    return compressed, dense, dense / compressed


def validate_state(state: ModelState) -> None:
    """Check every structural invariant; raises ValueError on the first hit."""
    g = state.gaussians
    n = g.count
    for name, arr in (("opacity_logits", g.opacity_logits), ("g2sh", g.g2sh), ("g2sr", g.g2sr)):
        if len(arr) != n:
            raise ValueError(f"{name} has length {len(arr)}, expected {n}")
    for which, book, idx in (("sh", state.sh, g.g2sh), ("sr", state.sr, g.g2sr)):
        if n and (idx.min() < 0 or idx.max() >= book.capacity):
            raise ValueError(f"{which} index out of range")
        counted = np.bincount(idx, minlength=book.capacity).astype(np.int64)
        if not np.array_equal(counted, book.refcount):
            raise ValueError(f"{which} refcounts disagree with the index arrays")
        free = book.free_set
        if free != set(np.flatnonzero(book.refcount == 0).tolist()):
            raise ValueError(f"{which} free list disagrees with zero refcounts")
        live_parents = book.parent[book.refcount > 0]
        referenced = live_parents[live_parents >= 0]
        if len(referenced) and np.any(book.refcount[referenced] == 0):
            raise ValueError(f"{which} has a live row whose parent is dead")
        # Parent chains must terminate (acyclic).
        for start in np.flatnonzero((book.parent >= 0) & (book.refcount > 0)):
            seen = set()
            r = int(start)
            while r != -1:
                if r in seen:
                    raise ValueError(f"{which} parent chain starting at {start} cycles")
                seen.add(r)
                r = int(book.parent[r])
    if int(state.sh.refcount.sum()) != n or int(state.sr.refcount.sum()) != n:
        raise ValueError("total refcounts do not equal the Gaussian count")
