"""Datasets, reproducible randomness streams, usage ledgers, chain traces.

Index convention: datapoints are addressed 0..n-1 throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "RngStream",
    "Dataset",
    "UsageLedger",
    "ChainTrace",
    "uniform",
    "ledger_record",
    "first_cover_step",
]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (maps uint64 -> uint64)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by a Philox bit generator, so identical keys give identical
    draw sequences regardless of platform, thread count or backend.
    Child streams are derived by mixing indices into ``stream_id``, which
    yields statistically independent Philox keys by design.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen: Optional[np.random.Generator] = None

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, *indices: int) -> "RngStream":
        """Derive an independent stream by folding indices into the id."""
        sid = self.stream_id
        for ix in indices:
            sid = _splitmix64(sid ^ _splitmix64((int(ix) + 1) & _MASK64))
        return RngStream(self.seed, sid)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of the stream."""
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def _lazy(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = self.generator()
        return self._gen

    def uniform(self) -> float:
        """Next uniform [0,1) draw of this stream."""
        return float(self._lazy().random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._lazy().random(int(n))

    def reset(self) -> None:
        self._gen = None


def uniform(stream: RngStream) -> float:
    """Draw the next uniform [0,1) variate from ``stream``."""
    return stream.uniform()


def parallel_map(fn, count: int, threads: int = 1) -> list:
    """Map fn over range(count), optionally on worker threads.

    Results are merged in index order and each job must derive its own
    stream, so the output is identical for every thread count.
    """
    if threads <= 1:
        return [fn(i) for i in range(count)]
    import concurrent.futures as cf

    with cf.ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, range(count)))


@dataclass(frozen=True)
class Dataset:
    """Covariate matrix plus response vector with generation metadata.

    covariates has shape (n, d); responses has shape (n,).  Responses are
    stored as float64 even for count families; family-specific integrality
    is validated by the model layer.
    """

    covariates: np.ndarray
    responses: np.ndarray
    true_param: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.covariates, dtype=np.float64))
        if X.ndim != 2:
            raise ValueError(f"covariates must be 2-d, got shape {X.shape}")
        y = np.ascontiguousarray(np.asarray(self.responses, dtype=np.float64))
        if y.shape != (X.shape[0],):
            raise ValueError(f"responses shape {y.shape} does not match {X.shape[0]} rows")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "responses", y)
        if self.true_param is not None:
            b0 = np.asarray(self.true_param, dtype=np.float64)
            if b0.shape != (X.shape[1],):
                raise ValueError("true_param length must equal the covariate dimension")
            object.__setattr__(self, "true_param", b0)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def replace_covariates(self, X: np.ndarray) -> "Dataset":
        return Dataset(X, self.responses, self.true_param, dict(self.meta))

    def replace_responses(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.covariates, y, self.true_param, dict(self.meta))


class UsageLedger:
    """Per-step record of which datapoint indices a kernel used.

    ``step_sets[t]`` is the sorted index set S_t used at step t;
    ``access_count`` counts accesses with multiplicity across steps;
    ``cumulative_sizes[t]`` is |union of S_1..S_{t+1}|.  Long fused runs
    may carry only the size summaries (``step_sets is None``).
    """

    def __init__(self, n: int):
        self.n = int(n)
        self.step_sets: Optional[list[np.ndarray]] = []
        self.access_count = 0
        self._seen = np.zeros(self.n, dtype=bool)
        self.sizes: list[int] = []
        self.cumulative_sizes: list[int] = []
        self._cum = 0

    def record(self, indices: Iterable[int]) -> None:
        idx = np.unique(np.asarray(list(indices), dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n):
            raise IndexError(f"ledger indices out of range [0, {self.n})")
        if self.step_sets is not None:
            self.step_sets.append(idx)
        self.access_count += int(idx.size)
        self.sizes.append(int(idx.size))
        if idx.size:
            fresh = ~self._seen[idx]
            self._cum += int(fresh.sum())
            self._seen[idx] = True
        self.cumulative_sizes.append(self._cum)

    @property
    def cumulative(self) -> np.ndarray:
        """Sorted union of all step sets recorded so far."""
        return np.flatnonzero(self._seen)

    @property
    def steps(self) -> int:
        return len(self.sizes)

    def first_cover_step(self, threshold: int) -> Optional[int]:
        """Smallest 1-based step s with |union of S_1..S_s| >= threshold."""
        if threshold > self.n:
            raise ValueError("threshold exceeds the number of datapoints")
        if threshold <= 0:
            return 0
        hits = np.searchsorted(np.asarray(self.cumulative_sizes), threshold)
        if hits >= len(self.cumulative_sizes):
            return None
        return int(hits) + 1

    @classmethod
    def from_batches(
        cls, n: int, batches: np.ndarray | Sequence[np.ndarray], keep_sets: bool = True
    ) -> "UsageLedger":
        """Build from a (steps, k) index array or a sequence of index sets."""
        led = cls(n)
        arr = np.asarray(batches) if not isinstance(batches, np.ndarray) else batches
        if isinstance(arr, np.ndarray) and arr.ndim == 2 and arr.dtype.kind == "i":
            steps, k = arr.shape
            if steps and (arr.min() < 0 or arr.max() >= n):
                raise IndexError(f"ledger indices out of range [0, {n})")
            if keep_sets:
                led.step_sets = [np.unique(arr[t]) for t in range(steps)]
                led.sizes = [s.size for s in led.step_sets]
            else:
                led.step_sets = None
                srt = np.sort(arr, axis=1)
                led.sizes = (1 + (np.diff(srt, axis=1) != 0).sum(axis=1)).astype(int).tolist()
            led.access_count = int(sum(led.sizes))
            # cumulative sizes from the step of first appearance of each index
            vals, first_pos = np.unique(arr.ravel(), return_index=True)
            counts = np.bincount(first_pos // k, minlength=max(steps, 1))
            led.cumulative_sizes = np.cumsum(counts[:steps]).astype(int).tolist()
            led._cum = led.cumulative_sizes[-1] if led.cumulative_sizes else 0
            led._seen[vals] = True
            return led
        for b in batches:
            led.record(b)
        return led

    @classmethod
    def full_usage(cls, n: int, steps: int) -> "UsageLedger":
        """Ledger of a kernel that uses every datapoint at every step."""
        led = cls(n)
        led.step_sets = None
        led.sizes = [n] * steps
        led.access_count = n * steps
        led.cumulative_sizes = [n] * steps
        led._cum = n if steps else 0
        led._seen[:] = steps > 0
        return led

    @classmethod
    def from_sizes(
        cls, n: int, sizes: np.ndarray, cumulative_sizes: np.ndarray
    ) -> "UsageLedger":
        led = cls(n)
        led.step_sets = None
        led.sizes = [int(v) for v in sizes]
        led.cumulative_sizes = [int(v) for v in cumulative_sizes]
        led.access_count = int(np.sum(sizes))
        led._cum = led.cumulative_sizes[-1] if led.cumulative_sizes else 0
        return led


def ledger_record(ledger: UsageLedger, indices: Iterable[int]) -> UsageLedger:
    """Append one step's index set to the ledger (mutates and returns it)."""
    ledger.record(indices)
    return ledger


def first_cover_step(ledger: UsageLedger, threshold: int) -> Optional[int]:
    return ledger.first_cover_step(threshold)


@dataclass
class ChainTrace:
    """States, acceptance flags and the usage ledger of one chain run."""

    states: np.ndarray  # (steps+1, dim)
    accept_flags: np.ndarray  # (steps,), bool
    ledger: UsageLedger
    aux_final: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.states.shape[0] != self.accept_flags.shape[0] + 1:
            raise ValueError("states must have one more row than accept_flags")
        if self.ledger.steps != self.accept_flags.shape[0]:
            raise ValueError("ledger step count must match accept_flags")

    @property
    def steps(self) -> int:
        return self.accept_flags.shape[0]

    def to_csv(self, path, manifest_hash: Optional[str] = None) -> None:
        """Write columns step, theta_*, accepted, used_size, cumulative_size."""
        dim = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            if manifest_hash is not None:
                fh.write(f"# manifest_hash={manifest_hash}\n")
            w = csv.writer(fh)
            w.writerow(
                ["step"]
                + [f"theta_{j}" for j in range(dim)]
                + ["accepted", "used_size", "cumulative_size"]
            )
            w.writerow([0] + [repr(float(v)) for v in self.states[0]] + [1, 0, 0])
            for t in range(self.steps):
                w.writerow(
                    [t + 1]
                    + [repr(float(v)) for v in self.states[t + 1]]
                    + [
                        int(self.accept_flags[t]),
                        int(self.ledger.sizes[t]),
                        int(self.ledger.cumulative_sizes[t]),
                    ]
                )
