"""Core data types: label spaces, sparse features, instances, parameters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class LabelSpace:
    """Ordered set of output labels; position in the tuple is the label index."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise DataError("a label space needs at least two labels")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("duplicate label names in label space")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "LabelSpace":
        return cls(tuple(str(n) for n in names))

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise DataError(f"unknown label {name!r}") from None

    def name(self, index: int) -> str:
        return self.labels[index]


class SparseFeatures:
    """Sparse feature vector with strictly increasing ids and finite values."""

    __slots__ = ("ids", "values")

    def __init__(self, ids, values):
        ids = np.asarray(ids, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if ids.ndim != 1 or values.ndim != 1 or ids.shape != values.shape:
            raise DataError("feature ids and values must be 1-d and aligned")
        if ids.size:
            if ids.min() < 0:
                raise DataError("negative feature id")
            if np.any(np.diff(ids) <= 0):
                raise DataError("feature ids must be strictly increasing")
            if not np.all(np.isfinite(values)):
                raise DataError("non-finite feature value")
        self.ids = ids
        self.values = values

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "SparseFeatures":
        """Build from (id, value) pairs; duplicate ids are summed."""
        acc: dict[int, float] = {}
        for fid, val in pairs:
            acc[int(fid)] = acc.get(int(fid), 0.0) + float(val)
        ids = sorted(acc)
        return cls(np.array(ids, dtype=np.int64),
                   np.array([acc[i] for i in ids], dtype=np.float64))

    @classmethod
    def empty(cls) -> "SparseFeatures":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    @property
    def nnz(self) -> int:
        return int(self.ids.size)

    def get(self, fid: int, default: float = 0.0) -> float:
        pos = np.searchsorted(self.ids, fid)
        if pos < self.ids.size and self.ids[pos] == fid:
            return float(self.values[pos])
        return default

    def pairs(self):
        return zip(self.ids.tolist(), self.values.tolist())

    def __eq__(self, other):
        if not isinstance(other, SparseFeatures):
            return NotImplemented
        return (np.array_equal(self.ids, other.ids)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        items = ", ".join(f"{i}:{v:g}" for i, v in self.pairs())
        return f"SparseFeatures({items})"


@dataclass
class Instance:
    """A single classification input, optionally with its gold label index."""

    features: SparseFeatures
    label: int | None = None


@dataclass
class SequenceInstance:
    """A token sequence; one sparse feature vector per position.

    ``labels`` is either None (fully unlabeled) or a full gold labeling.
    """

    positions: tuple[SparseFeatures, ...]
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.positions) < 1:
            raise DataError("sequence must have at least one position")
        if self.labels is not None and len(self.labels) != len(self.positions):
            raise DataError("label sequence length mismatch")

    def __len__(self) -> int:
        return len(self.positions)

    def packed(self):
        """All position features flattened into parallel arrays, cached.

        Returns (pos, ids, vals, indptr): position index, feature id and
        value per stored entry, plus CSR-style offsets so position t owns
        the slice [indptr[t], indptr[t+1]).  Score tables and expectation
        accumulators work off this instead of looping over positions.
        """
        cached = getattr(self, "_packed", None)
        if cached is None:
            counts = np.fromiter((f.nnz for f in self.positions),
                                 dtype=np.int64, count=len(self.positions))
            indptr = np.zeros(counts.size + 1, dtype=np.int64)
            np.cumsum(counts, out=indptr[1:])
            pos = np.repeat(np.arange(counts.size, dtype=np.int64), counts)
            if indptr[-1]:
                ids = np.concatenate([f.ids for f in self.positions if f.nnz])
                vals = np.concatenate(
                    [f.values for f in self.positions if f.nnz])
            else:
                ids = np.empty(0, dtype=np.int64)
                vals = np.empty(0)
            cached = (pos, ids, vals, indptr)
            self._packed = cached
        return cached

    def feature_groups(self):
        """Packed entries regrouped by feature id, cached.

        Returns (order, starts, unique_ids): a stable permutation of the
        packed entries sorted by id, segment start offsets under that
        order, and the distinct ids — one segment each.  Lets expectation
        accumulators segment-sum duplicates instead of scatter-adding.
        """
        cached = getattr(self, "_feature_groups", None)
        if cached is None:
            _, ids, _, _ = self.packed()
            order = np.argsort(ids, kind="stable")
            unique_ids, starts = np.unique(ids[order], return_index=True)
            cached = (order, starts, unique_ids)
            self._feature_groups = cached
        return cached

    def max_feature_id(self) -> int:
        """Largest feature id used anywhere in the sequence; -1 if none."""
        cached = getattr(self, "_max_id", None)
        if cached is None:
            _, ids, _, _ = self.packed()
            cached = int(ids.max()) if ids.size else -1
            self._max_id = cached
        return cached

    def feature_matrix(self, n_inputs: int):
        """(L, n_inputs) CSR matrix of the position features, cached.

        Long sequences over modest vocabularies hit this in score-table
        and expectation code; short ones stay on the packed-array routes.
        """
        cache = getattr(self, "_csr", None)
        if cache is None:
            cache = {}
            self._csr = cache
        mat = cache.get(n_inputs)
        if mat is None:
            import scipy.sparse as sp

            if self.max_feature_id() >= n_inputs:
                raise DataError("feature id out of range for layout")
            _, ids, vals, indptr = self.packed()
            mat = sp.csr_matrix((vals, ids, indptr),
                                shape=(len(self.positions), n_inputs))
            cache[n_inputs] = mat
        return mat


@dataclass(frozen=True)
class FeatureLayout:
    """Dense parameter indexing.

    Input feature j conjoined with label y sits at ``y * n_inputs + j``.
    Chain models append a K*K block of label-pair transition weights; the
    transition weight for (a -> b) sits at ``n_labels * n_inputs + a * K + b``.
    Transition features depend on the label pair only, never on the input.
    """

    n_inputs: int
    n_labels: int
    chain: bool

    def __post_init__(self):
        if self.n_inputs < 1 or self.n_labels < 2:
            raise DataError("layout needs n_inputs >= 1 and n_labels >= 2")

    @property
    def size(self) -> int:
        base = self.n_labels * self.n_inputs
        return base + (self.n_labels * self.n_labels if self.chain else 0)

    def node_index(self, label: int, fid: int) -> int:
        return label * self.n_inputs + fid

    @property
    def trans_offset(self) -> int:
        return self.n_labels * self.n_inputs

    def trans_index(self, prev: int, cur: int) -> int:
        if not self.chain:
            raise DataError("layout has no transition block")
        return self.trans_offset + prev * self.n_labels + cur


@dataclass
class ParamVector:
    """Dense weight vector plus the layout that interprets it."""

    weights: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.layout.size,):
            raise DataError(
                f"weight vector has shape {self.weights.shape}, "
                f"layout expects ({self.layout.size},)")

    @classmethod
    def zeros(cls, layout: FeatureLayout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.weights.copy(), self.layout)

    def node_matrix(self) -> np.ndarray:
        """(K, V) view of the per-label input-feature blocks."""
        K, V = self.layout.n_labels, self.layout.n_inputs
        return self.weights[: K * V].reshape(K, V)

    def trans_matrix(self) -> np.ndarray:
        """(K, K) view of the transition block (chain layouts only)."""
        K = self.layout.n_labels
        return self.weights[self.layout.trans_offset:].reshape(K, K)

    def check_finite(self):
        if not np.all(np.isfinite(self.weights)):
            raise DataError("non-finite parameter value")


def as_label_array(labels: Sequence[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 1:
        raise DataError("label sequence must be 1-d")
    return arr
