"""
Structural nilpotence degree (SND) of unit triangular feedback matrices.

The support of L - I is read as the adjacency matrix of a dependency DAG
(edge i -> j when entry i is rounded with feedback from entry j); the SND is
one more than the length of the longest path in that DAG.
"""
import logging
from dataclasses import dataclass

import networkx as nx
import numpy as np

from kronround.errors import ShapeMismatch

logger = logging.getLogger(__name__)

# Entries of L - I with magnitude at or below this are structural zeros
STRUCTURAL_ZERO = 1e-14


@dataclass(frozen=True)
class SupportPattern:
    """Strictly lower triangular boolean support of L - I"""
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise ShapeMismatch(f"support pattern must be square, got shape {mask.shape}")
        if np.any(np.triu(mask)):
            raise ValueError("support pattern must be strictly lower triangular")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, 'mask', mask)

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    @classmethod
    def empty(cls, n: int) -> "SupportPattern":
        return cls(np.zeros((n, n), dtype=bool))

    @classmethod
    def dense(cls, n: int) -> "SupportPattern":
        return cls(np.tril(np.ones((n, n), dtype=bool), -1))


def dependency_graph(pattern: SupportPattern) -> nx.DiGraph:
    """DAG with an edge i -> j for every mask[i, j]"""
    graph = nx.DiGraph()
    graph.add_nodes_from(range(pattern.n))
    rows, cols = np.nonzero(pattern.mask)
    graph.add_edges_from(zip(rows.tolist(), cols.tolist()))
    return graph


def snd(pattern: SupportPattern) -> int:
    """Smallest k >= 1 with N^k = 0 over the boolean semiring"""
    if not pattern.mask.any():
        return 1
    return 1 + nx.dag_longest_path_length(dependency_graph(pattern))


def snd_by_powers(pattern: SupportPattern) -> int:
    """Same quantity as snd(), by repeated boolean matrix products"""
    N = pattern.mask.astype(np.int64)
    power = N.copy()
    k = 1
    while power.any():
        power = ((power @ N) > 0).astype(np.int64)
        k += 1
    return k


def support_of(L: np.ndarray, tol: float = STRUCTURAL_ZERO) -> SupportPattern:
    """Support of L - I, treating |entries| <= tol as structural zeros"""
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {L.shape}")
    return SupportPattern(np.abs(np.tril(L, -1)) > tol)


def snd_of_ldl(L: np.ndarray, tol: float = STRUCTURAL_ZERO) -> int:
    """SND of a unit lower triangular factor"""
    return snd(support_of(L, tol))


def kron_support(a: SupportPattern, b: SupportPattern) -> SupportPattern:
    """Support of (L_a (x) L_b) - I for generic nonzero values on the masks"""
    La = a.mask.astype(np.int64) + np.eye(a.n, dtype=np.int64)
    Lb = b.mask.astype(np.int64) + np.eye(b.n, dtype=np.int64)
    mask = np.kron(La, Lb) > 0
    np.fill_diagonal(mask, False)
    return SupportPattern(mask)


def kron_snd_bound(a: SupportPattern, b: SupportPattern) -> int:
    """snd(a) + snd(b) - 1: the exponent at which (L_a (x) L_b - I) vanishes"""
    return snd(a) + snd(b) - 1
