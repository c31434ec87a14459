"""Directed session graphs with row-normalized in/out adjacency."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class SessionGraph:
    nodes: list  # unique item indices, first-occurrence order
    alias: list  # sequence position -> node slot
    edges: list  # (src_slot, dst_slot) per consecutive pair, in order
    a_out: np.ndarray  # (u, u), rows normalized by out-degree
    a_in: np.ndarray  # (u, u), rows normalized by in-degree

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def last_slot(self):
        return self.alias[-1]

    def successors(self, slot):
        """Distinct successor slots of a node slot, ascending."""
        return sorted({dst for src, dst in self.edges if src == slot})

    def dump_edges(self):
        """Debug edge list, one line per distinct edge: ``src -> dst x count``."""
        counts = {}
        for e in self.edges:
            counts[e] = counts.get(e, 0) + 1
        return "\n".join(
            f"{src} -> {dst} x {counts[(src, dst)]}" for src, dst in sorted(counts)
        )


def build_graph(session, binary=False):
    """Session graph of an item-index sequence.

    Edges link consecutive items (immediate repeats become self-loops).
    ``a_out[i, j]`` is count(i->j) / outdegree(i); ``a_in`` is the same on
    reversed edges. With ``binary=True`` edge multiplicity is ignored.
    """
    session = list(session)
    if not session:
        raise DataError("cannot build a graph from an empty session")
    nodes = []
    slot_of = {}
    alias = []
    for item in session:
        if item not in slot_of:
            slot_of[item] = len(nodes)
            nodes.append(item)
        alias.append(slot_of[item])
    u = len(nodes)
    edges = [(alias[i], alias[i + 1]) for i in range(len(alias) - 1)]
    counts = np.zeros((u, u), dtype=np.float32)
    for src, dst in edges:
        counts[src, dst] += 1.0
    if binary:
        counts = (counts > 0).astype(np.float32)
    a_out = _row_normalize(counts)
    a_in = _row_normalize(counts.T)
    return SessionGraph(nodes=nodes, alias=alias, edges=edges, a_out=a_out, a_in=a_in)


def _row_normalize(counts):
    degree = counts.sum(axis=1, keepdims=True)
    return np.divide(
        counts, degree, out=np.zeros_like(counts), where=degree > 0
    )
