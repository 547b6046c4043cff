"""Subdomain communication: weighted graph, greedy round scheduling, dofmaps,
and the round-based point-to-point exchange engine.

A schedule organizes pairwise exchanges into rounds so that no subdomain
talks to two neighbors at once; within a round all pairs exchange
concurrently. The in-process engine emulates point-to-point transport with
per-pair queues and a watchdog; payloads target disjoint dof ranges, so the
final state is independent of arrival order.
"""

from __future__ import annotations

import queue
import re
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DeadlockTimeoutError, LayoutError, ProtocolError
from .mesh import CellSet, SubdomainLayout


@dataclass(frozen=True)
class CommGraph:
    """Undirected weighted graph: nodes are subdomains, weights count the
    values exchanged between two neighbors."""

    n_nodes: int
    edges: tuple  # ((i, j, weight), ...) with i < j

    def __post_init__(self):
        seen = set()
        for (i, j, w) in self.edges:
            if i == j:
                raise LayoutError("self-loop in communication graph")
            if not i < j:
                raise LayoutError("edges must be stored with i < j")
            if (i, j) in seen:
                raise LayoutError(f"duplicate edge ({i}, {j})")
            if w < 1:
                raise LayoutError("edge weight must be at least 1")
            seen.add((i, j))

    def degrees(self) -> dict:
        deg = {}
        for (i, j, _) in self.edges:
            deg[i] = deg.get(i, 0) + 1
            deg[j] = deg.get(j, 0) + 1
        return deg

    def max_degree(self) -> int:
        deg = self.degrees()
        return max(deg.values()) if deg else 0


@dataclass(frozen=True)
class CommSchedule:
    """Ordered rounds of node-disjoint edges covering the graph exactly once."""

    rounds: tuple  # ((edge, ...), ...)

    def __post_init__(self):
        for r, edges in enumerate(self.rounds):
            nodes = [n for (i, j, _) in edges for n in (i, j)]
            if len(nodes) != len(set(nodes)):
                raise LayoutError(f"round {r + 1} is not a matching")

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def all_edges(self):
        return [e for r in self.rounds for e in r]


def build_comm_graph(layout: SubdomainLayout, space) -> CommGraph:
    """Edge (i, j) whenever the overlapped subdomains intersect; the weight
    counts the per-component dofs shipped in both directions, including the
    refresh of prediction-strip cells."""
    m = space.dofs_per_cell
    need = _need_cells(layout)
    edges = []
    for (i, j), _ in sorted(layout.pairwise.items()):
        n_ij = len(need[i, j])
        n_ji = len(need[j, i])
        if n_ij + n_ji == 0:
            continue
        edges.append((i, j, (n_ij + n_ji) * m))
    return CommGraph(n_nodes=layout.n_subdomains, edges=tuple(edges))


def _need_cells(layout: SubdomainLayout) -> dict:
    """need[(i, j)] = cells context i must receive from owner j."""
    need = {}
    for (a, b) in layout.pairwise:
        for i, j in ((a, b), (b, a)):
            ctx_cells = layout.overlapped[i].union(layout.prediction[i])
            need[i, j] = ctx_cells.intersect(layout.owned[j])
    return need


def greedy_schedule(graph: CommGraph) -> CommSchedule:
    """Greedy round construction from a fixed edge order.

    Edges are sorted by max endpoint degree (descending), then weight
    (descending), then lexicographic (i, j). Rounds are peeled from the front
    of the remaining list, taking every edge whose endpoints are still free
    in the round being built, closing the round when no more fit.
    """
    deg = graph.degrees()
    pending = sorted(
        graph.edges,
        key=lambda e: (-max(deg[e[0]], deg[e[1]]), -e[2], e[0], e[1]),
    )
    rounds = []
    while pending:
        busy = set()
        taken, rest = [], []
        for e in pending:
            i, j, _ = e
            if i in busy or j in busy:
                rest.append(e)
            else:
                taken.append(e)
                busy.add(i)
                busy.add(j)
        rounds.append(tuple(taken))
        pending = rest
    return CommSchedule(rounds=tuple(rounds))


# -- dofmaps --------------------------------------------------------------------


def build_dofmap(cells: CellSet, space) -> np.ndarray:
    """Local-to-global dof indices for a context's cell set: local dofs are
    enumerated cell-block-wise in local (sorted) cell order."""
    m = space.dofs_per_cell
    return (cells.indices[:, None] * m + np.arange(m)[None, :]).ravel()


def compose_dofmaps(dofmap_a: np.ndarray, dofmap_b: np.ndarray):
    """Positions (pa, pb) of the dofs shared by two contexts, relating local
    indices of context a directly to local indices of context b."""
    shared, pa, pb = np.intersect1d(dofmap_a, dofmap_b, return_indices=True)
    return shared, pa, pb


# -- exchange engine --------------------------------------------------------------


@dataclass
class PairPayload:
    """Directed payload description src -> dst.

    ``pack_idx`` selects dofs from the source's owner-state arrays. Each
    ``unpack`` entry (array name, payload rows, destination indices) scatters
    a slice of the payload into one destination array. Component tags 'u'
    and 'v' ride as separate messages over the same index sets.
    """

    src: int
    dst: int
    pack_idx: np.ndarray
    unpack: list = field(default_factory=list)

    @property
    def n_values(self) -> int:
        return len(self.pack_idx)


@dataclass
class ExchangeRecord:
    round_index: int
    src: int
    dst: int
    tag: str
    n_bytes: int


_COMPONENTS = ("u", "v")


def _pack(states, payload: PairPayload, tag: str) -> np.ndarray:
    src_arrays = states[payload.src]
    return src_arrays[f"{tag}_ov"][payload.pack_idx]


def _unpack(states, payload: PairPayload, tag: str, data: np.ndarray):
    if len(data) != payload.n_values:
        raise ProtocolError(
            f"payload length mismatch on pair ({payload.src}, {payload.dst}): "
            f"got {len(data)}, expected {payload.n_values}"
        )
    dst_arrays = states[payload.dst]
    for name, rows, idx in payload.unpack:
        dst_arrays[f"{tag}_{name}"][idx] = data[rows]


def run_exchange(
    states: dict,
    schedule: CommSchedule,
    payloads: dict,
    workers: int = 1,
    timeout: float = 30.0,
    log: list | None = None,
):
    """Execute all scheduled rounds, swapping owner values between pairs.

    ``states`` maps subdomain id to its mutable component arrays
    ('u_ov', 'v_ov', 'u_pred', 'v_pred'); ``payloads`` maps directed pairs
    (src, dst) to PairPayload. With workers > 1 each round runs its pairs
    concurrently over per-pair queues with a watchdog timeout; results are
    bit-identical to the sequential path because packing and unpacking touch
    disjoint dof ranges.
    """
    for r, edges in enumerate(schedule.rounds):
        for (i, j, _) in edges:
            for a, b in ((i, j), (j, i)):
                if (a, b) not in payloads:
                    raise ProtocolError(f"schedule pair ({a}, {b}) has no payload descriptor")
    if workers <= 1:
        _run_sequential(states, schedule, payloads, log)
    else:
        _run_threaded(states, schedule, payloads, workers, timeout, log)


def _run_sequential(states, schedule, payloads, log):
    for r, edges in enumerate(schedule.rounds):
        staged = []
        for (i, j, _) in edges:
            for a, b in ((i, j), (j, i)):
                p = payloads[a, b]
                for tag in _COMPONENTS:
                    staged.append((p, tag, _pack(states, p, tag)))
        for p, tag, data in staged:
            _unpack(states, p, tag, data)
            if log is not None:
                log.append(ExchangeRecord(r, p.src, p.dst, tag, data.nbytes))


def _run_threaded(states, schedule, payloads, workers, timeout, log):
    ids = sorted(states)
    assignment = {sid: w for w, sid in ((k % workers, s) for k, s in enumerate(ids))}
    channels = {}
    for (a, b) in payloads:
        channels[a, b] = queue.Queue()
    barrier = threading.Barrier(workers)
    errors = []
    log_lock = threading.Lock()

    def worker(wid):
        mine = [s for s in ids if assignment[s] == wid]
        try:
            for r, edges in enumerate(schedule.rounds):
                barrier.wait(timeout=timeout)
                sends, recvs = [], []
                for (i, j, _) in edges:
                    for a, b in ((i, j), (j, i)):
                        if a in mine:
                            sends.append((a, b))
                        if b in mine:
                            recvs.append((a, b))
                for (a, b) in sends:
                    p = payloads[a, b]
                    for tag in _COMPONENTS:
                        channels[a, b].put((tag, _pack(states, p, tag)))
                for (a, b) in recvs:
                    p = payloads[a, b]
                    for _ in _COMPONENTS:
                        try:
                            tag, data = channels[a, b].get(timeout=timeout)
                        except queue.Empty:
                            raise DeadlockTimeoutError(
                                f"round {r + 1}: subdomain {b} timed out waiting for {a}"
                            ) from None
                        _unpack(states, p, tag, data)
                        if log is not None:
                            with log_lock:
                                log.append(ExchangeRecord(r, a, b, tag, data.nbytes))
        except Exception as exc:  # propagate to the caller
            errors.append(exc)
            barrier.abort()

    threads = [threading.Thread(target=worker, args=(w,)) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # a broken barrier on other workers is a side effect; surface the cause
        for exc in errors:
            if isinstance(exc, (DeadlockTimeoutError, ProtocolError)):
                raise exc
        raise errors[0]


# -- schedule text format ----------------------------------------------------------

_TUPLE_RE = re.compile(r"\(\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\)")


def format_schedule(schedule: CommSchedule) -> str:
    lines = []
    for edges in schedule.rounds:
        lines.append(", ".join(f"({i},{j},{w})" for (i, j, w) in edges))
    return "\n".join(lines) + "\n"


def parse_schedule(text: str) -> CommSchedule:
    rounds = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        edges = tuple(
            (int(a), int(b), int(w)) for (a, b, w) in _TUPLE_RE.findall(line)
        )
        if edges:
            rounds.append(edges)
    return CommSchedule(rounds=tuple(rounds))


def parse_graph_file(text: str) -> CommGraph:
    """Edge-list text: one 'i j weight' triple per line; # comments allowed."""
    edges = []
    nodes = set()
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#")[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise LayoutError(f"graph line {ln}: expected 'i j weight'")
        i, j, w = int(parts[0]), int(parts[1]), int(parts[2])
        if i > j:
            i, j = j, i
        edges.append((i, j, w))
        nodes.update((i, j))
    return CommGraph(n_nodes=max(nodes) if nodes else 0, edges=tuple(edges))
