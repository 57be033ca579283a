"""Areal units, adjacency graphs and the multivariate support.

Cells of the support are ``(variable_index, unit_index)`` pairs, stored per time
point in sorted order (variable first, then unit) so that every matrix built on
them has reproducible rows.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COUPLINGS = ("none", "same_unit")


class EdgeListError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SupportError(ValueError):
    pass


@dataclass(frozen=True)
class ArealUnit:
    id: str
    index: int


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected 0/1 graph over areal units; ``edges`` holds pairs ``(i, j)`` with ``i < j``."""

    ids: tuple[str, ...]
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("unit ids must be unique")
        n = len(self.ids)
        for i, j in self.edges:
            if not (0 <= i < j < n):
                raise ValueError(f"invalid edge ({i}, {j}) for {n} units")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def units(self) -> list[ArealUnit]:
        return [ArealUnit(u, k) for k, u in enumerate(self.ids)]

    def index_of(self, unit_id: str) -> int:
        try:
            return self._lookup[unit_id]
        except KeyError:
            raise KeyError(f"unit {unit_id!r} is not in the graph") from None

    @property
    def _lookup(self) -> dict[str, int]:
        lookup = self.__dict__.get("_lookup_cache")
        if lookup is None:
            lookup = {u: k for k, u in enumerate(self.ids)}
            object.__setattr__(self, "_lookup_cache", lookup)
        return lookup

    def adjacency_matrix(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        if self.edges:
            ij = np.array(sorted(self.edges))
            A[ij[:, 0], ij[:, 1]] = 1.0
            A[ij[:, 1], ij[:, 0]] = 1.0
        return A

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


def load_edge_list(text: str) -> AdjacencyGraph:
    """Parse a whitespace-separated edge list.

    Each non-blank line holds two unit ids; ``#`` starts a comment. A line with a
    single id registers an isolated unit. Ids are indexed in order of first
    appearance.
    """
    ids: dict[str, int] = {}
    edges: set[tuple[int, int]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.replace(",", " ").split()
        if len(tokens) not in (1, 2):
            raise EdgeListError(f"expected two unit ids, got {len(tokens)} tokens", lineno)
        if len(tokens) == 2 and tokens[0] == tokens[1]:
            raise EdgeListError(f"self-loop on unit {tokens[0]!r}", lineno)
        idx = [ids.setdefault(tok, len(ids)) for tok in tokens]
        if len(idx) == 2:
            edges.add((min(idx), max(idx)))
    return AdjacencyGraph(tuple(ids), frozenset(edges))


def read_edge_list(path) -> AdjacencyGraph:
    return load_edge_list(Path(path).read_text())


def format_edge_list(graph: AdjacencyGraph) -> str:
    lines = [f"{graph.ids[i]} {graph.ids[j]}" for i, j in sorted(graph.edges)]
    touched = {k for e in graph.edges for k in e}
    lines += [graph.ids[k] for k in range(graph.n) if k not in touched]
    return "\n".join(lines) + "\n"


def lattice_graph(nrow: int, ncol: int) -> AdjacencyGraph:
    """Rook-neighbour lattice with ids ``"r{i}c{j}"`` in row-major order."""
    ids = tuple(f"r{i}c{j}" for i in range(nrow) for j in range(ncol))
    edges = set()
    for i in range(nrow):
        for j in range(ncol):
            k = i * ncol + j
            if j + 1 < ncol:
                edges.add((k, k + 1))
            if i + 1 < nrow:
                edges.add((k, k + ncol))
    return AdjacencyGraph(ids, frozenset(edges))


def erdos_renyi_graph(n: int, prob: float, rng: np.random.Generator) -> AdjacencyGraph:
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    i, j = np.nonzero(upper)
    return AdjacencyGraph(tuple(f"u{k}" for k in range(n)), frozenset(zip(i.tolist(), j.tolist())))


def _sorted_labels(labels: Iterable) -> tuple:
    labels = set(labels)
    try:
        return tuple(sorted(labels, key=lambda s: int(s)))
    except (TypeError, ValueError):
        return tuple(sorted(labels, key=str))


@dataclass(frozen=True)
class MultivariateSupport:
    """Prediction cells ``D_P,t`` and observed cells ``D_O,t`` for each time point.

    ``prediction_cells[t]`` is an ``(N_t, 2)`` int array of ``(variable, unit)``
    rows in sorted order; ``observed[t]`` is a boolean mask over those rows.
    """

    variables: tuple
    times: tuple
    unit_ids: tuple[str, ...]
    prediction_cells: tuple
    observed: tuple

    def __post_init__(self):
        if len(self.prediction_cells) != len(self.times) or len(self.observed) != len(self.times):
            raise SupportError("one cell array and one mask per time point required")
        for t, (cells, mask) in enumerate(zip(self.prediction_cells, self.observed)):
            if cells.ndim != 2 or cells.shape[1] != 2:
                raise SupportError(f"time {t}: cells must be an (N_t, 2) array")
            if mask.shape != (len(cells),):
                raise SupportError(f"time {t}: observed mask does not match cells")
            if len(cells) > 1:
                key = cells[:, 0] * (len(self.unit_ids) + 1) + cells[:, 1]
                if np.any(np.diff(key) <= 0):
                    raise SupportError(f"time {t}: cells must be unique and sorted by (variable, unit)")

    @classmethod
    def from_records(cls, records: Iterable[tuple], unit_ids: Sequence[str]) -> "MultivariateSupport":
        """Build from ``(variable, time, unit_id, observed)`` tuples."""
        records = [(str(v), str(s), str(u), o) for v, s, u, o in records]
        variables = _sorted_labels(r[0] for r in records)
        times = _sorted_labels(r[1] for r in records)
        var_idx = {v: k for k, v in enumerate(variables)}
        time_idx = {s: k for k, s in enumerate(times)}
        unit_idx = {u: k for k, u in enumerate(unit_ids)}
        per_t: list[dict] = [dict() for _ in times]
        for var, time, unit, obs in records:
            if unit not in unit_idx:
                raise SupportError(f"unit {unit!r} (variable {var}, time {time}) is not in the graph")
            key = (var_idx[var], unit_idx[unit])
            slot = per_t[time_idx[time]]
            if key in slot:
                raise SupportError(f"duplicate cell (variable {var}, time {time}, unit {unit})")
            slot[key] = bool(obs)
        cells, masks = [], []
        for slot in per_t:
            keys = sorted(slot)
            cells.append(np.array(keys, dtype=int).reshape(-1, 2))
            masks.append(np.array([slot[k] for k in keys], dtype=bool))
        return cls(variables, times, tuple(unit_ids), tuple(cells), tuple(masks))

    @classmethod
    def full(cls, n_variables: int, n_times: int, unit_ids: Sequence[str]) -> "MultivariateSupport":
        """Every variable at every unit and time, all observed."""
        n = len(unit_ids)
        cells = np.array([(v, u) for v in range(n_variables) for u in range(n)], dtype=int).reshape(-1, 2)
        return cls(
            tuple(str(k) for k in range(1, n_variables + 1)),
            tuple(str(k) for k in range(1, n_times + 1)),
            tuple(unit_ids),
            tuple(cells.copy() for _ in range(n_times)),
            tuple(np.ones(len(cells), dtype=bool) for _ in range(n_times)),
        )

    @property
    def L(self) -> int:
        return len(self.variables)

    @property
    def T(self) -> int:
        return len(self.times)

    def N(self, t: int) -> int:
        return len(self.prediction_cells[t])

    def n(self, t: int) -> int:
        return int(self.observed[t].sum())

    def observed_cells(self, t: int) -> np.ndarray:
        return self.prediction_cells[t][self.observed[t]]

    def time_windows(self) -> dict:
        """Per variable label, the (first, last) 1-based time index with a prediction cell."""
        out = {}
        for k, var in enumerate(self.variables):
            present = [t for t in range(self.T) if np.any(self.prediction_cells[t][:, 0] == k)]
            if present:
                out[var] = (present[0] + 1, present[-1] + 1)
        return out

    def with_observed(self, masks: Sequence[np.ndarray]) -> "MultivariateSupport":
        return MultivariateSupport(
            self.variables, self.times, self.unit_ids, self.prediction_cells,
            tuple(np.asarray(m, dtype=bool) for m in masks),
        )

    def cell_index(self, t: int) -> dict:
        """Map ``(variable, unit)`` to row index at time ``t``."""
        return {(int(v), int(u)): k for k, (v, u) in enumerate(self.prediction_cells[t])}


def read_support_csv(path, graph: AdjacencyGraph) -> MultivariateSupport:
    return parse_support_csv(Path(path).read_text(), graph)


def parse_support_csv(text: str, graph: AdjacencyGraph) -> MultivariateSupport:
    """Parse a roster with columns ``variable,time,unit,observed``."""
    reader = csv.DictReader(io.StringIO(text))
    missing = {"variable", "time", "unit", "observed"} - set(reader.fieldnames or ())
    if missing:
        raise SupportError(f"support roster is missing columns {sorted(missing)}")
    records = []
    for row in reader:
        obs = row["observed"].strip()
        if obs not in ("0", "1"):
            raise SupportError(f"observed must be 0 or 1, got {obs!r}")
        records.append((row["variable"].strip(), row["time"].strip(), row["unit"].strip(), obs == "1"))
    return MultivariateSupport.from_records(records, graph.ids)


def format_support_csv(support: MultivariateSupport) -> str:
    out = ["variable,time,unit,observed"]
    for t, time in enumerate(support.times):
        for (v, u), obs in zip(support.prediction_cells[t], support.observed[t]):
            out.append(f"{support.variables[v]},{time},{support.unit_ids[u]},{int(obs)}")
    return "\n".join(out) + "\n"


def block_adjacency(graph: AdjacencyGraph, support: MultivariateSupport, t: int,
                    coupling: str = "same_unit") -> np.ndarray:
    """Multivariate adjacency ``A_t`` over the prediction cells at time ``t``.

    Within a variable the spatial graph is restricted to units present at ``t``.
    ``coupling="same_unit"`` also links ``(l, u)`` with ``(l', u)`` for ``l != l'``.
    """
    if coupling not in COUPLINGS:
        raise ValueError(f"coupling must be one of {COUPLINGS}, got {coupling!r}")
    cells = support.prediction_cells[t]
    var, unit = cells[:, 0], cells[:, 1]
    if len(unit) and unit.max() >= graph.n:
        raise IndexError(f"time {t}: unit index {int(unit.max())} not in graph of {graph.n} units")
    adj = graph.adjacency_matrix()
    same_var = var[:, None] == var[None, :]
    A = adj[np.ix_(unit, unit)] * same_var
    if coupling == "same_unit":
        A = A + ((unit[:, None] == unit[None, :]) & ~same_var)
    return A.astype(float)


def car_target_precision(A) -> np.ndarray:
    """Target precision ``Q_t = I - A_t``; generally indefinite."""
    A = np.asarray(A, dtype=float)
    return np.eye(A.shape[0]) - A
