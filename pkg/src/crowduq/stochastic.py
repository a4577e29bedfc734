"""Stagewise random parameter models, Monte Carlo QoI sampling, scenario trees.

Coefficients are revealed stage by stage: one bounded random coefficient
per revelation stage modulates the chosen targets additively (constant in
time within its stage).  Every realization must satisfy the same
admissibility hypotheses as deterministic inputs.

Sampling is reproducible: the stream for sample ``i`` is derived from
(root seed, i), so results do not depend on execution order or thread
count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .csvio import write_csv
from .errors import EmptyDistribution, ExplosionGuard, HypothesisViolation, NodeNotFound
from .grid import Grid, TimeGrid
from .params import validate_params
from .solver import solve

_TREE_LIMIT = 1_000_000


# --------------------------------------------------------------------------
# stage coefficient laws


@dataclass(frozen=True)
class UniformLaw:
    lo: float
    hi: float

    def sample(self, rng) -> float:
        return float(rng.uniform(self.lo, self.hi))

    def quantize(self, branching: int) -> "DiscreteLaw":
        """Equal-probability midpoint-quantile atoms."""
        q = (np.arange(branching) + 0.5) / branching
        atoms = self.lo + (self.hi - self.lo) * q
        return DiscreteLaw(tuple(float(a) for a in atoms), tuple([1.0 / branching] * branching))

    def bounds(self):
        return self.lo, self.hi


@dataclass(frozen=True)
class DiscreteLaw:
    atoms: tuple
    probs: tuple

    def __post_init__(self):
        if len(self.atoms) != len(self.probs) or not self.atoms:
            raise ValueError("atoms and probs must be nonempty and of equal length")
        if abs(sum(self.probs) - 1.0) > 1e-12 or min(self.probs) < 0:
            raise ValueError("probs must be nonnegative and sum to 1")

    def sample(self, rng) -> float:
        idx = rng.choice(len(self.atoms), p=np.asarray(self.probs))
        return float(self.atoms[idx])

    def quantize(self, branching: int) -> "DiscreteLaw":
        if branching != len(self.atoms):
            raise ValueError(
                f"branching {branching} does not match the {len(self.atoms)} atoms of a discrete law"
            )
        return self

    def bounds(self):
        return min(self.atoms), max(self.atoms)


@dataclass(frozen=True)
class Modulation:
    """How the stage coefficient enters one target field.

    ``target`` is one of ``source_rate``, ``decay_rate``, ``entry_rate``,
    ``exit_rate``, ``potential``; ``profile`` is a spatial shape on the
    target's domain (cells, or boundary faces for entry/exit), default 1.
    """

    target: str
    profile: Optional[np.ndarray] = None

    def resolved_profile(self, width: int) -> np.ndarray:
        if self.profile is None:
            return np.ones(width)
        prof = np.asarray(self.profile, dtype=float)
        if prof.shape != (width,):
            raise ValueError(f"profile for '{self.target}' has shape {prof.shape}, expected ({width},)")
        return prof

    def sup_magnitude(self, grid: Grid, width: int) -> float:
        """Sup of the profile (and of its face gradient for potentials)."""
        prof = self.resolved_profile(width)
        sup = float(np.abs(prof).max())
        if self.target == "potential" and len(grid.face_left):
            grad = (prof[grid.face_right] - prof[grid.face_left]) / grid.face_dist
            sup = max(sup, float(np.abs(grad).max()))
        return sup


@dataclass(frozen=True)
class RandomParamModel:
    """Base coefficients plus stagewise additive perturbation laws."""

    base: object  # ReactionParams or FlowthroughParams
    grid: Grid
    time_grid: TimeGrid
    stage_laws: tuple  # one law per revelation stage
    modulations: tuple  # Modulation entries, all driven by the stage coefficient
    seed: int = 0
    mode: str = "strict"
    conditional_law: Optional[Callable[[int, tuple], object]] = None

    def __post_init__(self):
        if len(self.stage_laws) != self.time_grid.n_stages:
            raise ValueError("need exactly one law per revelation stage")

    @property
    def kind(self) -> str:
        return self.base.kind

    def law_at(self, stage: int, history: tuple):
        """Law of the stage coefficient given the realized ancestor path."""
        if self.conditional_law is not None:
            return self.conditional_law(stage, history)
        return self.stage_laws[stage]


def _target_width(model: RandomParamModel, target: str) -> int:
    arr = getattr(model.base, target)
    return arr.shape[1]


def realize(model: RandomParamModel, stage_values: Sequence[float]):
    """Parameter fields for one full path of stage coefficients.

    Raises :class:`HypothesisViolation` when the modulated fields leave the
    admissible set (e.g. a misconfigured range drives a rate negative).
    """
    if len(stage_values) != model.time_grid.n_stages:
        raise ValueError("one coefficient per stage is required")
    stage_of_t = model.time_grid.stage_of_times()
    updates = {}
    for mod in model.modulations:
        width = _target_width(model, mod.target)
        prof = mod.resolved_profile(width)
        fld = getattr(model.base, mod.target).copy() if mod.target not in updates else updates[mod.target]
        for k, xi in enumerate(stage_values):
            rows = stage_of_t == k
            fld[rows] += xi * prof[None, :]
        updates[mod.target] = fld
    params = model.base.with_fields(**updates) if updates else model.base
    validate_params(params, model.grid, model.time_grid, mode=model.mode)
    return params


def _rng_for_sample(seed: int, sample_index: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(sample_index,)))


def draw_stage_values(model: RandomParamModel, sample_index: int) -> tuple:
    """Stage coefficients for one sample, deterministic in (seed, index)."""
    rng = _rng_for_sample(model.seed, sample_index)
    values = []
    for k in range(model.time_grid.n_stages):
        law = model.law_at(k, tuple(values))
        values.append(law.sample(rng))
    return tuple(values)


def sample_path(model: RandomParamModel, sample_index: int):
    """One admissible parameter realization (field set) for sample ``sample_index``."""
    return realize(model, draw_stage_values(model, sample_index))


# --------------------------------------------------------------------------
# empirical distributions


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Weighted atoms: QoI values (floats) or parameter paths (objects)."""

    atoms: tuple
    weights: tuple

    def __post_init__(self):
        if not self.atoms:
            raise EmptyDistribution("no atoms")
        if len(self.atoms) != len(self.weights):
            raise ValueError("atoms and weights differ in length")
        w = np.asarray(self.weights, dtype=float)
        if abs(w.sum() - 1.0) > 1e-12 or w.min() < 0:
            raise ValueError("weights must be nonnegative and sum to 1")

    @classmethod
    def from_values(cls, values, weights=None):
        values = list(values)
        if weights is None:
            weights = [1.0 / len(values)] * len(values) if values else []
        return cls(tuple(values), tuple(float(w) for w in weights))

    @property
    def numeric(self) -> np.ndarray:
        arr = np.asarray(self.atoms, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("atoms are not finite numbers")
        return arr

    def mean(self) -> float:
        return float(np.dot(self.numeric, np.asarray(self.weights)))

    def variance(self) -> float:
        x = self.numeric
        w = np.asarray(self.weights)
        m = float(np.dot(x, w))
        return float(np.dot(w, (x - m) ** 2))

    def to_csv(self, path) -> None:
        write_csv(path, ("atom", "weight"), zip(self.numeric, self.weights))

    @classmethod
    def from_csv(cls, path):
        from .csvio import read_csv

        _, rows = read_csv(path)
        atoms = tuple(float(r[0]) for r in rows)
        weights = tuple(float(r[1]) for r in rows)
        return cls(atoms, weights)


@dataclass(frozen=True)
class MonteCarloResult:
    paths: tuple  # parameter field sets, in sample order
    stage_values: tuple  # tuple of stage-coefficient tuples
    qoi_values: dict  # label -> tuple of floats

    def distribution(self, label: str) -> EmpiricalDistribution:
        return EmpiricalDistribution.from_values(self.qoi_values[label])


def monte_carlo_run(model: RandomParamModel, qois, n_samples: int, *,
                    threads: int = 1, solver_options: Optional[dict] = None) -> MonteCarloResult:
    """Sample, solve and evaluate the given QoIs for ``n_samples`` draws.

    Results are collected in sample order, so they are independent of the
    thread count.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    qois = list(qois)
    opts = dict(solver_options or {})
    opts.setdefault("mode", model.mode)

    def one(i: int):
        values = draw_stage_values(model, i)
        params = realize(model, values)
        try:
            sol = solve(params, model.grid, model.time_grid, **opts)
        except Exception as exc:
            raise type(exc)(f"{exc} (sample {i})") from exc
        return values, params, [q.evaluate(sol) for q in qois]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_samples)))
    else:
        results = [one(i) for i in range(n_samples)]
    return MonteCarloResult(
        paths=tuple(r[1] for r in results),
        stage_values=tuple(r[0] for r in results),
        qoi_values={q.label(): tuple(r[2][j] for r in results) for j, q in enumerate(qois)},
    )


def monte_carlo_qoi(model: RandomParamModel, qoi, n_samples: int, *,
                    threads: int = 1, solver_options: Optional[dict] = None) -> EmpiricalDistribution:
    """Equally weighted empirical distribution of one QoI under the model."""
    res = monte_carlo_run(model, [qoi], n_samples, threads=threads, solver_options=solver_options)
    return res.distribution(qoi.label())


# --------------------------------------------------------------------------
# scenario trees


@dataclass(frozen=True)
class TreeNode:
    id: int
    stage: int  # 0 for the root; leaves sit at stage == n_stages
    parent: int  # -1 for the root
    value: Optional[float]  # stage coefficient revealed at this node
    prob: float  # probability conditional on the parent


@dataclass(frozen=True)
class ScenarioTree:
    """Stage-structured tree of coefficient realizations (the filtration).

    A node's path is the sequence of its ancestors' values: conditioning on
    a node means conditioning on the entire revealed history, not only the
    latest value.
    """

    nodes: tuple
    stage_boundaries: tuple
    stage_offset: int = 0  # absolute index of the first revealed stage
    _children: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        kids = {}
        for nd in self.nodes:
            if nd.parent >= 0:
                kids.setdefault(nd.parent, []).append(nd.id)
        object.__setattr__(self, "_children", kids)
        by_id = {nd.id: nd for nd in self.nodes}
        for pid, ids in kids.items():
            s = sum(by_id[i].prob for i in ids)
            if abs(s - 1.0) > 1e-12:
                raise ValueError(f"children of node {pid} have probability sum {s!r}")

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def n_stages(self) -> int:
        return len(self.stage_boundaries) - 1

    def node(self, node_id: int) -> TreeNode:
        for nd in self.nodes:
            if nd.id == node_id:
                return nd
        raise NodeNotFound(f"no node with id {node_id}")

    def children(self, node_id: int):
        return [self.node(i) for i in self._children.get(node_id, [])]

    def is_leaf(self, node_id: int) -> bool:
        return node_id not in self._children

    def leaves(self):
        return [nd for nd in self.nodes if self.is_leaf(nd.id)]

    def path_values(self, node_id: int) -> tuple:
        """Values revealed from the first stage down to ``node_id``."""
        nd = self.node(node_id)
        out = []
        while nd.parent >= 0:
            out.append(nd.value)
            nd = self.node(nd.parent)
        return tuple(reversed(out))

    def path_prob(self, node_id: int) -> float:
        nd = self.node(node_id)
        p = 1.0
        while nd.parent >= 0:
            p *= nd.prob
            nd = self.node(nd.parent)
        return p

    def leaf_distribution(self):
        """(paths, probs) over the leaves, in canonical node order."""
        leaves = self.leaves()
        return [self.path_values(nd.id) for nd in leaves], np.array(
            [self.path_prob(nd.id) for nd in leaves]
        )

    def conditional_subtree(self, node_id: int) -> "ScenarioTree":
        """Subtree rooted at ``node_id`` with root probability renormalized to 1.

        This is the disintegrated measure given the observed history; leaf
        probabilities in the subtree equal the original leaf probabilities
        divided by the node's path probability.
        """
        anchor = self.node(node_id)
        keep = {node_id}
        frontier = [node_id]
        while frontier:
            nxt = []
            for nid in frontier:
                for kid in self._children.get(nid, []):
                    keep.add(kid)
                    nxt.append(kid)
            frontier = nxt
        order = [nd for nd in self.nodes if nd.id in keep]
        remap = {nd.id: i for i, nd in enumerate(order)}
        nodes = []
        for nd in order:
            if nd.id == node_id:
                nodes.append(TreeNode(0, 0, -1, None, 1.0))
            else:
                nodes.append(
                    TreeNode(remap[nd.id], nd.stage - anchor.stage, remap[nd.parent], nd.value, nd.prob)
                )
        return ScenarioTree(
            nodes=tuple(nodes),
            stage_boundaries=self.stage_boundaries[anchor.stage:],
            stage_offset=self.stage_offset + anchor.stage,
        )

    # -- serialization ----------------------------------------------------

    def dumps(self) -> str:
        lines = ["stages " + " ".join(repr(float(s)) for s in self.stage_boundaries)]
        if self.stage_offset:
            lines.append(f"offset {self.stage_offset}")
        for nd in self.nodes:
            val = "" if nd.value is None else f" {nd.value!r}"
            lines.append(f"node {nd.id} {nd.stage} {nd.parent} {nd.prob!r}{val}")
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ScenarioTree":
        boundaries = None
        offset = 0
        nodes = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "stages":
                boundaries = tuple(float(x) for x in parts[1:])
            elif parts[0] == "offset":
                offset = int(parts[1])
            elif parts[0] == "node":
                nid, stage, parent = int(parts[1]), int(parts[2]), int(parts[3])
                prob = float(parts[4])
                value = float(parts[5]) if len(parts) > 5 else None
                nodes.append(TreeNode(nid, stage, parent, value, prob))
            else:
                raise ValueError(f"unrecognized line in tree file: {line!r}")
        if boundaries is None:
            raise ValueError("tree file has no stage header")
        return cls(nodes=tuple(nodes), stage_boundaries=boundaries, stage_offset=offset)

    @classmethod
    def load(cls, path) -> "ScenarioTree":
        with open(path) as fh:
            return cls.loads(fh.read())


def build_scenario_tree(model: RandomParamModel, branching: Sequence[int]) -> ScenarioTree:
    """Quantize the model's stage laws into a scenario tree.

    Continuous laws are replaced by equal-probability quantile atoms with
    the requested branching; discrete laws keep their atoms (branching must
    match).  Conditional laws may depend on the full ancestor path.
    """
    branching = [int(b) for b in branching]
    if len(branching) != model.time_grid.n_stages:
        raise ValueError("need one branching factor per stage")
    if any(b < 1 for b in branching):
        raise ValueError("branching factors must be >= 1")
    leaves = int(np.prod(branching))
    if leaves > _TREE_LIMIT:
        raise ExplosionGuard(f"tree would have {leaves} leaves (limit {_TREE_LIMIT})")

    nodes = [TreeNode(0, 0, -1, None, 1.0)]
    frontier = [(0, ())]  # (node id, history)
    next_id = 1
    for stage, b in enumerate(branching):
        new_frontier = []
        for nid, hist in frontier:
            law = model.law_at(stage, hist).quantize(b)
            for atom, prob in zip(law.atoms, law.probs):
                nodes.append(TreeNode(next_id, stage + 1, nid, float(atom), float(prob)))
                new_frontier.append((next_id, hist + (float(atom),)))
                next_id += 1
        frontier = new_frontier
    return ScenarioTree(nodes=tuple(nodes), stage_boundaries=model.time_grid.stage_boundaries)


def conditional_subtree(tree: ScenarioTree, node_id: int) -> ScenarioTree:
    """Module-level convenience wrapper around :meth:`ScenarioTree.conditional_subtree`."""
    return tree.conditional_subtree(node_id)


def tree_leaf_params(model: RandomParamModel, tree: ScenarioTree):
    """Realized parameter fields for every leaf path, in canonical order."""
    paths, probs = tree.leaf_distribution()
    return [realize(model, p) for p in paths], probs
