"""Model metadata and sampling-group enumeration.

A model set holds per-model evaluation costs and the set of outputs each
model produces. Model ids are 1-based and model 1 is the reference
(high-fidelity) model: it must produce every output. Sampling groups are
nonempty subsets of model ids; all models in a group are evaluated on the
same random input, which is what makes their sample covariance exploitable
by the estimator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelSet",
    "GroupSet",
    "enumerate_groups",
    "restriction_indices",
    "check_budget_feasibility",
]


@dataclass(frozen=True)
class ModelSet:
    """Costs and output coverage for models 1..num_models.

    Parameters
    ----------
    costs : array_like, shape (num_models,)
        Positive, finite cost of one evaluation of each model.
    outputs : sequence of collections of int
        outputs[i] lists the 1-based output ids model i+1 produces.
    num_outputs : int, optional
        Total number of outputs. Defaults to the largest id seen.
    """

    costs: np.ndarray
    produces: np.ndarray  # bool, shape (num_models, num_outputs)

    def __init__(self, costs, outputs=None, num_outputs=None):
        costs = np.asarray(costs, dtype=float)
        if costs.ndim != 1 or costs.size == 0:
            raise ValueError("costs must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(costs)) or np.any(costs <= 0.0):
            raise ValueError("model costs must be positive and finite")
        n = costs.size
        if outputs is None:
            outputs = [[1]] * n
        if len(outputs) != n:
            raise ValueError("outputs must list one collection per model")
        ids = sorted({int(s) for out in outputs for s in out})
        if num_outputs is None:
            num_outputs = ids[-1] if ids else 0
        m = int(num_outputs)
        if m < 1:
            raise ValueError("at least one output is required")
        produces = np.zeros((n, m), dtype=bool)
        for i, out in enumerate(outputs):
            if not out:
                raise ValueError(f"model {i + 1} produces no outputs")
            for s in out:
                s = int(s)
                if not 1 <= s <= m:
                    raise ValueError(f"output id {s} out of range 1..{m}")
                produces[i, s - 1] = True
        if not produces[0].all():
            raise ValueError("model 1 must produce every output")
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "produces", produces)

    @property
    def num_models(self) -> int:
        return self.costs.size

    @property
    def num_outputs(self) -> int:
        return self.produces.shape[1]

    def models_for_output(self, output: int) -> tuple[int, ...]:
        """1-based ids of the models producing the given 1-based output."""
        col = self.produces[:, output - 1]
        return tuple(int(i) + 1 for i in np.flatnonzero(col))


@dataclass(frozen=True)
class GroupSet:
    """An ordered collection of sampling groups over a model set.

    Groups are sorted by size and then lexicographically by member ids, so
    the index of a group is reproducible across runs. ``per_output_allowed``
    marks, for each output, the groups whose members all produce that
    output; only those groups can contribute to that output's estimator.
    """

    groups: tuple[tuple[int, ...], ...]
    group_costs: np.ndarray  # shape (num_groups,)
    per_output_allowed: np.ndarray  # bool, shape (num_outputs, num_groups)
    kappa: int
    num_models: int
    _index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {g: k for k, g in enumerate(self.groups)}
        )

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_outputs(self) -> int:
        return self.per_output_allowed.shape[0]

    def index_of(self, group) -> int:
        """Index of a group given as an iterable of 1-based model ids."""
        return self._index[tuple(sorted(int(i) for i in group))]

    def contains_highfi(self) -> np.ndarray:
        """Boolean mask of groups containing model 1."""
        return np.array([1 in g for g in self.groups], dtype=bool)

    def highfi_mask(self, output: int) -> np.ndarray:
        """Groups usable to anchor the given output: allowed and contain 1."""
        return self.per_output_allowed[output - 1] & self.contains_highfi()


def enumerate_groups(models: ModelSet, kappa=None, deny_list=()) -> GroupSet:
    """Enumerate all sampling groups of size up to ``kappa``.

    Groups are every nonempty subset of {1..num_models} with at most
    ``kappa`` members (default: no size limit), minus ``deny_list`` entries,
    ordered by size then lexicographically. A group is allowed for an output
    only if every member produces it. Raises if some output ends up with no
    allowed group containing model 1, since no unbiased estimator anchored
    on model 1 would exist for it.
    """
    n = models.num_models
    kappa = n if kappa is None else int(kappa)
    if not 1 <= kappa <= n:
        raise ValueError(f"kappa must be in 1..{n}, got {kappa}")
    denied = {tuple(sorted(int(i) for i in g)) for g in deny_list}
    groups = []
    for size in range(1, kappa + 1):
        for combo in itertools.combinations(range(1, n + 1), size):
            if combo not in denied:
                groups.append(combo)

    costs = np.array(
        [sum(models.costs[i - 1] for i in g) for g in groups], dtype=float
    )
    m = models.num_outputs
    allowed = np.zeros((m, len(groups)), dtype=bool)
    for s in range(m):
        col = models.produces[:, s]
        for k, g in enumerate(groups):
            allowed[s, k] = all(col[i - 1] for i in g)

    gs = GroupSet(
        groups=tuple(groups),
        group_costs=costs,
        per_output_allowed=allowed,
        kappa=kappa,
        num_models=n,
    )
    hf = gs.contains_highfi()
    for s in range(1, m + 1):
        if not np.any(gs.per_output_allowed[s - 1] & hf):
            raise ValueError(
                f"no allowed group containing model 1 covers output {s}"
            )
    return gs


def restriction_indices(group, num_models: int) -> tuple[int, ...]:
    """0-based positions of a group's models within the full model vector.

    The returned tuple is sorted ascending, so extracting rows/columns with
    it preserves the global model order.
    """
    idx = sorted(int(i) - 1 for i in group)
    if not idx:
        raise ValueError("group must be nonempty")
    if idx[0] < 0 or idx[-1] >= num_models:
        raise ValueError(f"group {tuple(group)} out of range for {num_models} models")
    if len(set(idx)) != len(idx):
        raise ValueError(f"group {tuple(group)} has repeated members")
    return tuple(idx)


def check_budget_feasibility(groups: GroupSet, budget: float, output: int = 1) -> bool:
    """True when the budget buys at least one sample of some group that
    contains model 1 and is allowed for the given output."""
    mask = groups.highfi_mask(output)
    if not np.any(mask):
        return False
    return bool(budget >= np.min(groups.group_costs[mask]))
