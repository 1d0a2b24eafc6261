"""Channel importance scoring, selection, and slim-graph rebuilding.

Importance is the L1 norm of the producing filter row; groups coupled through
residual adds sum the scores of all their producer convolutions. Selection is
deterministic: lowest scores go first, ties keep the lower channel index. The
zero-embedding oracle builds a same-shape dense graph whose forward agrees
with the slim graph on every surviving channel, which is the executable form
of the consistency argument behind structured removal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .depgraph import ChannelGroup, find_group, resolve_groups
from .errors import GroupError, PlanError
from .graph import Graph, infer_shapes


@dataclass
class PrunePlan:
    """Per-group sorted removal index sets plus the requesting config."""
    removals: dict[str, tuple[int, ...]] = field(default_factory=dict)
    channel_fraction: float | None = None
    epoch_trigger: int | None = None


def l1_importance(graph: Graph, group: ChannelGroup) -> np.ndarray:
    """Sum of |w| over each producing filter row, accumulated across producers."""
    scores = np.zeros(group.length, dtype=np.float64)
    found = False
    for li, cls in enumerate(group.classes):
        for (nid, side, port, ch) in cls:
            n = graph.node(nid)
            if side != "out":
                continue
            if n.kind == "conv":
                scores[li] += np.abs(n.params["weight"][ch]).sum(dtype=np.float64)
                found = True
            elif n.kind == "linear":
                scores[li] += np.abs(n.params["weight"][ch]).sum(dtype=np.float64)
                found = True
    if not found:
        raise GroupError(f"group {group.gid} has no conv producer to score")
    return scores


def select_channels(scores, fraction: float, min_keep: int = 1) -> tuple[int, ...]:
    """Indices of the floor(fraction*L) lowest-scoring channels.

    Ties remove the higher index first so lower indices survive; the removal
    count is capped so at least ``min_keep`` channels remain.
    """
    if not (0.0 <= fraction < 1.0):
        raise PlanError(f"channel fraction must be in [0, 1), got {fraction}")
    scores = np.asarray(scores, dtype=np.float64)
    L = len(scores)
    m = min(int(np.floor(fraction * L)), L - min_keep)
    if m <= 0:
        return ()
    order = sorted(range(L), key=lambda i: (scores[i], -i))
    return tuple(sorted(order[:m]))


def build_plan(graph: Graph, fraction: float, groups=None, min_keep: int = 1,
               epoch_trigger: int | None = None) -> PrunePlan:
    """Uniform-fraction plan over every free group."""
    groups = groups or resolve_groups(graph)
    plan = PrunePlan(channel_fraction=fraction, epoch_trigger=epoch_trigger)
    for g in groups:
        if g.protected:
            continue
        removal = select_channels(l1_importance(graph, g), fraction, min_keep)
        if removal:
            plan.removals[g.gid] = removal
    return plan


def validate_plan(groups, plan: PrunePlan) -> None:
    for gid, idxs in plan.removals.items():
        try:
            g = find_group(groups, gid)
        except GroupError:
            raise PlanError(f"plan references stale group id {gid!r}") from None
        if g.protected and idxs:
            raise PlanError(f"plan removes channels from protected group {gid!r}")
        if len(set(idxs)) != len(idxs):
            raise PlanError(f"plan has duplicate indices for group {gid!r}")
        for i in idxs:
            if not (0 <= i < g.length):
                raise PlanError(
                    f"plan index {i} out of range [0, {g.length}) for group {gid!r}")
        if len(idxs) > g.length - 1:
            raise PlanError(f"plan would remove every channel of group {gid!r}")


def _removed_classes(groups, plan: PrunePlan) -> set:
    removed = set()
    for gid, idxs in plan.removals.items():
        g = find_group(groups, gid)
        for i in idxs:
            removed.add(g.classes[i])
    return removed


def _survivors_per_port(graph: Graph, groups, removed: set, shapes) -> dict:
    member_of = {}
    for g in groups:
        for cls in g.classes:
            for inst in cls:
                member_of[inst] = cls
    keep = {}
    for nid in graph.topo_order():
        n = graph.node(nid)
        for i, (src, sp) in enumerate(n.inputs):
            c = shapes[(src, sp)][1]
            keep[(nid, "in", i)] = [ch for ch in range(c)
                                    if member_of[(nid, "in", i, ch)] not in removed]
        for p in range(n.n_out_ports()):
            c = shapes[(nid, p)][1]
            keep[(nid, "out", p)] = [ch for ch in range(c)
                                     if member_of[(nid, "out", p, ch)] not in removed]
    return keep


def apply_prune(graph: Graph, plan: PrunePlan, groups=None) -> Graph:
    """Rebuild the graph with the planned channels removed everywhere.

    Producer filter rows, bias entries, normalization and scale entries, and
    every consumer's input columns are deleted consistently; surviving weights
    are copied bit-exactly. Protected (head) tensors are untouched.
    """
    groups = groups or resolve_groups(graph)
    validate_plan(groups, plan)
    shapes = infer_shapes(graph)
    removed = _removed_classes(groups, plan)
    keep = _survivors_per_port(graph, groups, removed, shapes)

    slim = graph.clone(copy_params=False)
    for nid, n in slim.nodes.items():
        if n.kind == "conv":
            rows = keep[(nid, "out", 0)]
            cols = keep[(nid, "in", 0)]
            n.params = dict(n.params)
            n.params["weight"] = np.ascontiguousarray(n.params["weight"][np.ix_(rows, cols)])
            if "bias" in n.params:
                n.params["bias"] = n.params["bias"][rows].copy()
        elif n.kind == "linear":
            rows = keep[(nid, "out", 0)]
            cols = keep[(nid, "in", 0)]
            n.params = dict(n.params)
            n.params["weight"] = np.ascontiguousarray(n.params["weight"][np.ix_(rows, cols)])
            if "bias" in n.params:
                n.params["bias"] = n.params["bias"][rows].copy()
        elif n.kind == "batchnorm":
            chans = keep[(nid, "out", 0)]
            n.params = {name: arr[chans].copy() for name, arr in n.params.items()}
        elif n.kind == "scale":
            chans = keep[(nid, "out", 0)]
            n.params = {"scale": n.params["scale"][chans].copy()}
        elif n.kind == "split":
            n.attrs = dict(n.attrs)
            n.attrs["sizes"] = [len(keep[(nid, "out", p)])
                                for p in range(len(n.attrs["sizes"]))]
        else:
            n.params = {name: arr.copy() for name, arr in n.params.items()}
    if plan.removals:
        slim.meta["stage"] = "pruned"
    try:
        infer_shapes(slim)
    except Exception as e:  # inconsistent rebuild is an internal invariant violation
        raise GroupError(f"post-prune shape inference failed: {e}") from e
    return slim


def zero_embed_oracle(graph: Graph, plan: PrunePlan, groups=None) -> Graph:
    """Same-shape dense graph with removed channels neutralized.

    Every consumer conv/linear input column at a removed index is zeroed;
    producer weights stay untouched. Restricted to surviving channels, its
    forward equals the slim graph's forward.
    """
    groups = groups or resolve_groups(graph)
    validate_plan(groups, plan)
    removed = _removed_classes(groups, plan)
    dense = graph.clone(copy_params=True)
    for cls in removed:
        for (nid, side, port, ch) in cls:
            if side != "in":
                continue
            n = dense.node(nid)
            if n.kind == "conv":
                n.params["weight"][:, ch] = 0.0
            elif n.kind == "linear":
                n.params["weight"][:, ch] = 0.0
    return dense


def achieved_ratio(dense_params: int, slim_params: int) -> float:
    """Fraction of trainable parameters removed: 1 - slim/dense."""
    if dense_params < 1 or slim_params < 1:
        raise PlanError("parameter counts must be >= 1")
    if slim_params > dense_params:
        raise PlanError(
            f"slim graph has more parameters ({slim_params}) than dense ({dense_params})")
    return 1.0 - slim_params / dense_params


def ratio_percent(dense_params: int, slim_params: int) -> float:
    """Achieved ratio as a percentage rounded to one decimal."""
    return round(100.0 * achieved_ratio(dense_params, slim_params), 1)


# ---------------------------------------------------------------------------
# plan sidecar file
# ---------------------------------------------------------------------------

def write_plan(plan: PrunePlan, path) -> None:
    lines = ["# slimgraph prune plan v1"]
    if plan.channel_fraction is not None:
        lines.append(f"fraction {plan.channel_fraction}")
    if plan.epoch_trigger is not None:
        lines.append(f"epoch {plan.epoch_trigger}")
    for gid in sorted(plan.removals):
        idxs = ",".join(str(i) for i in plan.removals[gid])
        lines.append(f"group {gid} remove {idxs}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_plan(path) -> PrunePlan:
    plan = PrunePlan()
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "fraction":
                plan.channel_fraction = float(parts[1])
            elif parts[0] == "epoch":
                plan.epoch_trigger = int(parts[1])
            elif parts[0] == "group":
                if len(parts) != 4 or parts[2] != "remove":
                    raise PlanError(f"malformed plan line: {line!r}")
                plan.removals[parts[1]] = tuple(int(x) for x in parts[3].split(","))
            else:
                raise PlanError(f"malformed plan line: {line!r}")
    return plan
