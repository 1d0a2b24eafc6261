"""Resolution of coupled channel groups across a graph.

Channels that must share one pruning decision are discovered with a
union-find over every individual (node, side, port, channel) instance:

* wires tie a consumer input channel to its producer output channel;
* channel-transparent kinds (batchnorm, activation, pooling, quantizers,
  per-channel scales, constant shifts) tie input to output per channel;
* ``add``/``mul`` tie all operand channels and the result channel together
  (residual and gating coupling);
* ``concat`` maps each input segment onto the corresponding output range;
* ``split`` maps each output half onto the producer sub-range;
* ``conv``/``linear`` decouple (the weight matrix mixes channels).

Pyramid-pooling fan-in replication, gated-residual ties, and scaled-residual
ties all emerge from these rules. Classes touching the network input, any
graph output, or a protected node (the detection head) form protected groups
that admit only the empty removal set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroupError
from .graph import CHANNEL_TRANSPARENT, Graph, infer_shapes

Instance = tuple[str, str, int, int]  # (node_id, "in"|"out", port, channel)


@dataclass(frozen=True)
class ChannelSlot:
    """A contiguous channel range on one port that belongs to a group."""
    node: str
    side: str          # "in" | "out"
    port: int
    offset: int
    length: int


@dataclass
class ChannelGroup:
    gid: str
    length: int
    protected: bool
    kind: str          # plain | residual | concat-segment | split-half | sppf-replicated
    classes: list      # per local index: sorted tuple of member Instances
    slots: list        # list[ChannelSlot], derived contiguous runs

    def __len__(self):
        return self.length


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _enumerate_instances(graph: Graph, shapes):
    """Assign a dense integer to every channel instance, in topo order."""
    index: dict[Instance, int] = {}
    order: list[Instance] = []
    for nid in graph.topo_order():
        n = graph.node(nid)
        for i, (src, sp) in enumerate(n.inputs):
            c = shapes[(src, sp)][1]
            for ch in range(c):
                inst = (nid, "in", i, ch)
                index[inst] = len(order)
                order.append(inst)
        for p in range(n.n_out_ports()):
            c = shapes[(nid, p)][1]
            for ch in range(c):
                inst = (nid, "out", p, ch)
                index[inst] = len(order)
                order.append(inst)
    return index, order


def resolve_groups(graph: Graph, shapes=None) -> list[ChannelGroup]:
    """Partition every channel instance of the graph into coupled groups."""
    shapes = shapes or infer_shapes(graph)
    index, order = _enumerate_instances(graph, shapes)
    uf = _UnionFind(len(order))

    def join(a: Instance, b: Instance):
        uf.union(index[a], index[b])

    for nid in graph.topo_order():
        n = graph.node(nid)
        in_chans = [shapes[(src, sp)][1] for (src, sp) in n.inputs]
        # wires: consumer input channel == producer output channel
        for i, (src, sp) in enumerate(n.inputs):
            for ch in range(in_chans[i]):
                join((nid, "in", i, ch), (src, "out", sp, ch))
        if n.kind in ("conv", "linear", "input", "output"):
            continue  # decoupled or terminal
        if n.kind in CHANNEL_TRANSPARENT:
            for ch in range(in_chans[0]):
                join((nid, "in", 0, ch), (nid, "out", 0, ch))
        elif n.kind in ("add", "mul"):
            for ch in range(in_chans[0]):
                for i in range(1, len(n.inputs)):
                    join((nid, "in", 0, ch), (nid, "in", i, ch))
                join((nid, "in", 0, ch), (nid, "out", 0, ch))
        elif n.kind == "concat":
            off = 0
            for i, c in enumerate(in_chans):
                for ch in range(c):
                    join((nid, "in", i, ch), (nid, "out", 0, off + ch))
                off += c
        elif n.kind == "split":
            off = 0
            for p, size in enumerate(n.attrs["sizes"]):
                for ch in range(size):
                    join((nid, "out", p, ch), (nid, "in", 0, off + ch))
                off += size
        else:
            raise GroupError(f"no channel-coupling rule for kind {n.kind!r} (node {nid!r})")

    # collect classes
    members: dict[int, list[Instance]] = {}
    for inst, idx in index.items():
        members.setdefault(uf.find(idx), []).append(inst)
    classes = [tuple(sorted(v)) for v in members.values()]

    # protection: network input, any graph output, and protected (head) nodes
    def class_protected(cls) -> bool:
        for (n_id, _, _, _) in cls:
            node = graph.node(n_id)
            if node.protected or node.kind in ("input", "output"):
                return True
        return False

    # bucket classes whose port signatures match into aligned groups
    buckets: dict[tuple, list] = {}
    for cls in classes:
        sig = tuple(sorted({(n, s, p) for (n, s, p, _) in cls}))
        buckets.setdefault(sig, []).append(cls)

    groups = []
    for sig, bucket in buckets.items():
        bucket.sort(key=lambda cls: cls[0])  # smallest member orders local indices
        protected = any(class_protected(cls) for cls in bucket)
        slots = _derive_slots(bucket)
        kind = _group_kind(graph, sig, bucket, slots)
        groups.append((bucket[0][0], ChannelGroup(
            gid="", length=len(bucket), protected=protected, kind=kind,
            classes=bucket, slots=slots)))

    groups.sort(key=lambda t: t[0])
    out = []
    for i, (anchor, g) in enumerate(groups):
        g.gid = f"g{i:03d}.{anchor[0]}"
        out.append(g)
    return out


def _derive_slots(bucket) -> list[ChannelSlot]:
    """Contiguous channel runs per (node, side, port) across the whole group."""
    per_port: dict[tuple, list[int]] = {}
    for cls in bucket:
        for (n, s, p, ch) in cls:
            per_port.setdefault((n, s, p), []).append(ch)
    slots = []
    for (n, s, p), chans in sorted(per_port.items()):
        chans.sort()
        start = prev = chans[0]
        for ch in chans[1:]:
            if ch == prev + 1:
                prev = ch
                continue
            slots.append(ChannelSlot(n, s, p, start, prev - start + 1))
            start = prev = ch
        slots.append(ChannelSlot(n, s, p, start, prev - start + 1))
    return slots


def _group_kind(graph: Graph, sig, bucket, slots) -> str:
    counts_per_class = {}
    for (n, s, p, _) in bucket[0]:
        counts_per_class[(n, s, p)] = counts_per_class.get((n, s, p), 0) + 1
    if any(c >= 2 for c in counts_per_class.values()):
        return "sppf-replicated"
    kinds = {graph.node(n).kind for (n, _, _) in sig}
    if "add" in kinds or "mul" in kinds:
        return "residual"
    if any(graph.node(n).kind == "split" and s == "out" for (n, s, _) in sig):
        return "split-half"
    for slot in slots:
        if slot.side == "in" and slot.offset > 0 and graph.node(slot.node).kind in ("conv", "linear"):
            return "concat-segment"
    return "plain"


def find_group(groups: list[ChannelGroup], gid: str) -> ChannelGroup:
    for g in groups:
        if g.gid == gid:
            return g
    raise GroupError(f"no group with id {gid!r}")


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupCost:
    params_per_channel: int
    flops_per_channel: int


def group_cost(graph: Graph, group: ChannelGroup, shapes=None) -> GroupCost:
    """Marginal cost of removing one channel of the group from the dense graph.

    Parameter terms: producer filter row (+bias), per-channel normalization
    and scale entries, and each consumer's input column — counted with the
    replication multiplicity the class actually has. FLOP terms cover the
    conv/linear contributions at the declared input size.
    """
    shapes = shapes or infer_shapes(graph)
    params = np.zeros(len(group.classes), dtype=np.int64)
    flops = np.zeros(len(group.classes), dtype=np.int64)
    for li, cls in enumerate(group.classes):
        seen_nodes = set()
        for (nid, side, port, ch) in cls:
            n = graph.node(nid)
            if n.kind == "conv":
                w = n.params["weight"]
                cout, cin, kh, kw = w.shape
                ho, wo = shapes[(nid, 0)][2], shapes[(nid, 0)][3]
                if side == "out":
                    params[li] += cin * kh * kw + (1 if "bias" in n.params else 0)
                    flops[li] += 2 * cin * kh * kw * ho * wo + (ho * wo if "bias" in n.params else 0)
                else:
                    params[li] += cout * kh * kw
                    flops[li] += 2 * cout * kh * kw * ho * wo
            elif n.kind == "linear":
                w = n.params["weight"]
                if side == "out":
                    params[li] += w.shape[1] + (1 if "bias" in n.params else 0)
                    flops[li] += 2 * w.shape[1] + (1 if "bias" in n.params else 0)
                else:
                    params[li] += w.shape[0]
                    flops[li] += 2 * w.shape[0]
            elif n.kind == "batchnorm" and nid not in seen_nodes:
                params[li] += 2
                seen_nodes.add(nid)
            elif n.kind == "scale" and nid not in seen_nodes:
                params[li] += 1
                seen_nodes.add(nid)
    if len(set(params.tolist())) > 1 or len(set(flops.tolist())) > 1:
        raise GroupError(f"group {group.gid} has non-uniform per-channel cost")
    return GroupCost(int(params[0]), int(flops[0]))


def predict_removed_params(graph: Graph, groups: list[ChannelGroup], removals: dict) -> int:
    """Exact parameter count removed by a plan, via per-node surviving widths.

    Independent per-group marginal costs overcount when a conv loses rows and
    columns in the same plan, so the prediction works from surviving channel
    counts per port instead.
    """
    removed_classes = set()
    for gid, idxs in removals.items():
        g = find_group(groups, gid)
        for i in idxs:
            removed_classes.add(g.classes[i])
    member_of: dict[Instance, tuple] = {}
    for g in groups:
        for cls in g.classes:
            for inst in cls:
                member_of[inst] = cls

    def kept(nid, side, port, total):
        return sum(1 for ch in range(total)
                   if member_of[(nid, side, port, ch)] not in removed_classes)

    removed = 0
    for n in graph.nodes.values():
        if n.kind == "conv":
            w = n.params["weight"]
            cout, cin, kh, kw = w.shape
            ko = kept(n.id, "out", 0, cout)
            ki = kept(n.id, "in", 0, cin)
            removed += (cout * cin - ko * ki) * kh * kw
            if "bias" in n.params:
                removed += cout - ko
        elif n.kind == "linear":
            w = n.params["weight"]
            out_f, in_f = w.shape
            ko = kept(n.id, "out", 0, out_f)
            ki = kept(n.id, "in", 0, in_f)
            removed += out_f * in_f - ko * ki
            if "bias" in n.params:
                removed += out_f - ko
        elif n.kind == "batchnorm":
            c = len(n.params["gamma"])
            removed += 2 * (c - kept(n.id, "out", 0, c))
        elif n.kind == "scale":
            c = len(n.params["scale"])
            removed += c - kept(n.id, "out", 0, c)
    return removed


# ---------------------------------------------------------------------------
# debug dump
# ---------------------------------------------------------------------------

def format_groups(graph: Graph, groups: list[ChannelGroup] | None = None) -> str:
    """Human-readable group listing for inspection and golden tests."""
    groups = groups or resolve_groups(graph)
    shapes = infer_shapes(graph)
    lines = []
    for g in groups:
        cost = group_cost(graph, g, shapes)
        flag = "protected" if g.protected else "free"
        lines.append(f"{g.gid} kind={g.kind} len={g.length} {flag} "
                     f"params/ch={cost.params_per_channel}")
        for s in g.slots:
            lines.append(f"  {s.node} {s.side}{s.port} [{s.offset}:{s.offset + s.length})")
    return "\n".join(lines) + "\n"
