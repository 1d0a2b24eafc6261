"""Forward execution of a graph, optionally recording onto an autograd tape."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tape, Var
from .errors import GraphError, QuantError
from .graph import Graph

BN_MOMENTUM = 0.1  # running-statistics update rate in training mode


class RunState:
    """Mutable training-time storage for parameters and buffers.

    ``vars`` maps (node_id, param_name) to watched autograd variables;
    ``buffers`` maps (node_id, buffer_name) to plain arrays (batchnorm
    running statistics). Pure inference runs pass ``state=None`` and read
    arrays straight off the graph nodes.
    """

    def __init__(self, vars: dict, buffers: dict):
        self.vars = vars
        self.buffers = buffers


def _param(state: RunState | None, nid: str, name: str, node) -> Var:
    if state is not None and (nid, name) in state.vars:
        return state.vars[(nid, name)]
    return Var(node.params[name])


def _buffer(state: RunState | None, nid: str, name: str, node):
    if state is not None and (nid, name) in state.buffers:
        return state.buffers[(nid, name)]
    return node.params[name]


def run_graph(graph: Graph, x: np.ndarray, *, mode: str = "eval",
              tape: Tape | None = None, state: RunState | None = None,
              outputs=None, observers: dict | None = None) -> dict[str, Var]:
    """Evaluate the graph on a batch.

    Args:
        x: input batch matching the graph's declared layout.
        mode: "train" uses batch statistics in batchnorm and updates running
            buffers; "calibrate" uses batch statistics without touching the
            buffers (so observers see the distribution training will see);
            "eval" normalizes with stored statistics.
        tape: optional autograd tape for backward.
        state: training state; required for mode="train".
        outputs: restrict computation to these output node ids (demand-driven).
        observers: calibration observers keyed by quantizer node id; fed with
            absolute activations while a quantizer is in observe phase.

    Returns a dict mapping output node id to its Var.
    """
    if mode not in ("train", "eval", "calibrate"):
        raise GraphError(f"unknown execution mode {mode!r}")
    if mode == "train" and state is None:
        raise GraphError("training mode requires a RunState")
    wanted = list(outputs) if outputs is not None else graph.output_ids
    needed = graph.ancestors_of(wanted)
    values: dict[tuple[str, int], Var] = {}
    results: dict[str, Var] = {}

    for nid in graph.topo_order():
        if nid not in needed:
            continue
        n = graph.node(nid)
        ins = [values[ref] for ref in n.inputs]
        if n.kind == "input":
            out = Var(np.ascontiguousarray(x), stop_grad=True)
        elif n.kind == "output":
            out = ins[0]
            results[nid] = out
        elif n.kind == "conv":
            w = _param(state, nid, "weight", n)
            b = _param(state, nid, "bias", n) if "bias" in n.params else None
            out = ag.conv2d(tape, ins[0], w, b, n.attrs.get("stride", 1),
                            n.attrs.get("padding", 0))
        elif n.kind == "batchnorm":
            gamma = _param(state, nid, "gamma", n)
            beta = _param(state, nid, "beta", n)
            rm = _buffer(state, nid, "running_mean", n)
            rv = _buffer(state, nid, "running_var", n)
            out, bmean, bvar = ag.batchnorm(tape, ins[0], gamma, beta, rm, rv,
                                            n.attrs.get("eps", 1e-5), mode != "eval")
            if mode == "train":
                state.buffers[(nid, "running_mean")] = (
                    (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * bmean).astype(np.float32)
                state.buffers[(nid, "running_var")] = (
                    (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * bvar).astype(np.float32)
        elif n.kind == "activation":
            fn = n.attrs["fn"]
            if fn == "silu":
                out = ag.silu(tape, ins[0])
            elif fn == "sigmoid":
                out = ag.sigmoid(tape, ins[0])
            else:
                raise GraphError(f"unknown activation {fn!r} on node {nid!r}")
        elif n.kind == "maxpool":
            out = ag.maxpool2d(tape, ins[0], n.attrs["k"],
                               n.attrs.get("stride", n.attrs["k"]),
                               n.attrs.get("padding", 0))
        elif n.kind == "gap":
            out = ag.global_avg_pool(tape, ins[0])
        elif n.kind == "linear":
            w = _param(state, nid, "weight", n)
            b = _param(state, nid, "bias", n) if "bias" in n.params else None
            out = ag.linear(tape, ins[0], w, b)
        elif n.kind == "add":
            out = ins[0]
            for v in ins[1:]:
                out = ag.add(tape, out, v)
        elif n.kind == "mul":
            out = ins[0]
            for v in ins[1:]:
                out = ag.multiply(tape, out, v)
        elif n.kind == "addconst":
            out = ag.add_const(tape, ins[0], n.attrs["c"])
        elif n.kind == "concat":
            out = ag.concat_channels(tape, ins)
        elif n.kind == "split":
            pieces = ag.split_channels(tape, ins[0], n.attrs["sizes"])
            for p, piece in enumerate(pieces):
                values[(nid, p)] = piece
            continue
        elif n.kind == "scale":
            s = _param(state, nid, "scale", n)
            out = ag.scale_channels(tape, ins[0], s)
        elif n.kind == "fakequant":
            phase = n.attrs.get("phase", "disabled")
            if phase == "disabled":
                out = ins[0]
            elif phase == "observe":
                if observers is not None and nid in observers:
                    observers[nid].observe(ins[0].value)
                out = ins[0]
            elif phase == "active":
                amax = float(n.params["amax"][0])
                if amax <= 0:
                    raise QuantError(f"quantizer {nid!r} is active but uncalibrated")
                out = ag.qdq(tape, ins[0], amax / 127.0)
            else:
                raise QuantError(f"quantizer {nid!r} has unknown phase {phase!r}")
        else:
            raise GraphError(f"no executor rule for kind {n.kind!r} (node {nid!r})")
        values[(nid, 0)] = out
    return results


def forward_arrays(graph: Graph, x: np.ndarray, outputs=None) -> dict[str, np.ndarray]:
    """Pure inference; returns plain arrays keyed by output node id."""
    res = run_graph(graph, x, mode="eval", outputs=outputs)
    return {k: v.value for k, v in res.items()}
