"""Reverse-mode automatic differentiation over a static tape of array ops.

A :class:`Tape` is built once (all shapes fixed at build time) and then re-run
with fresh input bindings, so the same graph serves training steps, golden
forward checks and finite-difference gradient verification.  All buffers are
64-bit floats; 32-bit is too coarse for central-difference checks at 1e-4
relative tolerance.

Stochastic inputs (reparameterization noise) must be drawn outside the tape
and bound like any other input.  That keeps repeated forwards bit-identical
and makes the pathwise gradient checked by :func:`grad_check` well defined.

The primitive set is deliberately closed: matmul, affine, tanh, sigmoid, exp,
log, square, elementwise add/sub/mul (plus vector-to-matrix-row broadcast),
scalar scale, sum, mean, concat and slice.  Every network and loss in this
package compiles to these and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class DiffcoreError(Exception):
    """Base class for tape engine failures."""


class ShapeError(DiffcoreError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(DiffcoreError):
    """A value buffer picked up a NaN or infinity."""


class TapeStateError(DiffcoreError):
    """Tape used out of order, e.g. backward before forward."""


class Param:
    """Named trainable tensor; ``grad`` always mirrors ``value``'s shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


class Node:
    """Handle to one tape entry.  Supports +, -, * sugar for graph building."""

    __slots__ = ("tape", "idx", "op", "parents", "shape", "meta", "name")

    def __init__(self, tape, idx, op, parents, shape, meta, name):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.shape = shape
        self.meta = meta
        self.name = name

    def __repr__(self) -> str:
        return f"Node#{self.idx}<{self.name}, shape={self.shape}>"

    # -- sugar -----------------------------------------------------------
    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.const(np.full(self.shape, float(other)))

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)


def _as_shape(shape) -> tuple:
    if shape is None:
        return ()
    if isinstance(shape, int):
        return (shape,)
    return tuple(int(s) for s in shape)


class Tape:
    """Static computation graph: ordered nodes + per-node value/adjoint buffers.

    Nodes are created via the builder methods below; creation order is a valid
    topological order because every op only references already-built nodes.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] | None = None
        self.adjoints: list[np.ndarray] | None = None
        self.check_finite = check_finite
        self._inputs: dict[str, Node] = {}
        self._params: dict[str, tuple[Node, Param]] = {}
        self._outputs: dict[str, Node] = {}
        self._bound: dict[str, np.ndarray] | None = None

    # -- leaves ------------------------------------------------------------
    def _new(self, op, parents, shape, meta=None, name=None) -> Node:
        idx = len(self.nodes)
        node = Node(self, idx, op, tuple(parents), _as_shape(shape),
                    meta or {}, name or f"{op}#{idx}")
        self.nodes.append(node)
        self.values = None  # graph changed; stale buffers must not be reused
        return node

    def input(self, name: str, shape) -> Node:
        if name in self._inputs:
            raise TapeStateError(f"duplicate input name {name!r}")
        node = self._new("input", (), shape, {"key": name}, name=name)
        self._inputs[name] = node
        return node

    def param(self, p: Param) -> Node:
        if p.name in self._params:
            raise TapeStateError(f"param {p.name!r} already on tape")
        node = self._new("param", (), p.value.shape, {"param": p}, name=p.name)
        self._params[p.name] = (node, p)
        return node

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._new("const", (), value.shape, {"value": value})

    # -- elementwise binary --------------------------------------------------
    def _binary_shape(self, op, a: Node, b: Node):
        # bcast: 0 same shape, 1 = b is a row vector, 2 = a is a row vector
        if a.shape == b.shape:
            return a.shape, 0
        if len(a.shape) == 2 and b.shape == (a.shape[1],):
            return a.shape, 1
        if len(b.shape) == 2 and a.shape == (b.shape[1],):
            return b.shape, 2
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                         f"(operands {a.name}, {b.name})")

    def add(self, a: Node, b: Node, name=None) -> Node:
        shape, bc = self._binary_shape("add", a, b)
        return self._new("add", (a, b), shape, {"bcast": bc}, name)

    def sub(self, a: Node, b: Node, name=None) -> Node:
        shape, bc = self._binary_shape("sub", a, b)
        return self._new("sub", (a, b), shape, {"bcast": bc}, name)

    def mul(self, a: Node, b: Node, name=None) -> Node:
        shape, bc = self._binary_shape("mul", a, b)
        return self._new("mul", (a, b), shape, {"bcast": bc}, name)

    def scale(self, a: Node, c: float, name=None) -> Node:
        return self._new("scale", (a,), a.shape, {"c": float(c)}, name)

    # -- linear ----------------------------------------------------------------
    def matmul(self, a: Node, b: Node, name=None) -> Node:
        if len(a.shape) == 2 and len(b.shape) == 2 and a.shape[1] == b.shape[0]:
            shape = (a.shape[0], b.shape[1])
        elif len(a.shape) == 1 and len(b.shape) == 2 and a.shape[0] == b.shape[0]:
            shape = (b.shape[1],)
        elif len(a.shape) == 2 and len(b.shape) == 1 and a.shape[1] == b.shape[0]:
            shape = (a.shape[0],)
        else:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape} "
                             f"(operands {a.name}, {b.name})")
        return self._new("matmul", (a, b), shape, None, name)

    def affine(self, x: Node, w: Node, b: Node, name=None) -> Node:
        """x @ w + b with the bias broadcast across matrix rows."""
        if len(x.shape) == 2 and len(w.shape) == 2 and x.shape[1] == w.shape[0]:
            shape = (x.shape[0], w.shape[1])
        elif len(x.shape) == 1 and len(w.shape) == 2 and x.shape[0] == w.shape[0]:
            shape = (w.shape[1],)
        else:
            raise ShapeError(f"affine: incompatible shapes {x.shape} @ {w.shape} "
                             f"(operands {x.name}, {w.name})")
        if b.shape != (shape[-1],):
            raise ShapeError(f"affine: bias shape {b.shape} != ({shape[-1]},) "
                             f"(operands {x.name}, {w.name}, {b.name})")
        return self._new("affine", (x, w, b), shape, None, name)

    # -- elementwise unary -------------------------------------------------------
    def _unary(self, op, a: Node, name=None) -> Node:
        return self._new(op, (a,), a.shape, None, name)

    def tanh(self, a, name=None):
        return self._unary("tanh", a, name)

    def sigmoid(self, a, name=None):
        return self._unary("sigmoid", a, name)

    def exp(self, a, name=None):
        return self._unary("exp", a, name)

    def log(self, a, name=None):
        return self._unary("log", a, name)

    def square(self, a, name=None):
        return self._unary("square", a, name)

    # -- reductions -----------------------------------------------------------
    def _reduce(self, op, a: Node, axis, name):
        if axis not in (None, 0, 1):
            raise ShapeError(f"{op}: axis must be None, 0 or 1, got {axis}")
        if axis is None or len(a.shape) <= 1:
            shape, axis = (), None
        elif axis == 0:
            shape = (a.shape[1],)
        else:
            shape = (a.shape[0],)
        return self._new(op, (a,), shape, {"axis": axis}, name)

    def sum(self, a: Node, axis=None, name=None) -> Node:
        return self._reduce("sum", a, axis, name)

    def mean(self, a: Node, axis=None, name=None) -> Node:
        return self._reduce("mean", a, axis, name)

    # -- structure --------------------------------------------------------------
    def concat(self, parts, axis: int = 1, name=None) -> Node:
        parts = list(parts)
        if not parts:
            raise ShapeError("concat: no operands")
        nd = len(parts[0].shape)
        if axis not in (0, 1) or axis >= nd:
            raise ShapeError(f"concat: bad axis {axis} for {nd}-d operands")
        other = 1 - axis if nd == 2 else None
        for p in parts[1:]:
            if len(p.shape) != nd or (other is not None and
                                      p.shape[other] != parts[0].shape[other]):
                raise ShapeError(f"concat: mismatched shapes "
                                 f"{[q.shape for q in parts]}")
        total = sum(p.shape[axis] for p in parts)
        if nd == 1:
            shape = (total,)
        else:
            shape = (total, parts[0].shape[1]) if axis == 0 else (parts[0].shape[0], total)
        sizes = [p.shape[axis] for p in parts]
        return self._new("concat", parts, shape, {"axis": axis, "sizes": sizes}, name)

    def slice(self, a: Node, start: int, stop: int, axis: int = 1, name=None) -> Node:
        nd = len(a.shape)
        if nd == 0 or axis >= nd or axis not in (0, 1):
            raise ShapeError(f"slice: bad axis {axis} for shape {a.shape}")
        if not (0 <= start < stop <= a.shape[axis]):
            raise ShapeError(f"slice: range [{start}:{stop}] out of bounds for "
                             f"shape {a.shape} axis {axis} (operand {a.name})")
        if nd == 1:
            shape = (stop - start,)
        else:
            shape = ((stop - start, a.shape[1]) if axis == 0
                     else (a.shape[0], stop - start))
        return self._new("slice", (a,), shape,
                         {"axis": axis, "start": start, "stop": stop}, name)

    # -- outputs ------------------------------------------------------------------
    def output(self, name: str, node: Node) -> Node:
        self._outputs[name] = node
        return node

    @property
    def output_names(self):
        return list(self._outputs)

    def node_of(self, output_name: str) -> Node:
        return self._outputs[output_name]

    @property
    def params(self) -> list[Param]:
        return [p for (_, p) in self._params.values()]


# -- evaluation ---------------------------------------------------------------

def _eval_node(node: Node, vals, bound):
    op, m, par = node.op, node.meta, node.parents
    if op == "input":
        return bound[m["key"]]
    if op == "param":
        return m["param"].value
    if op == "const":
        return m["value"]
    if op == "add" or op == "sub" or op == "mul":
        a, b = vals[par[0].idx], vals[par[1].idx]
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op == "scale":
        return vals[par[0].idx] * m["c"]
    if op == "matmul":
        return vals[par[0].idx] @ vals[par[1].idx]
    if op == "affine":
        x, w, b = (vals[p.idx] for p in par)
        return x @ w + b
    if op == "tanh":
        return np.tanh(vals[par[0].idx])
    if op == "sigmoid":
        return expit(vals[par[0].idx])
    if op == "exp":
        return np.exp(vals[par[0].idx])
    if op == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(vals[par[0].idx])
    if op == "square":
        x = vals[par[0].idx]
        return x * x
    if op == "sum":
        return np.sum(vals[par[0].idx], axis=m["axis"])
    if op == "mean":
        return np.mean(vals[par[0].idx], axis=m["axis"])
    if op == "concat":
        return np.concatenate([vals[p.idx] for p in par], axis=m["axis"])
    if op == "slice":
        x = vals[par[0].idx]
        sl = (slice(m["start"], m["stop"]) if m["axis"] == 0 or x.ndim == 1
              else (slice(None), slice(m["start"], m["stop"])))
        return np.ascontiguousarray(x[sl])
    raise DiffcoreError(f"unknown op {op!r}")


def forward(tape: Tape, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate every node given named input bindings; return named outputs.

    Raises :class:`ShapeError` on missing/extra/mis-shaped bindings and
    :class:`NonFiniteError` naming the first node whose value goes non-finite.
    """
    bound = {}
    for name, node in tape._inputs.items():
        if name not in inputs:
            raise ShapeError(f"input {name!r} not bound")
        v = np.asarray(inputs[name], dtype=np.float64)
        if v.shape != node.shape:
            raise ShapeError(f"input {name!r}: bound shape {v.shape} != "
                             f"declared {node.shape}")
        bound[name] = v
    extra = set(inputs) - set(tape._inputs)
    if extra:
        raise ShapeError(f"unknown input names {sorted(extra)}")

    vals: list = [None] * len(tape.nodes)
    for node in tape.nodes:
        v = _eval_node(node, vals, bound)
        if tape.check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite value in node {node.name} "
                                 f"(op {node.op})")
        vals[node.idx] = v
    tape.values = vals
    tape._bound = bound
    return {name: np.array(vals[n.idx]) for name, n in tape._outputs.items()}


def value_of(tape: Tape, node: Node) -> np.ndarray:
    if tape.values is None:
        raise TapeStateError("forward has not run")
    return tape.values[node.idx]


def _backprop_node(node: Node, g, vals, adj, touched):
    """Accumulate vector-Jacobian product of `node` into its parents."""
    op, m, par = node.op, node.meta, node.parents

    def acc(p: Node, contrib):
        adj[p.idx] += contrib
        touched[p.idx] = True

    def acc_bc(p: Node, contrib, is_vec):
        # row-broadcast vector parents collect the column sums
        acc(p, contrib.sum(axis=0) if is_vec else contrib)

    if op in ("input", "param", "const"):
        return
    if op == "add":
        bc = m["bcast"]
        acc_bc(par[0], g, bc == 2)
        acc_bc(par[1], g, bc == 1)
    elif op == "sub":
        bc = m["bcast"]
        acc_bc(par[0], g, bc == 2)
        acc_bc(par[1], -g, bc == 1)
    elif op == "mul":
        bc = m["bcast"]
        a, b = vals[par[0].idx], vals[par[1].idx]
        acc_bc(par[0], g * b, bc == 2)
        acc_bc(par[1], g * a, bc == 1)
    elif op == "scale":
        acc(par[0], g * m["c"])
    elif op == "matmul" or op == "affine":
        a, b = vals[par[0].idx], vals[par[1].idx]
        if a.ndim == 2 and b.ndim == 2:
            acc(par[0], g @ b.T)
            acc(par[1], a.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            acc(par[0], g @ b.T)
            acc(par[1], np.outer(a, g))
        else:  # (m,n) @ (n,)
            acc(par[0], np.outer(g, b))
            acc(par[1], a.T @ g)
        if op == "affine":
            acc(par[2], g.sum(axis=0) if g.ndim == 2 else g)
    elif op == "tanh":
        y = vals[node.idx]
        acc(par[0], g * (1.0 - y * y))
    elif op == "sigmoid":
        y = vals[node.idx]
        acc(par[0], g * y * (1.0 - y))
    elif op == "exp":
        acc(par[0], g * vals[node.idx])
    elif op == "log":
        acc(par[0], g / vals[par[0].idx])
    elif op == "square":
        acc(par[0], 2.0 * g * vals[par[0].idx])
    elif op == "sum" or op == "mean":
        x = vals[par[0].idx]
        n = (x.size if m["axis"] is None else x.shape[m["axis"]])
        gg = g / n if op == "mean" else g
        if m["axis"] == 1:
            adj[par[0].idx] += np.asarray(gg)[:, None]
        else:  # None broadcasts a scalar, 0 broadcasts a row
            adj[par[0].idx] += gg
        touched[par[0].idx] = True
    elif op == "concat":
        off = 0
        for p, size in zip(par, m["sizes"]):
            sl = (slice(off, off + size) if m["axis"] == 0 or g.ndim == 1
                  else (slice(None), slice(off, off + size)))
            acc(p, g[sl])
            off += size
    elif op == "slice":
        x = vals[par[0].idx]
        sl = (slice(m["start"], m["stop"]) if m["axis"] == 0 or x.ndim == 1
              else (slice(None), slice(m["start"], m["stop"])))
        adj[par[0].idx][sl] += g
        touched[par[0].idx] = True
    else:
        raise DiffcoreError(f"no vjp for op {op!r}")


def backward(tape: Tape, seed) -> dict[str, np.ndarray]:
    """Reverse pass from a scalar node; fills every Param's ``grad``.

    ``seed`` may be a Node or an output name.  Gradients accumulate
    additively across shared uses inside the graph; each call overwrites
    ``Param.grad`` with the fresh result.
    """
    if tape.values is None:
        raise TapeStateError("backward before forward")
    if isinstance(seed, str):
        seed = tape._outputs[seed]
    if seed.shape != ():
        raise TapeStateError(f"backward seed {seed.name} is not scalar "
                             f"(shape {seed.shape})")
    adj = [np.zeros(n.shape) for n in tape.nodes]
    touched = [False] * len(tape.nodes)
    adj[seed.idx] = np.ones(())
    touched[seed.idx] = True
    vals = tape.values
    for node in reversed(tape.nodes):
        if not touched[node.idx]:
            continue
        _backprop_node(node, adj[node.idx], vals, adj, touched)
    tape.adjoints = adj
    grads = {}
    for name, (node, p) in tape._params.items():
        p.grad = adj[node.idx].copy()
        grads[name] = p.grad
    return grads


# -- finite-difference oracle ------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: str
    tol: float
    epsilon: float
    entries_checked: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
                f"at {self.worst_param} (tol={self.tol:g}, eps={self.epsilon:g}, "
                f"{self.entries_checked} entries)")


def grad_check(tape: Tape, params=None, epsilon: float = 1e-5,
               tol: float = 1e-4, output: str | None = None,
               analytic_override: dict[str, np.ndarray] | None = None,
               ) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Uses the input bindings of the most recent forward.  An entry passes if
    its relative error is <= ``tol`` or its absolute error is <= 1e-8 (the
    near-zero fallback).  ``analytic_override`` substitutes the gradient of a
    named param, for fault-injection tests.
    """
    if tape._bound is None:
        raise TapeStateError("grad_check requires a previous forward (to fix "
                             "input bindings, including noise draws)")
    if output is None:
        scalars = [k for k, n in tape._outputs.items() if n.shape == ()]
        if len(scalars) != 1:
            raise TapeStateError("grad_check: specify output= (tape has "
                                 f"{len(scalars)} scalar outputs)")
        output = scalars[0]
    node = tape._outputs[output]
    if node.shape != ():
        raise TapeStateError(f"grad_check output {output!r} is not scalar")
    if params is None:
        params = tape.params

    bound = dict(tape._bound)
    f0 = forward(tape, bound)[output]
    f1 = forward(tape, bound)[output]
    if f0.tobytes() != f1.tobytes():
        raise TapeStateError("forward is not deterministic under fixed inputs; "
                             "draw all noise outside the tape and bind it")

    backward(tape, node)
    analytic = {p.name: p.grad.copy() for p in params}
    if analytic_override:
        analytic.update(analytic_override)

    max_rel, worst, checked = 0.0, "", 0
    passed = True
    for p in params:
        flat = p.value.reshape(-1)
        a = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = forward(tape, bound)[output]
            flat[i] = orig - epsilon
            fm = forward(tape, bound)[output]
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            err = abs(a[i] - num)
            denom = max(abs(a[i]), abs(num))
            rel = 0.0 if err <= 1e-8 else err / max(denom, 1e-300)
            checked += 1
            if rel > max_rel:
                max_rel, worst = rel, f"{p.name}[{i}]"
            if rel > tol:
                passed = False
    forward(tape, bound)  # leave value buffers consistent with param state
    return GradCheckReport(passed, max_rel, worst, tol, epsilon, checked)
