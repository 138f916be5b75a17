"""
Pairwise decomposition, planning, caching and emulated execution of complex einsum contractions.

Operand ids: inputs are 0..k-1, the result of step s gets id k+s. A step keeps exactly the labels
still needed afterwards (by the output or by any operand not yet consumed).

Peak accounting: while a step runs, the live set is every intermediate not yet consumed (the step's
own intermediate operands included) plus the step result unless it is the final output. Inputs are
caller-owned and never counted.
"""

import itertools
import logging
import string
import threading
from dataclasses import dataclass, field

import numpy as np
import opt_einsum as oe

from precision_sim import NonFiniteError, add, complex_multiply, round_complex_array
from tree import Tree

logger = logging.getLogger(__name__)

MAX_OPTIMAL_OPERANDS = 8
MAX_ENUMERATION_NODES = 2_000_000
DEFAULT_HYBRID_THRESHOLD = 3


@dataclass(frozen=True)
class EinsumSpec:
    equation: str
    inputs: tuple  # label string per operand
    output: str
    operand_shapes: tuple
    dims: tuple  # sorted (label, dim) pairs

    @property
    def dim(self):
        return dict(self.dims)

    def size(self, labels):
        dim = self.dim
        return int(np.prod([dim[c] for c in labels], dtype=np.int64))


def parse(equation, shapes):
    equation = equation.replace(" ", "")
    if equation.count("->") != 1:
        raise ValueError("malformed equation %r: expected exactly one '->'" % equation)
    lhs, output = equation.split("->")
    inputs = lhs.split(",")
    allowed = set(string.ascii_lowercase)
    for term in inputs + [output]:
        bad = set(term) - allowed
        if bad:
            raise ValueError("malformed equation %r: labels must be lowercase letters, got %r"
                             % (equation, "".join(sorted(bad))))
    if lhs == "":
        raise ValueError("malformed equation %r: no operands" % equation)
    for term in inputs:
        if len(set(term)) != len(term):
            raise ValueError("operand %r repeats a label" % term)
    if len(set(output)) != len(output):
        raise ValueError("output %r repeats a label" % output)
    unbound = set(output) - set(lhs.replace(",", ""))
    if unbound:
        raise ValueError("output label %r does not appear in any operand" % "".join(sorted(unbound)))
    shapes = [tuple(int(x) for x in s) for s in shapes]
    if len(shapes) != len(inputs):
        raise ValueError("%i operands in %r but %i shapes given" % (len(inputs), equation, len(shapes)))
    dims = {}
    for term, shape in zip(inputs, shapes):
        if len(term) != len(shape):
            raise ValueError("operand %r has %i labels but shape %s" % (term, len(term), shape))
        for label, dim in zip(term, shape):
            if dim < 1:
                raise ValueError("dimension of %r must be positive, got %i" % (label, dim))
            if dims.setdefault(label, dim) != dim:
                raise ValueError("label %r has inconsistent dimensions %i and %i" % (label, dims[label], dim))
    return EinsumSpec(equation, tuple(inputs), output, tuple(shapes), tuple(sorted(dims.items())))


@dataclass(frozen=True)
class LoweringMode:
    """
    allreal   (A) every tensor viewed as real up front, one monolithic contraction
    pairwise  (B) view-as-real around every pairwise step
    hybrid    (C) view-as-real only when a step's result rank >= threshold
    """
    kind: str = "hybrid"
    threshold: int = DEFAULT_HYBRID_THRESHOLD

    def __post_init__(self):
        if self.kind not in ("allreal", "pairwise", "hybrid"):
            raise ValueError('Unknown lowering mode %r. Options are: "allreal", "pairwise", "hybrid[:k]"' % self.kind)
        if self.kind == "hybrid" and self.threshold < 1:
            raise ValueError("hybrid threshold must be >= 1, got %i" % self.threshold)

    @classmethod
    def parse(cls, token):
        token = token.strip().lower()
        if token.startswith("hybrid:"):
            try:
                return cls("hybrid", int(token.split(":", 1)[1]))
            except ValueError:
                raise ValueError("invalid hybrid threshold in %r" % token)
        return cls(token)

    @property
    def token(self):
        return "hybrid:%i" % self.threshold if self.kind == "hybrid" else self.kind

    def lowers(self, result_rank):
        return self.kind != "hybrid" or result_rank >= self.threshold


@dataclass(frozen=True)
class ContractionStep:
    left: int
    right: int
    equation: str
    shape: tuple
    elems: int
    flops: int


@dataclass(frozen=True)
class EinsumPlan:
    spec: EinsumSpec
    steps: tuple
    peak_intermediate_elems: int
    total_flops: int
    strategy: str = "greedy"
    cache_key: tuple = None

    def peak_intermediate_bytes(self, itemsize):
        return self.peak_intermediate_elems * itemsize

    def to_dict(self, mode=None):
        return {"equation": self.spec.equation,
                "shapes": [list(s) for s in self.spec.operand_shapes],
                "steps": [{"left": s.left, "right": s.right, "equation": s.equation, "shape": list(s.shape),
                           "elems": s.elems, "flops": s.flops} for s in self.steps],
                "peak_elems": self.peak_intermediate_elems,
                "flops": self.total_flops,
                "mode": mode.token if mode is not None else None}

    def format(self):
        lines = ["%s plan for %s" % (self.strategy, self.spec.equation)]
        for i, s in enumerate(self.steps):
            lines.append("  step %i: (%i, %i) %-24s shape=%s elems=%i flops=%i"
                         % (i, s.left, s.right, s.equation, "x".join(str(x) for x in s.shape) or "()",
                            s.elems, s.flops))
        lines.append("  peak_intermediate_elems=%i total_flops=%i" % (self.peak_intermediate_elems, self.total_flops))
        return "\n".join(lines)


def _step(spec, operands, left, right):
    """ContractionStep for contracting live operands `left` and `right` (a dict id -> labels)."""
    a, b = operands[left], operands[right]
    rest = "".join(labels for i, labels in operands.items() if i not in (left, right))
    final = len(operands) == 2
    if final:
        result = spec.output
    else:
        needed = set(rest) | set(spec.output)
        result = "".join(dict.fromkeys(c for c in a + b if c in needed))
    union = set(a) | set(b)
    summed = union - set(result)
    flops = spec.size(union) * (2 if summed else 1)
    shape = tuple(spec.dim[c] for c in result)
    return ContractionStep(left, right, "%s,%s->%s" % (a, b, result), shape, spec.size(result), flops), result


def _make_plan(spec, steps, strategy):
    k = len(spec.inputs)
    elems = {}
    live = set()
    peak = 0
    for s, step in enumerate(steps):
        final = s == len(steps) - 1
        snapshot = sum(elems[i] for i in live) + (0 if final else step.elems)
        peak = max(peak, snapshot)
        live -= {step.left, step.right}
        if not final:
            elems[k + s] = step.elems
            live.add(k + s)
    return EinsumPlan(spec, tuple(steps), int(peak), int(sum(s.flops for s in steps)), strategy)


def _check_plannable(spec):
    if len(spec.inputs) < 2:
        raise ValueError("planning needs at least 2 operands, %r has %i" % (spec.equation, len(spec.inputs)))


def plan_greedy(spec):
    """
    Repeatedly contracts the pair whose result has the fewest elements; ties go to fewer step flops,
    then to the lowest (left, right) id pair.
    """
    _check_plannable(spec)
    operands = dict(enumerate(spec.inputs))
    next_id = len(spec.inputs)
    steps = []
    while len(operands) > 1:
        best = None
        for left, right in itertools.combinations(sorted(operands), 2):
            step, result = _step(spec, operands, left, right)
            key = (step.elems, step.flops, left, right)
            if best is None or key < best[0]:
                best = (key, step, result)
        _, step, result = best
        logger.debug("greedy step %i: %s -> %i elems", len(steps), step.equation, step.elems)
        steps.append(step)
        del operands[step.left], operands[step.right]
        operands[next_id] = result
        next_id += 1
    return _make_plan(spec, steps, "greedy")


def _subset_labels(spec, mask):
    """Labels of the intermediate that contracts the operands in the bit set `mask`."""
    k = len(spec.inputs)
    if mask == (1 << k) - 1:
        return spec.output
    inside = "".join(spec.inputs[i] for i in range(k) if mask >> i & 1)
    needed = set("".join(spec.inputs[i] for i in range(k) if not mask >> i & 1)) | set(spec.output)
    return "".join(dict.fromkeys(c for c in inside if c in needed))


def plan_flop_optimal(spec):
    """
    Minimum total flops over all pairwise orders, under the same step cost as plan_greedy. Dynamic
    programming over operand subsets; among equal-flop trees the one with the fewest intermediate
    elements wins, then the first found. Steps run depth-first, the subtree holding the lower operand
    id first.
    """
    _check_plannable(spec)
    k = len(spec.inputs)
    if k > MAX_OPTIMAL_OPERANDS:
        raise ValueError("FLOP-optimal search is limited to %i operands, %r has %i"
                         % (MAX_OPTIMAL_OPERANDS, spec.equation, k))
    full = (1 << k) - 1
    labels = {mask: _subset_labels(spec, mask) for mask in range(1, full + 1)}
    labels.update({1 << i: term for i, term in enumerate(spec.inputs)})
    best = {1 << i: (0, 0, None) for i in range(k)}  # mask -> (flops, intermediate elems, split)
    for mask in sorted(range(1, full + 1), key=lambda x: bin(x).count("1")):
        if mask in best:
            continue
        low = mask & -mask
        rest = mask ^ low
        result = labels[mask]
        own = 0 if mask == full else spec.size(result)
        sub = rest
        while True:
            a, b = low | sub, rest ^ sub
            if b:
                union = set(labels[a]) | set(labels[b])
                flops = spec.size(union) * (2 if union - set(result) else 1)
                key = (best[a][0] + best[b][0] + flops, best[a][1] + best[b][1] + own)
                if mask not in best or key < best[mask][:2]:
                    best[mask] = key + ((a, b),)
            if sub == 0:
                break
            sub = (sub - 1) & rest

    operands = dict(enumerate(spec.inputs))
    steps = []

    def build(mask):
        split = best[mask][2]
        if split is None:
            return mask.bit_length() - 1
        left, right = sorted((build(split[0]), build(split[1])))
        step, result = _step(spec, operands, left, right)
        steps.append(step)
        del operands[left], operands[right]
        operands[k + len(steps) - 1] = result
        return k + len(steps) - 1

    build(full)
    logger.debug("flop-optimal plan of %s: %i flops", spec.equation, best[full][0])
    return _make_plan(spec, steps, "flop_optimal")


def enumerate_plans(spec, greedy_reachable=False):
    """
    Every pairwise contraction order, as plans. With greedy_reachable only the orders whose every step
    is a minimum-result-size choice (greedy with all ties explored).
    """
    _check_plannable(spec)
    k = len(spec.inputs)

    def expand(node):
        operands = node.data["operands"]
        if len(operands) == 1:
            return []
        candidates = [_step(spec, operands, left, right) for left, right in itertools.combinations(sorted(operands), 2)]
        if greedy_reachable:
            smallest = min(step.elems for step, _ in candidates)
            candidates = [(step, result) for step, result in candidates if step.elems == smallest]
        children = []
        for step, result in candidates:
            rest = {i: labels for i, labels in operands.items() if i not in (step.left, step.right)}
            rest[node.data["next_id"]] = result
            children.append({"step": step, "operands": rest, "next_id": node.data["next_id"] + 1})
        return children

    tree = Tree({"step": None, "operands": dict(enumerate(spec.inputs)), "next_id": k})
    tree.grow(expand, max_nodes=MAX_ENUMERATION_NODES)
    plans = []
    for leaf in tree.leaves():
        steps = [data["step"] for data in tree.extract_trajectory(leaf)[1:]]
        plans.append(_make_plan(spec, steps, "enumerated"))
    logger.debug("enumerated %i orders of %s (%i tree nodes)", len(plans), spec.equation, len(tree))
    return plans


@dataclass
class PlanCache:
    plans: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __len__(self):
        return len(self.plans)


def cache_key(spec, sys, mode):
    return (spec.equation, spec.operand_shapes, sys.token, mode.token)


def cache_get_or_plan(cache, spec, sys, mode, planner=plan_greedy):
    key = cache_key(spec, sys, mode)
    plan = cache.plans.get(key)
    if plan is not None:
        with cache._lock:
            cache.hits += 1
        return plan
    logger.debug("plan cache miss for %s", key)
    plan = planner(spec)
    plan = EinsumPlan(plan.spec, plan.steps, plan.peak_intermediate_elems, plan.total_flops, plan.strategy, key)
    with cache._lock:
        cache.misses += 1
        return cache.plans.setdefault(key, plan)


def reference_contract(spec, operands):
    """Single-shot exact contraction, ordered by opt_einsum."""
    return oe.contract(spec.equation, *[np.asarray(op, dtype=np.complex128) for op in operands], optimize="auto")


def _part_signs(k):
    """
    (2,)*k + (2,) tensor S with prod_t (x_t^re + i x_t^im) = sum_p S[p, z] prod_t x_t^{p_t} in part z.
    """
    S = np.zeros((2,) * (k + 1))
    for parts in itertools.product((0, 1), repeat=k):
        power = sum(parts) % 4  # i^power
        S[parts + ((0,) if power in (0, 2) else (1,))] = 1.0 if power in (0, 1) else -1.0
    return S


def _allreal_exact(spec, operands):
    k = len(operands)
    if k > 25:
        raise ValueError("view-as-real contraction supports at most 25 operands")
    parts = string.ascii_uppercase[:k]
    terms = ["%s%s" % (labels, p) for labels, p in zip(spec.inputs, parts)]
    eq = "%s,%s->%sZ" % (",".join(terms), parts + "Z", spec.output)
    stacked = [np.stack((op.real, op.imag), axis=-1) for op in operands]
    out = np.einsum(eq, *stacked, _part_signs(k))
    return out[..., 0] + 1j * out[..., 1]


def _lowered_pair(equation, a, b):
    return (np.einsum(equation, a.real, b.real) - np.einsum(equation, a.imag, b.imag)) + \
        1j * (np.einsum(equation, a.real, b.imag) + np.einsum(equation, a.imag, b.real))


def _align(op, labels, fixed, output):
    """Slice `op` at the fixed summed labels and broadcast it against the output label order."""
    sliced = op[tuple(fixed.get(c, slice(None)) for c in labels)]
    kept = [c for c in labels if c not in fixed]
    order = sorted(kept, key=output.index)
    sliced = np.transpose(sliced, [kept.index(c) for c in order])
    return sliced.reshape([sliced.shape[order.index(c)] if c in order else 1 for c in output])


def _quantized_einsum(equation, operands, dims, sys, lowered):
    """
    Round-after-operation contraction: for each assignment of the summed labels (lexicographic order)
    the operands are multiplied left to right and the product is accumulated, every result rounded.
    """
    lhs, output = equation.split("->")
    inputs = lhs.split(",")
    summed = sorted(set("".join(inputs)) - set(output))
    acc = np.zeros(tuple(dims[c] for c in output), dtype=np.complex128)
    for values in itertools.product(*[range(dims[c]) for c in summed]):
        fixed = dict(zip(summed, values))
        term = None
        for labels, op in zip(inputs, operands):
            piece = _align(op, labels, fixed, output)
            term = piece if term is None else complex_multiply(sys, term, piece, lowered)
        acc = add(sys, acc, np.broadcast_to(term, acc.shape))
    return acc


def execute(plan, operands, sys, mode):
    """
    Runs `plan` on complex operands. Exact systems reproduce the reference contraction for every
    lowering mode; other systems round every multiply and accumulate.
    """
    spec = plan.spec
    if len(operands) != len(spec.inputs):
        raise ValueError("plan expects %i operands, got %i" % (len(spec.inputs), len(operands)))
    operands = [np.asarray(op, dtype=np.complex128) for op in operands]
    for i, (op, shape) in enumerate(zip(operands, spec.operand_shapes)):
        if op.shape != shape:
            raise ValueError("operand %i has shape %s, plan expects %s" % (i, op.shape, shape))
        if not np.all(np.isfinite(op)):
            raise ValueError("operand %i is not finite" % i)
    if not sys.is_exact:
        operands = [round_complex_array(sys, op) for op in operands]
        if not all(np.all(np.isfinite(op)) for op in operands):
            raise NonFiniteError("contraction", step=0)

    if mode.kind == "allreal":
        if sys.is_exact:
            return _allreal_exact(spec, operands)
        out = _quantized_einsum(spec.equation, operands, spec.dim, sys, lowered=True)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("contraction", step=0)
        return out

    live = dict(enumerate(operands))
    k = len(operands)
    for s, step in enumerate(plan.steps):
        a, b = live.pop(step.left), live.pop(step.right)
        lowered = mode.lowers(len(step.shape))
        if sys.is_exact:
            out = _lowered_pair(step.equation, a, b) if lowered else np.einsum(step.equation, a, b)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                out = _quantized_einsum(step.equation, [a, b], spec.dim, sys, lowered)
            if not np.all(np.isfinite(out)):
                logger.debug("overflow in step %i (%s) under %s", s, step.equation, sys.token)
                raise NonFiniteError("contraction", step=s)
        live[k + s] = out
    (result,) = live.values()
    return result
