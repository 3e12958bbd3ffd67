"""Field-sensitive, context- and array-index-insensitive inclusion-based
pointer analysis over PIR.

Constraints follow the four classic inclusion forms (address-of, copy,
load, store) plus a field form for gep; gep with a dynamic index collapses
onto the element at offset zero.  Field identity is the accumulated
flattened scalar offset within an abstract object, which makes punned views
of the same bytes land on the same node.

The worklist solver builds the call graph on the fly: whenever an indirect
call site's pointer node gains a function, that function's formals are
bound to the site's actuals (when the function is in analysis scope) and
solving continues.  No arity or type filtering is applied.  solve_naive
recomputes the same fixpoint by exhaustive passes and exists purely as an
oracle for the worklist solver.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .ir import Program, iter_instrs, leaf_cells
from .parser import TypeInfo, analyze_program

FLAT = 8  # bytes per scalar leaf


# ---------------------------------------------------------------------------
# Nodes and constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Node:
    kind: str     # "var" | "gv" | "obj" | "fn"
    base: str     # var: function; gv/fn: the name; obj: allocation base
    name: str = ""  # var: register ("$ret" for the return node)
    field: int = 0  # obj: collapsed flat field index

    def render(self) -> str:
        if self.kind == "var":
            return f"{self.base}:{self.name}"
        if self.kind == "gv":
            return f"gv:{self.base}"
        if self.kind == "fn":
            return self.base
        suffix = f".f{self.field}" if self.field else ""
        return f"obj:{self.base}{suffix}"


def var(fn: str, reg: str) -> Node:
    return Node("var", fn, reg)


def gv(name: str) -> Node:
    return Node("gv", name)


def obj(base: str, field_: int = 0) -> Node:
    return Node("obj", base, field=field_)


def fn_node(name: str) -> Node:
    return Node("fn", name)


@dataclass(frozen=True)
class Constraint:
    kind: str          # "addr" | "copy" | "load" | "store" | "field"
    dst: Node
    src: Node
    offset: int = 0    # field only


@dataclass(frozen=True)
class IcallSite:
    site: str
    caller: str
    fp: Node
    args: tuple[Node, ...]
    dest: Node | None


@dataclass
class ConstraintGraph:
    program: Program
    scope: frozenset[str]
    constraints: list[Constraint]
    icall_sites: list[IcallSite]
    direct_edges: list[tuple[str, str]]   # (call site, target), calls + spawns
    types: TypeInfo

    def dump(self) -> dict:
        nodes = set()
        for c in self.constraints:
            nodes.add(c.dst)
            nodes.add(c.src)
        for s in self.icall_sites:
            nodes.add(s.fp)
        return {
            "scope": sorted(self.scope),
            "nodes": sorted(n.render() for n in nodes),
            "constraints": [
                {"kind": c.kind, "dst": c.dst.render(), "src": c.src.render(),
                 **({"offset": c.offset} if c.kind == "field" else {})}
                for c in self.constraints
            ],
            "icall_sites": [
                {"site": s.site, "fp": s.fp.render()} for s in self.icall_sites
            ],
            "direct_edges": sorted(self.direct_edges),
        }


# ---------------------------------------------------------------------------
# Constraint generation
# ---------------------------------------------------------------------------

def build_constraints(program: Program, scope: set[str] | frozenset[str],
                      include_global_inits: bool = True,
                      types: TypeInfo | None = None) -> ConstraintGraph:
    """Generate constraints from the instructions of in-scope functions.

    Bodies of out-of-scope functions contribute nothing, even if their names
    later enter points-to sets; that is how initialization-only code stays
    out of the processing-phase analysis.
    """
    unknown = set(scope) - set(program.function_map)
    if unknown:
        raise ValueError(f"unknown functions in scope: {sorted(unknown)}")
    if types is None:
        diags, types = analyze_program(program)
        if diags:
            raise ValueError(f"program failed validation: {diags[0]}")

    cons: list[Constraint] = []
    icalls: list[IcallSite] = []
    edges: list[tuple[str, str]] = []

    for gd in program.globals:
        cons.append(Constraint("addr", gv(gd.name), obj(f"@{gd.name}")))
        if include_global_inits and gd.init is not None:
            _ginit_constraints(program, gd, cons)

    def node_of(fname: str, op) -> Node:
        if op.kind == "reg":
            return var(fname, op.value)
        if op.kind == "glob":
            return gv(op.value)
        raise ValueError(f"unexpected operand {op}")

    for fname in sorted(scope):
        fn = program.function_map[fname]
        for iid, _, _, ins in iter_instrs(fn):
            op = ins.op
            ops = ins.operands
            if op in ("alloc", "malloc"):
                cons.append(Constraint("addr", var(fname, ins.dest), obj(iid)))
            elif op == "load":
                cons.append(Constraint("load", var(fname, ins.dest), node_of(fname, ops[0])))
            elif op == "store":
                cons.append(Constraint("store", node_of(fname, ops[1]), node_of(fname, ops[0])))
            elif op == "gep":
                if ops[1].kind == "field":
                    off = types.gep_offsets.get(iid, 0) // FLAT
                else:
                    off = 0  # array elements collapse onto the first
                cons.append(Constraint("field", var(fname, ins.dest),
                                       node_of(fname, ops[0]), off))
            elif op == "cast":
                cons.append(Constraint("copy", var(fname, ins.dest), node_of(fname, ops[0])))
            elif op == "funcaddr":
                cons.append(Constraint("addr", var(fname, ins.dest), fn_node(ops[0].value)))
            elif op in ("call", "spawn"):
                target = ops[0].value
                edges.append((iid, target))
                if target in scope:
                    callee = program.function_map[target]
                    for a, (pname, _) in zip(ops[1:], callee.params):
                        cons.append(Constraint("copy", var(target, pname), node_of(fname, a)))
                    if op == "call" and ins.dest is not None and callee.ret is not None:
                        cons.append(Constraint("copy", var(fname, ins.dest), var(target, "$ret")))
            elif op == "icall":
                dest = var(fname, ins.dest) if ins.dest is not None else None
                icalls.append(IcallSite(iid, fname, node_of(fname, ops[0]),
                                        tuple(node_of(fname, a) for a in ops[1:]), dest))
            elif op == "ret" and ops:
                cons.append(Constraint("copy", var(fname, "$ret"), node_of(fname, ops[0])))

    return ConstraintGraph(program, frozenset(scope), cons, icalls, edges, types)


def _ginit_constraints(program: Program, gd, cons: list[Constraint]) -> None:
    """Address-of facts for function/global references in an initializer.

    Cell identity uses collapsed offsets so array elements merge, matching
    the solver's field treatment.
    """
    leaves = leaf_cells(gd.type, program)
    flat_inits = _flatten_ginit(program, gd.type, gd.init)
    for cell, init in zip(leaves, flat_inits):
        if init is None or init.kind != "ref":
            continue
        target = obj(f"@{gd.name}", cell.collapsed // FLAT)
        if init.value in program.function_map:
            cons.append(Constraint("addr", target, fn_node(init.value)))
        else:
            cons.append(Constraint("addr", target, obj(f"@{init.value}")))


def _flatten_ginit(program: Program, t, gi) -> list:
    """Initializers per scalar leaf, in leaf_cells order (None = default)."""
    if t.kind in ("i64", "fnptr", "ptr"):
        return [gi]
    if gi is None or gi.kind != "agg":
        return [None] * len(leaf_cells(t, program))
    out: list = []
    if t.kind == "struct":
        sd = program.struct_map[t.struct_name]
        for e, (_, ft) in zip(gi.elems, sd.fields):
            out.extend(_flatten_ginit(program, ft, e))
    elif t.kind == "array":
        for e in gi.elems:
            out.extend(_flatten_ginit(program, t.elem, e))
    return out


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------

SeedFact = tuple[Node, Node]


@dataclass
class PtsSolution:
    pts: dict[Node, frozenset[Node]]
    call_graph: dict[str, frozenset[str]]       # every call site, direct + indirect
    icall_targets: dict[str, frozenset[str]]    # indirect sites only (the ECs)

    def pts_of(self, node: Node) -> frozenset[Node]:
        return self.pts.get(node, frozenset())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PtsSolution):
            return NotImplemented
        return (self.pts == other.pts and self.call_graph == other.call_graph
                and self.icall_targets == other.icall_targets)

    def dump(self) -> dict:
        return {
            "pts": {n.render(): sorted(m.render() for m in ms)
                    for n, ms in sorted(self.pts.items()) if ms},
            "call_graph": {s: sorted(ts) for s, ts in sorted(self.call_graph.items())},
        }


def _normalize(pts: dict[Node, set[Node]]) -> dict[Node, frozenset[Node]]:
    return {n: frozenset(ms) for n, ms in pts.items() if ms}


def _site_bindings(graph: ConstraintGraph, site: IcallSite, target: str) -> list[Constraint]:
    """Copy constraints binding an icall site to one resolved target."""
    out: list[Constraint] = []
    callee = graph.program.function_map.get(target)
    if callee is None or target not in graph.scope:
        return out
    for a, (pname, _) in zip(site.args, callee.params):
        out.append(Constraint("copy", var(target, pname), a))
    if site.dest is not None and callee.ret is not None:
        out.append(Constraint("copy", site.dest, var(target, "$ret")))
    return out


# ---------------------------------------------------------------------------
# Worklist solver
# ---------------------------------------------------------------------------

def solve_worklist(graph: ConstraintGraph, seeds: list[SeedFact] | None = None) -> PtsSolution:
    pts: dict[Node, set[Node]] = {}
    copy_out: dict[Node, list[Node]] = {}
    load_out: dict[Node, list[Node]] = {}
    store_in: dict[Node, list[Node]] = {}
    field_out: dict[Node, list[tuple[Node, int]]] = {}
    fp_sites: dict[Node, list[IcallSite]] = {}
    copy_edges: set[tuple[Node, Node]] = set()
    resolved: dict[str, set[str]] = {}
    pending: dict[Node, set[Node]] = {}
    work: deque[Node] = deque()
    queued: set[Node] = set()

    def sets(n: Node) -> set[Node]:
        s = pts.get(n)
        if s is None:
            s = set()
            pts[n] = s
        return s

    def enqueue(n: Node, members) -> None:
        new = set(members) - sets(n)
        if not new:
            return
        sets(n).update(new)
        pending.setdefault(n, set()).update(new)
        if n not in queued:
            queued.add(n)
            work.append(n)

    def add_copy(src: Node, dst: Node) -> None:
        if (src, dst) in copy_edges:
            return
        copy_edges.add((src, dst))
        copy_out.setdefault(src, []).append(dst)
        if pts.get(src):
            enqueue(dst, pts[src])

    for c in graph.constraints:
        if c.kind == "addr":
            enqueue(c.dst, {c.src})
        elif c.kind == "copy":
            add_copy(c.src, c.dst)
        elif c.kind == "load":
            load_out.setdefault(c.src, []).append(c.dst)
        elif c.kind == "store":
            store_in.setdefault(c.dst, []).append(c.src)
        elif c.kind == "field":
            field_out.setdefault(c.src, []).append((c.dst, c.offset))

    for site in graph.icall_sites:
        fp_sites.setdefault(site.fp, []).append(site)
        resolved[site.site] = set()

    for n, m in seeds or []:
        enqueue(n, {m})

    while work:
        n = work.popleft()
        queued.discard(n)
        delta = pending.pop(n, set())
        if not delta:
            continue
        for dst in copy_out.get(n, ()):
            enqueue(dst, delta)
        for dst, off in field_out.get(n, ()):
            shifted = {obj(m.base, m.field + off) for m in delta if m.kind == "obj"}
            if shifted:
                enqueue(dst, shifted)
        for dst in load_out.get(n, ()):
            for m in delta:
                if m.kind == "obj":
                    add_copy(m, dst)
        for src in store_in.get(n, ()):
            for m in delta:
                if m.kind == "obj":
                    add_copy(src, m)
        for site in fp_sites.get(n, ()):
            for m in delta:
                if m.kind == "fn" and m.base not in resolved[site.site]:
                    resolved[site.site].add(m.base)
                    for c in _site_bindings(graph, site, m.base):
                        add_copy(c.src, c.dst)

    call_graph: dict[str, set[str]] = {}
    for site_id, target in graph.direct_edges:
        call_graph.setdefault(site_id, set()).add(target)
    icall_targets = {s: frozenset(ts) for s, ts in resolved.items()}
    for site_id, ts in resolved.items():
        call_graph.setdefault(site_id, set()).update(ts)
    return PtsSolution(_normalize(pts),
                       {s: frozenset(ts) for s, ts in call_graph.items()},
                       icall_targets)


# ---------------------------------------------------------------------------
# Naive oracle solver
# ---------------------------------------------------------------------------

def solve_naive(graph: ConstraintGraph, seeds: list[SeedFact] | None = None) -> PtsSolution:
    """Same fixpoint as solve_worklist via exhaustive passes."""
    pts: dict[Node, set[Node]] = {}

    def sets(n: Node) -> set[Node]:
        return pts.setdefault(n, set())

    for n, m in seeds or []:
        sets(n).add(m)

    constraints = list(graph.constraints)
    resolved: dict[str, set[str]] = {s.site: set() for s in graph.icall_sites}

    changed = True
    while changed:
        changed = False
        for c in constraints:
            if c.kind == "addr":
                if c.src not in sets(c.dst):
                    sets(c.dst).add(c.src)
                    changed = True
            elif c.kind == "copy":
                before = len(sets(c.dst))
                sets(c.dst).update(sets(c.src))
                changed |= len(pts[c.dst]) != before
            elif c.kind == "load":
                for m in list(sets(c.src)):
                    if m.kind == "obj":
                        before = len(sets(c.dst))
                        sets(c.dst).update(sets(m))
                        changed |= len(pts[c.dst]) != before
            elif c.kind == "store":
                for m in list(sets(c.dst)):
                    if m.kind == "obj":
                        before = len(sets(m))
                        sets(m).update(sets(c.src))
                        changed |= len(pts[m]) != before
            elif c.kind == "field":
                shifted = {obj(m.base, m.field + c.offset)
                           for m in sets(c.src) if m.kind == "obj"}
                before = len(sets(c.dst))
                sets(c.dst).update(shifted)
                changed |= len(pts[c.dst]) != before
        for site in graph.icall_sites:
            for m in list(sets(site.fp)):
                if m.kind == "fn" and m.base not in resolved[site.site]:
                    resolved[site.site].add(m.base)
                    constraints.extend(_site_bindings(graph, site, m.base))
                    changed = True

    call_graph: dict[str, set[str]] = {}
    for site_id, target in graph.direct_edges:
        call_graph.setdefault(site_id, set()).add(target)
    for site_id, ts in resolved.items():
        call_graph.setdefault(site_id, set()).update(ts)
    return PtsSolution(_normalize(pts),
                       {s: frozenset(ts) for s, ts in call_graph.items()},
                       {s: frozenset(ts) for s, ts in resolved.items()})


def check_closure(graph: ConstraintGraph, solution: PtsSolution) -> bool:
    """True when re-applying every resolution rule to a solution adds nothing."""

    def get(n: Node) -> frozenset[Node]:
        return solution.pts.get(n, frozenset())

    constraints = list(graph.constraints)
    for site in graph.icall_sites:
        for t in sorted(solution.icall_targets.get(site.site, frozenset())):
            constraints.extend(_site_bindings(graph, site, t))
    for c in constraints:
        if c.kind == "addr":
            if c.src not in get(c.dst):
                return False
        elif c.kind == "copy":
            if not get(c.src) <= get(c.dst):
                return False
        elif c.kind == "load":
            for m in get(c.src):
                if m.kind == "obj" and not get(m) <= get(c.dst):
                    return False
        elif c.kind == "store":
            for m in get(c.dst):
                if m.kind == "obj" and not get(c.src) <= get(m):
                    return False
        elif c.kind == "field":
            shifted = {obj(m.base, m.field + c.offset)
                       for m in get(c.src) if m.kind == "obj"}
            if not shifted <= get(c.dst):
                return False
    for site in graph.icall_sites:
        fns = {m.base for m in get(site.fp) if m.kind == "fn"}
        if not fns <= set(solution.icall_targets.get(site.site, frozenset())):
            return False
    return True
