"""Code partitioning at the transition point.

Computes the set F of functions that may run during the processing phase:
seeded by function values found in live memory, by thread entry points, and
by the functions with live frames, then closed over direct calls, spawns,
address-taken functions, and the contents of accessible globals until a
fixed point.  Globals contribute their stored function values only once
something accessible references them; a global that nothing in the
processing phase can reach keeps its callbacks out of F entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

from .interp import FnVal, Machine, PtrVal
from .ir import iter_instrs


@dataclass
class PartitionResult:
    functions: frozenset[str]
    accessible_globals: frozenset[str]
    evidence: dict[str, str]   # function -> first reason it entered F

    def to_json(self) -> dict:
        return {
            "functions": sorted(self.functions),
            "accessible_globals": sorted(self.accessible_globals),
            "evidence": {f: self.evidence[f] for f in sorted(self.evidence)},
        }


def scan_memory_roots(state: Machine) -> tuple[set[str], set[str]]:
    """Function values and global references visible in live heap objects and
    live stack frames (stack slots and registers).

    Globals are deliberately not scanned here; their contents only count
    once the partition proves them accessible.
    """
    root_funcs: set[str] = set()
    root_globals: set[str] = set()

    def visit(value) -> None:
        if isinstance(value, FnVal):
            root_funcs.add(value.name)
        elif isinstance(value, PtrVal):
            target = state.objects.get(value.obj)
            if target is not None and target.kind == "global":
                root_globals.add(target.base[1:])

    for _, memobj in state.live_heap_objects():
        for v in memobj.cells.values():
            visit(v)
    for memobj in state.live_stack_objects():
        for v in memobj.cells.values():
            visit(v)
    for frame in state.frames:
        for v in frame.regs.values():
            visit(v)
    return root_funcs, root_globals


def _global_contents(state: Machine, name: str) -> tuple[set[str], set[str]]:
    """(function values, referenced globals) currently stored in a global."""
    fns: set[str] = set()
    gvs: set[str] = set()
    memobj = state.objects[state.globals[name]]
    for v in memobj.cells.values():
        if isinstance(v, FnVal):
            fns.add(v.name)
        elif isinstance(v, PtrVal):
            target = state.objects.get(v.obj)
            if target is not None and target.kind == "global":
                gvs.add(target.base[1:])
    return fns, gvs


def partition(state: Machine) -> PartitionResult:
    """Least fixed point of the processing-phase accessibility rules."""
    program = state.program
    evidence: dict[str, str] = {}
    funcs: set[str] = set()
    accessible: set[str] = set()

    def add_fn(name: str, reason: str) -> bool:
        if name in program.function_map and name not in funcs:
            funcs.add(name)
            evidence[name] = reason
            return True
        return False

    def add_global(name: str) -> bool:
        """Mark a global accessible, closing over global-to-global references
        and collecting the function values it currently holds."""
        if name in accessible:
            return False
        work = [name]
        grew = False
        while work:
            g = work.pop()
            if g in accessible:
                continue
            accessible.add(g)
            grew = True
            fns, gvs = _global_contents(state, g)
            for f in sorted(fns):
                add_fn(f, "global-scan" if g in root_globals else "global-access")
            work.extend(sorted(gvs))
        return grew

    root_funcs, root_globals = scan_memory_roots(state)
    for f in sorted(root_funcs):
        add_fn(f, "heap-scan" if _in_heap(state, f) else "stack-scan")
    for frame in state.frames:
        add_fn(frame.fn.name, "live-frame")
    for f in state.spawned_entries:
        add_fn(f, "spawn-entry")
    for g in sorted(root_globals):
        add_global(g)

    changed = True
    while changed:
        changed = False
        for fname in sorted(funcs):
            fn = program.function_map[fname]
            for _, _, _, ins in iter_instrs(fn):
                if ins.op in ("call", "spawn"):
                    if add_fn(ins.operands[0].value, "direct-call"):
                        changed = True
                elif ins.op == "funcaddr":
                    if add_fn(ins.operands[0].value, "funcaddr"):
                        changed = True
                for op in ins.operands:
                    if op.kind == "glob":
                        if add_global(op.value):
                            changed = True
    return PartitionResult(frozenset(funcs), frozenset(accessible), evidence)


def _in_heap(state: Machine, fname: str) -> bool:
    for _, memobj in state.live_heap_objects():
        for v in memobj.cells.values():
            if isinstance(v, FnVal) and v.name == fname:
                return True
    return False
