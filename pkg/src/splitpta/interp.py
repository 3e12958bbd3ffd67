"""Concrete interpreter for PIR programs.

Two entry points: run_init executes from the entry function until the
start_processing annotation and returns the machine state for scanning and
seeding; run_full executes the whole program (feeding `input` from a finite
stream) and records an execution trace, which the test suites use as the
ground-truth oracle for the static results.

Memory is object-granular: every global, stack slot, and heap allocation is
an object whose scalar cells live at byte offsets determined by its type.
Pointers are (object, path) values where each path step also carries its
byte delta, so type-punned views of the same bytes resolve to the same cell.
Heap objects start untyped and acquire types through casts, gated by
descriptiveness so that upcasts never erase information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .ir import (
    OPAQUE,
    Function,
    GlobalInit,
    Instr,
    Program,
    TypeRef,
    array_of,
    descriptiveness,
    instr_id,
    leaf_cells,
    sizeof_type,
)
from .parser import TypeInfo, analyze_program

DEFAULT_BUDGET = 10_000_000


class TrapError(Exception):
    def __init__(self, message: str, location: str = ""):
        self.message = message
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathStep:
    kind: str    # "field" | "index"
    sel: int     # field position or concrete index
    delta: int   # byte contribution


@dataclass(frozen=True)
class Value:
    pass


@dataclass(frozen=True)
class IntVal(Value):
    value: int


@dataclass(frozen=True)
class FnVal(Value):
    name: str


@dataclass(frozen=True)
class PtrVal(Value):
    obj: int
    path: tuple[PathStep, ...] = ()

    @property
    def offset(self) -> int:
        return sum(s.delta for s in self.path)

    @property
    def collapsed_offset(self) -> int:
        """Byte offset with array-index contributions zeroed."""
        return sum(s.delta for s in self.path if s.kind == "field")


@dataclass(frozen=True)
class NullVal(Value):
    pass


NULL = NullVal()


def value_json(v: Value) -> object:
    if isinstance(v, IntVal):
        return {"int": v.value}
    if isinstance(v, FnVal):
        return {"fn": v.name}
    if isinstance(v, PtrVal):
        return {"ptr": v.obj, "path": [[s.kind, s.sel, s.delta] for s in v.path]}
    if isinstance(v, NullVal):
        return "null"
    raise TypeError(v)


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------

@dataclass
class HeapMeta:
    obj: int
    site: str                      # allocating instruction id
    seq: int                       # per-site allocation ordinal
    size: int
    current_type: TypeRef
    type_history: list[TypeRef] = field(default_factory=list)
    freed: bool = False


@dataclass
class MemObject:
    obj: int
    kind: str                      # "global" | "stack" | "heap"
    base: str                      # "@name" for globals, alloc site otherwise
    type: TypeRef                  # declared type; heap objects track HeapMeta
    cells: dict[int, Value] = field(default_factory=dict)
    dead: bool = False             # stack object whose frame returned


@dataclass
class Frame:
    fn: Function
    block: str
    ip: int
    regs: dict[str, Value] = field(default_factory=dict)
    stack_objs: list[int] = field(default_factory=list)
    ret_dest: str | None = None    # register receiving the pending call's result


@dataclass
class ExecutionTrace:
    """What a full run observed, tagged by phase ("init"/"processing")."""

    icalls: list[tuple[str, str, str]] = field(default_factory=list)
    syscalls: list[tuple[str, str]] = field(default_factory=list)
    functions_entered: list[tuple[str, str]] = field(default_factory=list)

    def post_transition_targets(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for phase, site, target in self.icalls:
            if phase == "processing":
                out.setdefault(site, set()).add(target)
        return out

    def post_transition_syscalls(self) -> set[str]:
        return {n for p, n in self.syscalls if p == "processing"}

    def post_transition_functions(self) -> set[str]:
        return {f for p, f in self.functions_entered if p == "processing"}


@dataclass
class StopReason:
    kind: str                      # "transition" | "finished" | "trap" | "budget"
    state: "Machine | None" = None
    message: str = ""
    location: str = ""


# ---------------------------------------------------------------------------
# Heap type derivation
# ---------------------------------------------------------------------------

def derive_heap_type(meta: HeapMeta, cast_target: TypeRef, program: Program) -> TypeRef:
    """New current type of a heap object after a head cast to cast_target.

    The candidate is the cast target itself when the allocation size matches
    exactly, a derived array when the allocation holds a whole number (>1) of
    elements, and the bare target (a prefix view, as with punned parent
    types) when the allocation is larger but not a multiple.  Allocations
    smaller than the target trap.  The candidate replaces the current type
    only when it is strictly more descriptive.
    """
    if cast_target.kind == "opaque":
        return meta.current_type
    size_t = sizeof_type(cast_target, program)
    if meta.size < size_t:
        raise TrapError(
            f"heap object of {meta.size} bytes cast to {cast_target} of {size_t} bytes")
    if meta.size == size_t:
        candidate = cast_target
    elif meta.size % size_t == 0:
        candidate = array_of(cast_target, meta.size // size_t)
    else:
        candidate = cast_target  # prefix view over a larger allocation
    if descriptiveness(candidate, program) > descriptiveness(meta.current_type, program):
        return candidate
    return meta.current_type


# ---------------------------------------------------------------------------
# Machine
# ---------------------------------------------------------------------------

class Machine:
    def __init__(self, program: Program, config: dict[str, int] | None = None,
                 budget: int = DEFAULT_BUDGET, inputs: tuple[int, ...] = (),
                 types: TypeInfo | None = None, trace_sink=None):
        if types is None:
            diags, types = analyze_program(program)
            if diags:
                raise ValueError(f"program failed validation: {diags[0]}")
        self.program = program
        self.types = types
        self.config = dict(config or {})
        self.budget = budget
        self.inputs = list(inputs)
        self.input_pos = 0
        self.trace_sink = trace_sink

        self.objects: dict[int, MemObject] = {}
        self.heap_meta: dict[int, HeapMeta] = {}
        self.globals: dict[str, int] = {}
        self.frames: list[Frame] = []
        self.spawned_entries: list[str] = []
        self.executed_functions: set[str] = set()
        self.syscalls_init: set[str] = set()
        self.trace = ExecutionTrace()
        self.phase = "init"
        self.steps = 0
        self._next_obj = 1
        self._site_seq: dict[str, int] = {}
        self._leaf_cache: dict[TypeRef, list] = {}

        self._init_globals()

    # -- memory helpers ----------------------------------------------------

    def _new_object(self, kind: str, base: str, t: TypeRef) -> MemObject:
        obj = MemObject(self._next_obj, kind, base, t)
        self._next_obj += 1
        self.objects[obj.obj] = obj
        return obj

    def _leaves(self, t: TypeRef) -> dict[int, TypeRef]:
        """offset -> scalar leaf type, cached per type."""
        cached = self._leaf_cache.get(t)
        if cached is None:
            cached = {cell.offset: cell.type for cell in leaf_cells(t, self.program)}
            self._leaf_cache[t] = cached
        return cached

    def _init_globals(self) -> None:
        for gd in self.program.globals:
            obj = self._new_object("global", f"@{gd.name}", gd.type)
            self.globals[gd.name] = obj.obj
            for off, leaf in self._leaves(gd.type).items():
                obj.cells[off] = IntVal(0) if leaf.kind == "i64" else NULL
            if gd.init is not None:
                self._apply_ginit(obj, gd.type, gd.init, 0)

    def _apply_ginit(self, obj: MemObject, t: TypeRef, gi: GlobalInit, off: int) -> None:
        if gi.kind == "null":
            obj.cells[off] = NULL
        elif gi.kind == "int":
            obj.cells[off] = IntVal(gi.value)
        elif gi.kind == "ref":
            if gi.value in self.program.function_map:
                obj.cells[off] = FnVal(gi.value)
            else:
                obj.cells[off] = PtrVal(self.globals[gi.value])
        elif gi.kind == "agg":
            if t.kind == "struct":
                sd = self.program.struct_map[t.struct_name]
                fo = 0
                for e, (_, ft) in zip(gi.elems, sd.fields):
                    self._apply_ginit(obj, ft, e, off + fo)
                    fo += sizeof_type(ft, self.program)
            elif t.kind == "array":
                stride = sizeof_type(t.elem, self.program)
                for i, e in enumerate(gi.elems):
                    self._apply_ginit(obj, t.elem, e, off + i * stride)

    def object_type(self, obj: MemObject) -> TypeRef:
        if obj.kind == "heap":
            return self.heap_meta[obj.obj].current_type
        return obj.type

    def _resolve(self, v: Value, loc: str) -> tuple[MemObject, int, TypeRef]:
        if isinstance(v, NullVal):
            raise TrapError("null dereference", loc)
        if not isinstance(v, PtrVal):
            raise TrapError(f"dereference of non-pointer value {v}", loc)
        obj = self.objects.get(v.obj)
        if obj is None:
            raise TrapError("dereference of unknown object", loc)
        if obj.kind == "heap" and self.heap_meta[obj.obj].freed:
            raise TrapError("use of freed heap object", loc)
        if obj.dead:
            raise TrapError("dangling reference to a returned stack slot", loc)
        t = self.object_type(obj)
        if t.kind == "opaque":
            raise TrapError("typed access to an untyped heap object", loc)
        off = v.offset
        leaf = self._leaves(t).get(off)
        if leaf is None:
            raise TrapError(f"access at offset {off} is outside the object's type {t}", loc)
        return obj, off, leaf

    def load(self, v: Value, loc: str) -> Value:
        obj, off, _ = self._resolve(v, loc)
        cell = obj.cells.get(off)
        if cell is None:
            raise TrapError("read of uninitialized cell", loc)
        return cell

    def store(self, dst: Value, val: Value, loc: str) -> None:
        obj, off, leaf = self._resolve(dst, loc)
        ok = (
            (leaf.kind == "i64" and isinstance(val, IntVal))
            or (leaf.kind == "fnptr" and isinstance(val, (FnVal, NullVal)))
            or (leaf.kind == "ptr" and isinstance(val, (PtrVal, NullVal)))
        )
        if not ok:
            raise TrapError(f"store of incompatible value into {leaf} cell", loc)
        obj.cells[off] = val

    # -- live-object views -------------------------------------------------

    def live_heap_objects(self) -> list[tuple[HeapMeta, MemObject]]:
        out = []
        for obj_id in sorted(self.heap_meta):
            meta = self.heap_meta[obj_id]
            if not meta.freed:
                out.append((meta, self.objects[obj_id]))
        return out

    def live_stack_objects(self) -> list[MemObject]:
        out = []
        for frame in self.frames:
            for obj_id in frame.stack_objs:
                out.append(self.objects[obj_id])
        return out

    # -- execution ---------------------------------------------------------

    def _reg(self, frame: Frame, name: str, loc: str) -> Value:
        try:
            return frame.regs[name]
        except KeyError:
            raise TrapError(f"register %{name} has no value", loc) from None

    def _operand(self, frame: Frame, op, loc: str) -> Value:
        if op.kind == "reg":
            return self._reg(frame, op.value, loc)
        if op.kind == "glob":
            return PtrVal(self.globals[op.value])
        raise TrapError(f"bad value operand {op}", loc)

    def _push_frame(self, fn: Function, args: list[Value], loc: str) -> None:
        if len(args) != len(fn.params):
            raise TrapError(
                f"@{fn.name} expects {len(fn.params)} arguments, got {len(args)}", loc)
        frame = Frame(fn, fn.blocks[0].label, 0,
                      regs={name: v for (name, _), v in zip(fn.params, args)})
        self.frames.append(frame)
        self.executed_functions.add(fn.name)
        self.trace.functions_entered.append((self.phase, fn.name))

    def run(self, mode: str) -> StopReason:
        """mode: "init" stops at the transition; "full" runs to completion."""
        entry = self.program.function_map[self.program.entry]
        self._push_frame(entry, [], "entry")
        try:
            while self.frames:
                if self.steps >= self.budget:
                    return StopReason("budget", state=self,
                                      message=f"step budget {self.budget} exhausted")
                frame = self.frames[-1]
                block = frame.fn.block_map()[frame.block]
                ins = block.instrs[frame.ip]
                loc = instr_id(frame.fn.name, frame.block, frame.ip)
                self.steps += 1
                if ins.op == "start_processing" and mode == "init":
                    return StopReason("transition", state=self)
                self._step(frame, block.label, ins, loc)
                if self.trace_sink is not None:
                    self._emit_trace(ins, frame, loc)
        except TrapError as e:
            return StopReason("trap", state=self, message=e.message, location=e.location)
        return StopReason("finished", state=self)

    def _emit_trace(self, ins: Instr, frame: Frame, loc: str) -> None:
        value = frame.regs.get(ins.dest) if ins.dest is not None else None
        self.trace_sink.write(json.dumps(
            {"step": self.steps, "op": ins.op, "def": ins.dest, "at": loc,
             "value": None if value is None else value_json(value)}) + "\n")

    def _step(self, frame: Frame, label: str, ins: Instr, loc: str) -> None:
        op = ins.op
        ops = ins.operands
        val = lambda o: self._operand(frame, o, loc)  # noqa: E731

        def setdest(v: Value) -> None:
            if ins.dest is not None:
                frame.regs[ins.dest] = v

        frame.ip += 1  # terminators and calls overwrite control flow below

        if op == "const":
            setdest(IntVal(ops[0].value))
        elif op == "sizeof":
            setdest(IntVal(sizeof_type(ops[0].value, self.program)))
        elif op == "config":
            setdest(IntVal(self.config.get(ops[0].value, 0)))
        elif op == "input":
            if self.phase != "processing":
                raise TrapError("input consumed during initialization", loc)
            if self.input_pos >= len(self.inputs):
                raise TrapError("input stream exhausted", loc)
            v = self.inputs[self.input_pos]
            self.input_pos += 1
            setdest(IntVal(v))
        elif op == "alloc":
            t = ops[0].value
            obj = self._new_object("stack", loc, t)
            frame.stack_objs.append(obj.obj)
            setdest(PtrVal(obj.obj))
        elif op == "malloc":
            size = val(ops[0])
            if not isinstance(size, IntVal) or size.value < 0:
                raise TrapError("malloc size must be a non-negative integer", loc)
            obj = self._new_object("heap", loc, OPAQUE)
            seq = self._site_seq.get(loc, 0)
            self._site_seq[loc] = seq + 1
            self.heap_meta[obj.obj] = HeapMeta(obj.obj, loc, seq, size.value, OPAQUE,
                                               type_history=[OPAQUE])
            setdest(PtrVal(obj.obj))
        elif op == "free":
            v = val(ops[0])
            if not isinstance(v, PtrVal):
                raise TrapError("free of a non-pointer value", loc)
            if v.path:
                raise TrapError("free of an interior pointer", loc)
            meta = self.heap_meta.get(v.obj)
            if meta is None:
                raise TrapError("free of a non-heap object", loc)
            if meta.freed:
                raise TrapError("double free", loc)
            meta.freed = True
        elif op == "load":
            setdest(self.load(val(ops[0]), loc))
        elif op == "store":
            self.store(val(ops[1]), val(ops[0]), loc)
        elif op == "gep":
            base = val(ops[0])
            if isinstance(base, NullVal):
                raise TrapError("gep on null pointer", loc)
            if not isinstance(base, PtrVal):
                raise TrapError("gep on non-pointer value", loc)
            sel = ops[1]
            if sel.kind == "field":
                delta = self.types.gep_offsets[loc]
                step = PathStep("field", sel.value, delta)
            else:
                idx = val(sel)
                if not isinstance(idx, IntVal):
                    raise TrapError("gep index must be an integer", loc)
                if idx.value < 0:
                    raise TrapError("negative gep index", loc)
                stride = self.types.gep_strides[loc]
                step = PathStep("index", idx.value, idx.value * stride)
            setdest(PtrVal(base.obj, base.path + (step,)))
        elif op == "cast":
            v = val(ops[0])
            target = ops[1].value
            if isinstance(v, NullVal):
                setdest(NULL)
                return
            if not isinstance(v, PtrVal):
                raise TrapError("cast of non-pointer value", loc)
            meta = self.heap_meta.get(v.obj)
            if meta is not None and not v.path and not meta.freed:
                new_type = derive_heap_type(meta, target.pointee, self.program)
                if new_type != meta.current_type:
                    meta.current_type = new_type
                    meta.type_history.append(new_type)
            setdest(v)
        elif op == "funcaddr":
            setdest(FnVal(ops[0].value))
        elif op in ("add", "sub", "mul", "div"):
            a = val(ops[0])
            b = val(ops[1])
            if not isinstance(a, IntVal) or not isinstance(b, IntVal):
                raise TrapError(f"{op} on non-integer values", loc)
            if op == "add":
                setdest(IntVal(a.value + b.value))
            elif op == "sub":
                setdest(IntVal(a.value - b.value))
            elif op == "mul":
                setdest(IntVal(a.value * b.value))
            else:
                if b.value == 0:
                    raise TrapError("division by zero", loc)
                q = abs(a.value) // abs(b.value)
                setdest(IntVal(q if (a.value >= 0) == (b.value >= 0) else -q))
        elif op == "cmp":
            a = val(ops[1])
            b = val(ops[2])
            if not isinstance(a, IntVal) or not isinstance(b, IntVal):
                raise TrapError("cmp on non-integer values", loc)
            if ops[0].value == "eq":
                setdest(IntVal(1 if a.value == b.value else 0))
            else:
                setdest(IntVal(1 if a.value < b.value else 0))
        elif op == "call":
            callee = self.program.function_map[ops[0].value]
            args = [val(a) for a in ops[1:]]
            frame.ret_dest = ins.dest
            self._push_frame(callee, args, loc)
        elif op == "icall":
            fp = val(ops[0])
            if isinstance(fp, NullVal):
                raise TrapError("indirect call through null function pointer", loc)
            if not isinstance(fp, FnVal):
                raise TrapError("indirect call through non-function value", loc)
            callee = self.program.function_map.get(fp.name)
            if callee is None:
                raise TrapError(f"indirect call to unknown function @{fp.name}", loc)
            args = [val(a) for a in ops[1:]]
            if len(args) != len(callee.params):
                raise TrapError(
                    f"indirect call arity mismatch: @{callee.name} expects "
                    f"{len(callee.params)}, got {len(args)}", loc)
            self.trace.icalls.append((self.phase, loc, fp.name))
            frame.ret_dest = ins.dest
            self._push_frame(callee, args, loc)
        elif op == "spawn":
            for a in ops[1:]:
                val(a)
            name = ops[0].value
            if name not in self.spawned_entries:
                self.spawned_entries.append(name)
        elif op == "syscall":
            name = ops[0].value
            if self.phase == "init":
                self.syscalls_init.add(name)
            self.trace.syscalls.append((self.phase, name))
        elif op == "start_processing":
            if self.phase == "processing":
                raise TrapError("transition annotation executed twice", loc)
            self.phase = "processing"
        elif op == "br":
            frame.block = ops[0].value
            frame.ip = 0
        elif op == "cbr":
            c = val(ops[0])
            if not isinstance(c, IntVal):
                raise TrapError("cbr condition must be an integer", loc)
            frame.block = ops[1].value if c.value != 0 else ops[2].value
            frame.ip = 0
        elif op == "ret":
            rv = val(ops[0]) if ops else None
            done = self.frames.pop()
            for obj_id in done.stack_objs:
                self.objects[obj_id].dead = True
            if self.frames:
                parent = self.frames[-1]
                if parent.ret_dest is not None:
                    if rv is None:
                        raise TrapError("void return into a value context", loc)
                    parent.regs[parent.ret_dest] = rv
                parent.ret_dest = None
        else:  # pragma: no cover
            raise TrapError(f"unhandled opcode {op}", loc)


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def run_init(program: Program, config: dict[str, int] | None = None,
             budget: int = DEFAULT_BUDGET, types: TypeInfo | None = None,
             trace_sink=None) -> StopReason:
    """Interpret the initialization phase up to the transition annotation."""
    machine = Machine(program, config, budget, (), types, trace_sink)
    return machine.run("init")


def run_full(program: Program, config: dict[str, int] | None = None,
             inputs: tuple[int, ...] = (), budget: int = DEFAULT_BUDGET,
             types: TypeInfo | None = None,
             trace_sink=None) -> tuple[ExecutionTrace, StopReason]:
    """Interpret the whole program; `input` pops the given stream."""
    machine = Machine(program, config, budget, tuple(inputs), types, trace_sink)
    stop = machine.run("full")
    return machine.trace, stop


# ---------------------------------------------------------------------------
# Snapshot serialization
# ---------------------------------------------------------------------------

def snapshot_json(machine: Machine) -> dict:
    """Canonical JSON-able view of a machine state."""
    objects = {}
    for obj_id in sorted(machine.objects):
        obj = machine.objects[obj_id]
        if obj.dead:
            continue
        if obj.kind == "heap" and machine.heap_meta[obj_id].freed:
            continue
        entry = {
            "kind": obj.kind,
            "base": obj.base,
            "type": str(machine.object_type(obj)),
            "cells": {str(off): value_json(v) for off, v in sorted(obj.cells.items())},
        }
        if obj.kind == "heap":
            meta = machine.heap_meta[obj_id]
            entry["size"] = meta.size
            entry["site"] = meta.site
            entry["seq"] = meta.seq
            entry["type_history"] = [str(t) for t in meta.type_history]
        objects[str(obj_id)] = entry
    return {
        "phase": machine.phase,
        "objects": objects,
        "globals": {name: machine.globals[name] for name in sorted(machine.globals)},
        "frames": [
            {"fn": f.fn.name, "block": f.block, "ip": f.ip,
             "regs": {r: value_json(v) for r, v in sorted(f.regs.items())},
             "stack_objs": list(f.stack_objs)}
            for f in machine.frames
        ],
        "spawned_entries": sorted(machine.spawned_entries),
        "executed_functions": sorted(machine.executed_functions),
        "syscalls_init": sorted(machine.syscalls_init),
        "indirect_calls": [list(t) for t in machine.trace.icalls],
        "steps": machine.steps,
    }
