"""Data model for PIR, the small pointer-oriented IR the toolkit analyzes.

A program is a set of named struct types, initialized globals, and functions
made of labeled basic blocks.  All scalars (i64, fnptr, ptr<T>) are 8 bytes
and aggregates are packed, so every type flattens to a sequence of 8-byte
leaf cells at deterministic offsets.  That flattening is what the type
metrics, the interpreter's cell store, and the solver's field offsets all
share.

Instructions are generic (opcode + tagged operands); per-opcode shape rules
live in the validator (parser module), not here.
"""

from __future__ import annotations

from dataclasses import dataclass, field


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

SCALAR_BYTES = 8


@dataclass(frozen=True)
class TypeRef:
    """Reference to a PIR type.

    kind is one of "i64", "fnptr", "ptr", "struct", "array", "opaque".
    Only the fields relevant to the kind are populated.
    """

    kind: str
    pointee: "TypeRef | None" = None      # ptr
    struct_name: str | None = None        # struct
    elem: "TypeRef | None" = None         # array
    count: int = 0                        # array

    def __str__(self) -> str:
        if self.kind == "i64":
            return "i64"
        if self.kind == "fnptr":
            return "fnptr"
        if self.kind == "opaque":
            return "opaque"
        if self.kind == "ptr":
            return f"ptr<{self.pointee}>"
        if self.kind == "struct":
            return f"%{self.struct_name}"
        if self.kind == "array":
            return f"array<{self.elem}, {self.count}>"
        raise ValueError(f"bad type kind {self.kind!r}")


I64 = TypeRef("i64")
FNPTR = TypeRef("fnptr")
OPAQUE = TypeRef("opaque")


def ptr_to(t: TypeRef) -> TypeRef:
    return TypeRef("ptr", pointee=t)


def struct_ref(name: str) -> TypeRef:
    return TypeRef("struct", struct_name=name)


def array_of(elem: TypeRef, count: int) -> TypeRef:
    return TypeRef("array", elem=elem, count=count)


PTR_OPAQUE = ptr_to(OPAQUE)


@dataclass(frozen=True)
class StructDef:
    name: str
    fields: tuple[tuple[str, TypeRef], ...]


# ---------------------------------------------------------------------------
# Instructions
# ---------------------------------------------------------------------------

# Operand kinds:
#   reg    - virtual register name (without %)
#   glob   - global name (without @)
#   func   - function name (without @)
#   int    - integer literal
#   type   - TypeRef
#   label  - block label
#   str    - quoted string (config/syscall names)
#   field  - struct field position for gep
#   rel    - comparison relation ("eq"/"lt")
@dataclass(frozen=True)
class Operand:
    kind: str
    value: object

    def __str__(self) -> str:
        if self.kind == "reg":
            return f"%{self.value}"
        if self.kind == "glob":
            return f"@{self.value}"
        if self.kind == "func":
            return f"@{self.value}"
        if self.kind == "int":
            return str(self.value)
        if self.kind == "type":
            return str(self.value)
        if self.kind == "label":
            return str(self.value)
        if self.kind == "str":
            return f'"{self.value}"'
        if self.kind == "field":
            return f"field {self.value}"
        if self.kind == "rel":
            return str(self.value)
        raise ValueError(f"bad operand kind {self.kind!r}")


def reg(name: str) -> Operand:
    return Operand("reg", name)


def glob(name: str) -> Operand:
    return Operand("glob", name)


def func(name: str) -> Operand:
    return Operand("func", name)


# Opcodes that define a result register.
VALUE_OPS = {
    "alloc", "malloc", "load", "gep", "cast", "funcaddr", "const", "sizeof",
    "add", "sub", "mul", "div", "cmp", "config", "input",
}
# call/icall define a register only when the callee returns a value.
OPTIONAL_VALUE_OPS = {"call", "icall"}
TERMINATORS = {"br", "cbr", "ret"}
ARITH_OPS = {"add", "sub", "mul", "div"}
ALL_OPS = VALUE_OPS | OPTIONAL_VALUE_OPS | TERMINATORS | {
    "free", "store", "syscall", "spawn", "start_processing",
}


@dataclass(frozen=True)
class Instr:
    op: str
    dest: str | None
    operands: tuple[Operand, ...]
    line: int = field(default=0, compare=False)

    def __str__(self) -> str:
        parts = render_instr(self)
        return parts


@dataclass(frozen=True)
class Block:
    label: str
    instrs: tuple[Instr, ...]


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[tuple[str, TypeRef], ...]
    ret: TypeRef | None          # None = void
    blocks: tuple[Block, ...]

    def block_map(self) -> dict[str, Block]:
        return {b.label: b for b in self.blocks}


# ---------------------------------------------------------------------------
# Global initializers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlobalInit:
    """kind: "null" | "int" | "ref" (function or global, resolved later) |
    "agg" (brace aggregate)."""

    kind: str
    value: object = None
    elems: tuple["GlobalInit", ...] = ()

    def __str__(self) -> str:
        if self.kind == "null":
            return "null"
        if self.kind == "int":
            return str(self.value)
        if self.kind == "ref":
            return f"@{self.value}"
        if self.kind == "agg":
            return "{ " + ", ".join(str(e) for e in self.elems) + " }"
        raise ValueError(self.kind)


@dataclass(frozen=True)
class GlobalDef:
    name: str
    type: TypeRef
    init: GlobalInit | None


@dataclass(frozen=True)
class Program:
    structs: tuple[StructDef, ...]
    globals: tuple[GlobalDef, ...]
    functions: tuple[Function, ...]
    entry: str = "main"

    def struct(self, name: str) -> StructDef:
        return self.struct_map[name]

    @property
    def struct_map(self) -> dict[str, StructDef]:
        return {s.name: s for s in self.structs}

    @property
    def global_map(self) -> dict[str, GlobalDef]:
        return {g.name: g for g in self.globals}

    @property
    def function_map(self) -> dict[str, Function]:
        return {f.name: f for f in self.functions}


def instr_id(fn: str, block_label: str, index: int) -> str:
    """Stable id of an instruction; also used as allocation/call-site id."""
    return f"{fn}:{block_label}:{index}"


def iter_instrs(fn: Function):
    """Yield (instr_id, block, index, instr) over a function in order."""
    for block in fn.blocks:
        for i, ins in enumerate(block.instrs):
            yield instr_id(fn.name, block.label, i), block, i, ins


# ---------------------------------------------------------------------------
# Type metrics
# ---------------------------------------------------------------------------

class TypeError_(Exception):
    """Raised on type-metric queries that have no defined answer."""


def sizeof_type(t: TypeRef, program: Program) -> int:
    """Byte size of a type: scalars are 8, aggregates are packed."""
    if t.kind in ("i64", "fnptr", "ptr"):
        return SCALAR_BYTES
    if t.kind == "struct":
        sd = program.struct_map.get(t.struct_name)
        if sd is None:
            raise TypeError_(f"unknown struct %{t.struct_name}")
        return sum(sizeof_type(ft, program) for _, ft in sd.fields)
    if t.kind == "array":
        return t.count * sizeof_type(t.elem, program)
    raise TypeError_("opaque has no size")


def descriptiveness(t: TypeRef, program: Program) -> int:
    """Total scalar field count after expanding nested aggregates.

    Scalars count 1, opaque counts 0; this is the measure that decides
    whether a cast may re-type a heap object.
    """
    if t.kind in ("i64", "fnptr", "ptr"):
        return 1
    if t.kind == "opaque":
        return 0
    if t.kind == "struct":
        sd = program.struct_map.get(t.struct_name)
        if sd is None:
            raise TypeError_(f"unknown struct %{t.struct_name}")
        return sum(descriptiveness(ft, program) for _, ft in sd.fields)
    if t.kind == "array":
        return t.count * descriptiveness(t.elem, program)
    raise TypeError_(f"bad type kind {t.kind!r}")


@dataclass(frozen=True)
class LeafCell:
    """One scalar slot of a flattened type.

    offset is the concrete byte offset; collapsed is the byte offset with all
    array-index contributions zeroed (every element folded onto element 0),
    which is the field identity the index-insensitive solver uses.
    """

    offset: int
    collapsed: int
    type: TypeRef


def leaf_cells(t: TypeRef, program: Program) -> list[LeafCell]:
    """Flatten a type into its scalar cells. Opaque flattens to nothing."""
    out: list[LeafCell] = []

    def walk(t: TypeRef, off: int, coll: int) -> None:
        if t.kind in ("i64", "fnptr", "ptr"):
            out.append(LeafCell(off, coll, t))
            return
        if t.kind == "opaque":
            return
        if t.kind == "struct":
            sd = program.struct_map[t.struct_name]
            fo = 0
            for _, ft in sd.fields:
                walk(ft, off + fo, coll + fo)
                fo += sizeof_type(ft, program)
            return
        if t.kind == "array":
            stride = sizeof_type(t.elem, program)
            for i in range(t.count):
                # collapsed offset ignores the index step entirely
                walk(t.elem, off + i * stride, coll)
            return
        raise TypeError_(f"bad type kind {t.kind!r}")

    walk(t, 0, 0)
    return out


def leaf_at(t: TypeRef, offset: int, program: Program) -> TypeRef | None:
    """Scalar leaf type at a byte offset, or None if out of range."""
    for cell in leaf_cells(t, program):
        if cell.offset == offset:
            return cell.type
    return None


def field_offset(sd: StructDef, k: int, program: Program) -> int:
    off = 0
    for _, ft in sd.fields[:k]:
        off += sizeof_type(ft, program)
    return off


# ---------------------------------------------------------------------------
# Pretty printer (canonical text form; parses back to an equal Program)
# ---------------------------------------------------------------------------

def render_instr(ins: Instr) -> str:
    ops = ins.operands
    if ins.op == "gep":
        tail = str(ops[0]) + ", " + (
            f"field {ops[1].value}" if ops[1].kind == "field" else f"index {ops[1]}"
        )
        body = f"gep {tail}"
    elif ins.op == "cast":
        body = f"cast {ops[0]} to {ops[1]}"
    elif ins.op in ("call", "icall", "spawn"):
        args = ", ".join(str(a) for a in ops[1:])
        body = f"{ins.op} {ops[0]}({args})"
    elif ins.op == "cmp":
        body = f"cmp {ops[0].value} {ops[1]}, {ops[2]}"
    elif ins.op == "ret":
        body = "ret" if not ops else f"ret {ops[0]}"
    elif ins.op == "start_processing":
        body = "start_processing"
    elif ins.op == "input":
        body = "input"
    else:
        body = ins.op + (" " if ops else "") + ", ".join(str(o) for o in ops)
    if ins.dest is not None:
        return f"%{ins.dest} = {body}"
    return body


def format_program(program: Program) -> str:
    lines: list[str] = []
    for sd in program.structs:
        fields = ", ".join(f"%{n}: {t}" for n, t in sd.fields)
        lines.append(f"type %{sd.name} = struct {{ {fields} }}")
    if program.structs:
        lines.append("")
    for gd in program.globals:
        decl = f"global @{gd.name} : {gd.type}"
        if gd.init is not None:
            decl += f" = {gd.init}"
        lines.append(decl)
    if program.globals:
        lines.append("")
    for fn in program.functions:
        params = ", ".join(f"%{n}: {t}" for n, t in fn.params)
        ret = "void" if fn.ret is None else str(fn.ret)
        lines.append(f"func @{fn.name}({params}) -> {ret} {{")
        for block in fn.blocks:
            lines.append(f"{block.label}:")
            for ins in block.instrs:
                lines.append(f"  {render_instr(ins)}")
        lines.append("}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
