"""Parser and validator for PIR source text.

The grammar is line-oriented: one declaration header, label, or instruction
per line, `//` comments, braces on the same line as the construct they open
(closing `}` on its own line).  parse_program returns the Program plus a
diagnostic list instead of raising, so callers can report all problems at
once; validate() runs the structural and static-typing checks that need a
complete program.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .ir import (
    ALL_OPS,
    ARITH_OPS,
    FNPTR,
    I64,
    OPAQUE,
    TERMINATORS,
    VALUE_OPS,
    Block,
    Function,
    GlobalDef,
    GlobalInit,
    Instr,
    Operand,
    Program,
    StructDef,
    TypeRef,
    array_of,
    field_offset,
    iter_instrs,
    ptr_to,
    sizeof_type,
    struct_ref,
)


@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.message}"


class ParseError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics[:5]))


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>//.*)
  | (?P<string>"[^"]*")
  | (?P<arrow>->)
  | (?P<int>-?\d+)
  | (?P<pct>%[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<at>@[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[<>{}(),:=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str   # "pct" | "at" | "ident" | "int" | "string" | "punct" | "arrow"
    text: str
    line: int
    col: int


def _lex_line(text: str, lineno: int, diags: list[Diagnostic]) -> list[Token]:
    toks: list[Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            diags.append(Diagnostic(lineno, pos + 1, f"unexpected character {text[pos]!r}"))
            return toks
        pos = m.end()
        kind = m.lastgroup
        if kind in ("ws", "comment"):
            continue
        toks.append(Token(kind, m.group(), lineno, m.start() + 1))
    return toks


class _Cursor:
    """Token cursor over one line."""

    def __init__(self, toks: list[Token], lineno: int, diags: list[Diagnostic]):
        self.toks = toks
        self.i = 0
        self.line = lineno
        self.diags = diags

    def peek(self) -> Token | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> Token | None:
        t = self.peek()
        if t is not None:
            self.i += 1
        return t

    def error(self, msg: str) -> None:
        t = self.peek()
        col = t.col if t else (self.toks[-1].col if self.toks else 1)
        self.diags.append(Diagnostic(self.line, col, msg))
        raise _LineError()

    def expect(self, kind: str, text: str | None = None) -> Token:
        t = self.peek()
        if t is None or t.kind != kind or (text is not None and t.text != text):
            want = text if text is not None else kind
            got = t.text if t else "end of line"
            self.error(f"expected {want!r}, found {got!r}")
        self.i += 1
        return t

    def at_end(self) -> bool:
        return self.i >= len(self.toks)


class _LineError(Exception):
    """Internal: abandon parsing of the current line after a diagnostic."""


# ---------------------------------------------------------------------------
# Type / initializer sub-parsers
# ---------------------------------------------------------------------------

def _parse_type(cur: _Cursor) -> TypeRef:
    t = cur.peek()
    if t is None:
        cur.error("expected type")
    if t.kind == "pct":
        cur.next()
        return struct_ref(t.text[1:])
    if t.kind == "ident":
        if t.text == "i64":
            cur.next()
            return I64
        if t.text == "fnptr":
            cur.next()
            return FNPTR
        if t.text == "opaque":
            cur.next()
            return OPAQUE
        if t.text == "ptr":
            cur.next()
            cur.expect("punct", "<")
            inner = _parse_type(cur)
            cur.expect("punct", ">")
            return ptr_to(inner)
        if t.text == "array":
            cur.next()
            cur.expect("punct", "<")
            elem = _parse_type(cur)
            cur.expect("punct", ",")
            n = cur.expect("int")
            cur.expect("punct", ">")
            return array_of(elem, int(n.text))
    cur.error(f"expected type, found {t.text!r}")
    raise AssertionError  # unreachable


def _parse_ginit(cur: _Cursor) -> GlobalInit:
    t = cur.peek()
    if t is None:
        cur.error("expected initializer")
    if t.kind == "ident" and t.text == "null":
        cur.next()
        return GlobalInit("null")
    if t.kind == "int":
        cur.next()
        return GlobalInit("int", int(t.text))
    if t.kind == "at":
        cur.next()
        return GlobalInit("ref", t.text[1:])
    if t.kind == "punct" and t.text == "{":
        cur.next()
        elems = [_parse_ginit(cur)]
        while cur.peek() and cur.peek().text == ",":
            cur.next()
            elems.append(_parse_ginit(cur))
        cur.expect("punct", "}")
        return GlobalInit("agg", elems=tuple(elems))
    cur.error(f"expected initializer, found {t.text!r}")
    raise AssertionError


# ---------------------------------------------------------------------------
# Instruction parsing
# ---------------------------------------------------------------------------

def _parse_value_operand(cur: _Cursor) -> Operand:
    t = cur.peek()
    if t is None:
        cur.error("expected operand")
    if t.kind == "pct":
        cur.next()
        return Operand("reg", t.text[1:])
    if t.kind == "at":
        cur.next()
        return Operand("glob", t.text[1:])
    cur.error(f"expected register or global, found {t.text!r}")
    raise AssertionError


def _parse_call_tail(cur: _Cursor, callee: Operand) -> tuple[Operand, ...]:
    cur.expect("punct", "(")
    args: list[Operand] = []
    t = cur.peek()
    if t is not None and not (t.kind == "punct" and t.text == ")"):
        args.append(_parse_value_operand(cur))
        while cur.peek() and cur.peek().text == ",":
            cur.next()
            args.append(_parse_value_operand(cur))
    cur.expect("punct", ")")
    return (callee, *args)


def _parse_instr(cur: _Cursor) -> Instr:
    lineno = cur.line
    dest: str | None = None
    t = cur.peek()
    if t is not None and t.kind == "pct":
        # "%x = op ..." ; a leading register must be a definition
        cur.next()
        dest = t.text[1:]
        cur.expect("punct", "=")
        t = cur.peek()
    if t is None or t.kind != "ident":
        cur.error("expected opcode")
    op = t.text
    cur.next()
    if op not in ALL_OPS:
        cur.error(f"unknown opcode {op!r}")

    operands: tuple[Operand, ...]
    if op in ("alloc", "sizeof"):
        operands = (Operand("type", _parse_type(cur)),)
    elif op in ("malloc", "free", "load"):
        operands = (_parse_value_operand(cur),)
    elif op == "store":
        v = _parse_value_operand(cur)
        cur.expect("punct", ",")
        p = _parse_value_operand(cur)
        operands = (v, p)
    elif op == "gep":
        p = _parse_value_operand(cur)
        cur.expect("punct", ",")
        kw = cur.peek()
        if kw is None or kw.kind != "ident" or kw.text not in ("field", "index"):
            cur.error("expected 'field' or 'index' in gep")
        cur.next()
        if kw.text == "field":
            k = cur.expect("int")
            operands = (p, Operand("field", int(k.text)))
        else:
            operands = (p, _parse_value_operand(cur))
    elif op == "cast":
        p = _parse_value_operand(cur)
        cur.expect("ident", "to")
        operands = (p, Operand("type", _parse_type(cur)))
    elif op in ("call", "spawn"):
        callee = cur.expect("at")
        operands = _parse_call_tail(cur, Operand("func", callee.text[1:]))
    elif op == "icall":
        fp = _parse_value_operand(cur)
        operands = _parse_call_tail(cur, fp)
    elif op == "funcaddr":
        f = cur.expect("at")
        operands = (Operand("func", f.text[1:]),)
    elif op == "const":
        n = cur.expect("int")
        operands = (Operand("int", int(n.text)),)
    elif op in ARITH_OPS:
        a = _parse_value_operand(cur)
        cur.expect("punct", ",")
        b = _parse_value_operand(cur)
        operands = (a, b)
    elif op == "cmp":
        rel = cur.peek()
        if rel is None or rel.kind != "ident" or rel.text not in ("eq", "lt"):
            cur.error("expected comparison relation 'eq' or 'lt'")
        cur.next()
        a = _parse_value_operand(cur)
        cur.expect("punct", ",")
        b = _parse_value_operand(cur)
        operands = (Operand("rel", rel.text), a, b)
    elif op == "br":
        lbl = cur.expect("ident")
        operands = (Operand("label", lbl.text),)
    elif op == "cbr":
        c = _parse_value_operand(cur)
        cur.expect("punct", ",")
        l1 = cur.expect("ident")
        cur.expect("punct", ",")
        l2 = cur.expect("ident")
        operands = (c, Operand("label", l1.text), Operand("label", l2.text))
    elif op == "ret":
        operands = () if cur.at_end() else (_parse_value_operand(cur),)
    elif op in ("config", "syscall"):
        s = cur.expect("string")
        operands = (Operand("str", s.text[1:-1]),)
    elif op in ("input", "start_processing"):
        operands = ()
    else:  # pragma: no cover - ALL_OPS is exhaustive above
        cur.error(f"unhandled opcode {op!r}")
        raise AssertionError

    if not cur.at_end():
        cur.error(f"trailing tokens after {op!r}")
    return Instr(op, dest, operands, line=lineno)


# ---------------------------------------------------------------------------
# Program parsing
# ---------------------------------------------------------------------------

def parse_program(text: str) -> tuple[Program | None, list[Diagnostic]]:
    """Parse PIR source. Returns (program, diagnostics).

    The program is None when syntax errors prevent building a structurally
    complete tree; name-resolution and typing problems are reported by
    validate() instead.
    """
    diags: list[Diagnostic] = []
    structs: list[StructDef] = []
    globals_: list[GlobalDef] = []
    functions: list[Function] = []

    lines = text.splitlines()
    i = 0
    failed = False

    def line_tokens(idx: int) -> list[Token]:
        return _lex_line(lines[idx], idx + 1, diags)

    while i < len(lines):
        toks = line_tokens(i)
        if not toks:
            i += 1
            continue
        head = toks[0]
        try:
            if head.kind == "ident" and head.text == "type":
                cur = _Cursor(toks, i + 1, diags)
                cur.next()
                name = cur.expect("pct").text[1:]
                cur.expect("punct", "=")
                cur.expect("ident", "struct")
                cur.expect("punct", "{")
                fields: list[tuple[str, TypeRef]] = []
                while True:
                    fname = cur.expect("pct").text[1:]
                    cur.expect("punct", ":")
                    ftype = _parse_type(cur)
                    fields.append((fname, ftype))
                    nxt = cur.peek()
                    if nxt is not None and nxt.text == ",":
                        cur.next()
                        continue
                    break
                cur.expect("punct", "}")
                if not cur.at_end():
                    cur.error("trailing tokens after struct declaration")
                structs.append(StructDef(name, tuple(fields)))
                i += 1
            elif head.kind == "ident" and head.text == "global":
                cur = _Cursor(toks, i + 1, diags)
                cur.next()
                name = cur.expect("at").text[1:]
                cur.expect("punct", ":")
                gtype = _parse_type(cur)
                init = None
                if not cur.at_end():
                    cur.expect("punct", "=")
                    init = _parse_ginit(cur)
                    if not cur.at_end():
                        cur.error("trailing tokens after global initializer")
                globals_.append(GlobalDef(name, gtype, init))
                i += 1
            elif head.kind == "ident" and head.text == "func":
                fn, i = _parse_function(lines, i, diags)
                if fn is None:
                    failed = True
                else:
                    functions.append(fn)
            else:
                diags.append(Diagnostic(i + 1, head.col, f"expected declaration, found {head.text!r}"))
                failed = True
                i += 1
        except _LineError:
            failed = True
            i += 1

    if failed:
        return None, diags
    program = Program(tuple(structs), tuple(globals_), tuple(functions))
    return program, diags


def _parse_function(lines: list[str], i: int, diags: list[Diagnostic]) -> tuple[Function | None, int]:
    toks = _lex_line(lines[i], i + 1, diags)
    cur = _Cursor(toks, i + 1, diags)
    try:
        cur.expect("ident", "func")
        name = cur.expect("at").text[1:]
        cur.expect("punct", "(")
        params: list[tuple[str, TypeRef]] = []
        nxt = cur.peek()
        if nxt is not None and not (nxt.kind == "punct" and nxt.text == ")"):
            while True:
                pname = cur.expect("pct").text[1:]
                cur.expect("punct", ":")
                ptype = _parse_type(cur)
                params.append((pname, ptype))
                if cur.peek() and cur.peek().text == ",":
                    cur.next()
                    continue
                break
        cur.expect("punct", ")")
        cur.expect("arrow")
        rt = cur.peek()
        if rt is not None and rt.kind == "ident" and rt.text == "void":
            cur.next()
            ret: TypeRef | None = None
        else:
            ret = _parse_type(cur)
        cur.expect("punct", "{")
        if not cur.at_end():
            cur.error("function body starts on the next line")
    except _LineError:
        # Skip to the closing brace so later functions still parse.
        j = i + 1
        while j < len(lines) and lines[j].strip() != "}":
            j += 1
        return None, j + 1

    blocks: list[Block] = []
    cur_label: str | None = None
    cur_instrs: list[Instr] = []
    ok = True
    j = i + 1
    while j < len(lines):
        raw = lines[j].strip()
        if raw == "}":
            break
        toks = _lex_line(lines[j], j + 1, diags)
        if not toks:
            j += 1
            continue
        # label line: "ident:"
        if len(toks) == 2 and toks[0].kind == "ident" and toks[1].text == ":":
            if cur_label is not None:
                blocks.append(Block(cur_label, tuple(cur_instrs)))
            cur_label = toks[0].text
            cur_instrs = []
            j += 1
            continue
        lc = _Cursor(toks, j + 1, diags)
        try:
            ins = _parse_instr(lc)
        except _LineError:
            ok = False
            j += 1
            continue
        if cur_label is None:
            diags.append(Diagnostic(j + 1, 1, "instruction before the first block label"))
            ok = False
        else:
            cur_instrs.append(ins)
        j += 1
    else:
        diags.append(Diagnostic(len(lines), 1, f"missing closing '}}' for function @{name}"))
        return None, j

    if cur_label is not None:
        blocks.append(Block(cur_label, tuple(cur_instrs)))
    if not ok:
        return None, j + 1
    return Function(name, tuple(params), ret, tuple(blocks)), j + 1


# ---------------------------------------------------------------------------
# Validation: structure + static typing
# ---------------------------------------------------------------------------

SCALAR_KINDS = ("i64", "fnptr", "ptr")


@dataclass
class TypeInfo:
    """Static facts the interpreter and constraint builder reuse.

    reg_types: (function, register) -> TypeRef
    gep_offsets: instr id -> byte offset of the addressed field (field form)
    gep_strides: instr id -> byte stride per index (index form)
    """

    reg_types: dict[tuple[str, str], TypeRef]
    gep_offsets: dict[str, int]
    gep_strides: dict[str, int]


def validate(program: Program) -> list[Diagnostic]:
    diags, _ = analyze_program(program)
    return diags


def analyze_program(program: Program) -> tuple[list[Diagnostic], TypeInfo]:
    """Run all structural checks and the static typing pass."""
    diags: list[Diagnostic] = []
    info = TypeInfo({}, {}, {})

    struct_map = {}
    for sd in program.structs:
        if sd.name in struct_map:
            diags.append(Diagnostic(0, 0, f"duplicate struct %{sd.name}"))
        struct_map[sd.name] = sd
        seen = set()
        for fname, _ in sd.fields:
            if fname in seen:
                diags.append(Diagnostic(0, 0, f"duplicate field %{fname} in struct %{sd.name}"))
            seen.add(fname)

    symbols: dict[str, str] = {}
    for gd in program.globals:
        if gd.name in symbols:
            diags.append(Diagnostic(0, 0, f"duplicate symbol @{gd.name}"))
        symbols[gd.name] = "global"
    for fn in program.functions:
        if fn.name in symbols:
            diags.append(Diagnostic(0, 0, f"duplicate symbol @{fn.name}"))
        symbols[fn.name] = "func"

    # Type well-formedness: resolvable structs, no value recursion, array
    # counts >= 1, opaque only behind ptr.
    def check_type(t: TypeRef, where: str, allow_opaque_ptr: bool = True) -> None:
        if t.kind == "struct":
            if t.struct_name not in struct_map:
                diags.append(Diagnostic(0, 0, f"unknown struct %{t.struct_name} in {where}"))
        elif t.kind == "ptr":
            check_type(t.pointee, where)
        elif t.kind == "array":
            if t.count < 1:
                diags.append(Diagnostic(0, 0, f"array count must be >= 1 in {where}"))
            if t.elem.kind == "opaque":
                diags.append(Diagnostic(0, 0, f"opaque array element in {where}"))
            else:
                check_type(t.elem, where)
        elif t.kind == "opaque" and not allow_opaque_ptr:
            diags.append(Diagnostic(0, 0, f"opaque type not allowed in {where}"))

    for sd in program.structs:
        for fname, ft in sd.fields:
            if ft.kind == "opaque":
                diags.append(Diagnostic(0, 0, f"opaque field %{fname} in struct %{sd.name}"))
            else:
                check_type(ft, f"struct %{sd.name}")

    # Value-embedding recursion.
    def embeds(name: str, t: TypeRef, stack: tuple[str, ...]) -> bool:
        if t.kind == "struct":
            if t.struct_name in stack:
                return True
            sd = struct_map.get(t.struct_name)
            if sd is None:
                return False
            return any(embeds(name, ft, stack + (t.struct_name,)) for _, ft in sd.fields)
        if t.kind == "array":
            return embeds(name, t.elem, stack)
        return False

    recursive = set()
    for sd in struct_map.values():
        if any(embeds(sd.name, ft, (sd.name,)) for _, ft in sd.fields):
            recursive.add(sd.name)
            diags.append(Diagnostic(0, 0, f"struct %{sd.name} embeds itself by value"))
    if recursive:
        return diags, info  # size queries below would not terminate

    for gd in program.globals:
        if gd.type.kind == "opaque":
            diags.append(Diagnostic(0, 0, f"global @{gd.name} cannot have opaque type"))
        else:
            check_type(gd.type, f"global @{gd.name}")
        if gd.init is not None:
            _check_ginit(gd.init, gd.type, program, symbols, diags, f"global @{gd.name}")

    if program.entry not in program.function_map:
        diags.append(Diagnostic(0, 0, f"missing entry function @{program.entry}"))

    transition_sites: list[str] = []
    for fn in program.functions:
        _check_function(fn, program, struct_map, symbols, diags, info, transition_sites)

    if len(transition_sites) > 1:
        diags.append(Diagnostic(0, 0,
                     f"start_processing appears {len(transition_sites)} times; at most one allowed"))
    elif len(transition_sites) == 1 and program.entry in program.function_map:
        fn_name = transition_sites[0].split(":", 1)[0]
        if fn_name not in _referenced_functions(program):
            diags.append(Diagnostic(0, 0,
                         f"start_processing in @{fn_name}, which is unreachable from @{program.entry}"))
    return diags, info


def _referenced_functions(program: Program) -> set[str]:
    """Functions reachable from entry via direct references (calls, spawns,
    funcaddr, global initializers). Over-approximate on purpose."""
    ref_map: dict[str, set[str]] = {fn.name: set() for fn in program.functions}
    for fn in program.functions:
        for _, _, _, ins in iter_instrs(fn):
            for op in ins.operands:
                if op.kind == "func":
                    ref_map[fn.name].add(op.value)
    init_funcs: set[str] = set()

    def initrefs(gi: GlobalInit) -> None:
        if gi.kind == "ref" and gi.value in program.function_map:
            init_funcs.add(gi.value)
        for e in gi.elems:
            initrefs(e)

    for gd in program.globals:
        if gd.init is not None:
            initrefs(gd.init)

    seen = {program.entry} | init_funcs
    work = list(seen)
    while work:
        f = work.pop()
        for g in ref_map.get(f, ()):
            if g in ref_map and g not in seen:
                seen.add(g)
                work.append(g)
    return seen


def _check_ginit(gi: GlobalInit, t: TypeRef, program: Program, symbols: dict[str, str],
                 diags: list[Diagnostic], where: str) -> None:
    if gi.kind == "null":
        if t.kind not in ("ptr", "fnptr"):
            diags.append(Diagnostic(0, 0, f"null initializer for non-pointer in {where}"))
        return
    if gi.kind == "int":
        if t.kind != "i64":
            diags.append(Diagnostic(0, 0, f"integer initializer for non-i64 in {where}"))
        return
    if gi.kind == "ref":
        target = symbols.get(gi.value)
        if target is None:
            diags.append(Diagnostic(0, 0, f"unresolved reference @{gi.value} in {where}"))
        elif target == "func" and t.kind != "fnptr":
            diags.append(Diagnostic(0, 0, f"function reference into non-fnptr cell in {where}"))
        elif target == "global" and t.kind != "ptr":
            diags.append(Diagnostic(0, 0, f"global reference into non-ptr cell in {where}"))
        return
    if gi.kind == "agg":
        if t.kind == "struct":
            sd = program.struct_map.get(t.struct_name)
            if sd is None:
                return
            if len(gi.elems) != len(sd.fields):
                diags.append(Diagnostic(0, 0, f"aggregate arity mismatch in {where}"))
                return
            for e, (_, ft) in zip(gi.elems, sd.fields):
                _check_ginit(e, ft, program, symbols, diags, where)
        elif t.kind == "array":
            if len(gi.elems) != t.count:
                diags.append(Diagnostic(0, 0, f"aggregate arity mismatch in {where}"))
                return
            for e in gi.elems:
                _check_ginit(e, t.elem, program, symbols, diags, where)
        else:
            diags.append(Diagnostic(0, 0, f"aggregate initializer for scalar in {where}"))


def _cfg_analysis(fn: Function) -> tuple[list[str], dict[str, set[str]], set[str]]:
    """Reverse post order, dominator sets, and the reachable-label set."""
    label_set = {b.label for b in fn.blocks}
    succ: dict[str, list[str]] = {}
    for block in fn.blocks:
        targets: list[str] = []
        if block.instrs:
            last = block.instrs[-1]
            if last.op == "br":
                targets = [last.operands[0].value]
            elif last.op == "cbr":
                targets = [last.operands[1].value, last.operands[2].value]
        succ[block.label] = [t for t in targets if t in label_set]

    entry = fn.blocks[0].label
    post: list[str] = []
    seen: set[str] = set()
    stack: list[tuple[str, int]] = [(entry, 0)]
    seen.add(entry)
    while stack:
        label, i = stack[-1]
        if i < len(succ[label]):
            stack[-1] = (label, i + 1)
            nxt = succ[label][i]
            if nxt not in seen:
                seen.add(nxt)
                stack.append((nxt, 0))
        else:
            post.append(label)
            stack.pop()
    rpo = list(reversed(post))

    preds: dict[str, list[str]] = {l: [] for l in rpo}
    for l in rpo:
        for s in succ[l]:
            if s in preds:
                preds[s].append(l)

    dom: dict[str, set[str]] = {l: set(rpo) for l in rpo}
    dom[entry] = {entry}
    changed = True
    while changed:
        changed = False
        for l in rpo:
            if l == entry:
                continue
            ps = [p for p in preds[l]]
            new = set(rpo)
            for p in ps:
                new &= dom[p]
            new |= {l}
            if not ps:
                new = {l}
            if new != dom[l]:
                dom[l] = new
                changed = True
    return rpo, dom, seen


def _check_function(fn: Function, program: Program, struct_map: dict[str, StructDef],
                    symbols: dict[str, str], diags: list[Diagnostic], info: TypeInfo,
                    transition_sites: list[str]) -> None:
    def err(ins: Instr, msg: str) -> None:
        diags.append(Diagnostic(ins.line, 1, f"@{fn.name}: {msg}"))

    if not fn.blocks:
        diags.append(Diagnostic(0, 0, f"@{fn.name}: function has no blocks"))
        return

    labels = [b.label for b in fn.blocks]
    label_set = set()
    for lbl in labels:
        if lbl in label_set:
            diags.append(Diagnostic(0, 0, f"@{fn.name}: duplicate block label {lbl}"))
        label_set.add(lbl)
    if len(label_set) != len(labels):
        return  # dominance below assumes unique labels

    param_types: dict[str, TypeRef] = {}
    for pname, ptype in fn.params:
        if pname in param_types:
            diags.append(Diagnostic(0, 0, f"@{fn.name}: duplicate parameter %{pname}"))
        if ptype.kind == "opaque":
            diags.append(Diagnostic(0, 0, f"@{fn.name}: opaque parameter %{pname}"))
        param_types[pname] = ptype
        info.reg_types[(fn.name, pname)] = ptype

    if fn.ret is not None and fn.ret.kind == "opaque":
        diags.append(Diagnostic(0, 0, f"@{fn.name}: opaque return type"))

    rpo, dom, reachable = _cfg_analysis(fn)
    block_map = fn.block_map()

    # Single-assignment def sites.
    def_site: dict[str, tuple[str, int]] = {p: ("", -1) for p in param_types}
    for block in fn.blocks:
        for idx, ins in enumerate(block.instrs):
            if ins.dest is not None:
                if ins.dest in def_site:
                    err(ins, f"register %{ins.dest} redefined")
                else:
                    def_site[ins.dest] = (block.label, idx)

    def use_ok(use_label: str, use_idx: int, reg_name: str) -> bool:
        """SSA discipline: a use must be dominated by its definition."""
        site = def_site.get(reg_name)
        if site is None:
            return False
        dlabel, didx = site
        if dlabel == "":
            return True  # parameter
        if use_label not in reachable:
            return True  # dead code: existence of a def suffices
        if dlabel == use_label:
            return didx < use_idx
        return dlabel in dom.get(use_label, set())

    def operand_type(ins: Instr, op: Operand, use_label: str, use_idx: int) -> TypeRef | None:
        if op.kind == "reg":
            if op.value not in def_site:
                err(ins, f"register %{op.value} used before definition")
                return None
            if not use_ok(use_label, use_idx, op.value):
                err(ins, f"register %{op.value} used where its definition may not have "
                         "executed (route cross-block merges through memory)")
                return None
            return info.reg_types.get((fn.name, op.value))
        if op.kind == "glob":
            gd = program.global_map.get(op.value)
            if gd is None:
                if op.value in program.function_map:
                    err(ins, f"function @{op.value} used as a value operand (use funcaddr)")
                else:
                    err(ins, f"unresolved global @{op.value}")
                return None
            return ptr_to(gd.type)
        return None

    def define(ins: Instr, t: TypeRef | None) -> None:
        if ins.dest is not None and t is not None:
            info.reg_types[(fn.name, ins.dest)] = t

    # Type blocks in reverse post order so definitions are typed before
    # dominated uses; dead blocks afterwards in textual order.
    ordered = [block_map[l] for l in rpo]
    ordered += [b for b in fn.blocks if b.label not in reachable]
    for block in ordered:
        for idx, ins in enumerate(block.instrs):
            iid = f"{fn.name}:{block.label}:{idx}"
            is_term = ins.op in TERMINATORS
            if is_term and idx != len(block.instrs) - 1:
                err(ins, f"terminator {ins.op} before end of block {block.label}")
            if ins.dest is not None and ins.op not in VALUE_OPS and ins.op not in ("call", "icall"):
                err(ins, f"{ins.op} does not produce a value")
            if ins.dest is None and ins.op in VALUE_OPS:
                err(ins, f"{ins.op} result must be assigned to a register")

            ot = lambda op: operand_type(ins, op, block.label, idx)  # noqa: E731

            rtype: TypeRef | None = None
            if ins.op == "const":
                rtype = I64
            elif ins.op == "input":
                rtype = I64
            elif ins.op == "config":
                rtype = I64
            elif ins.op == "sizeof":
                t = ins.operands[0].value
                _check_value_type(t, struct_map, err, ins, "sizeof")
                rtype = I64
            elif ins.op == "alloc":
                t = ins.operands[0].value
                _check_value_type(t, struct_map, err, ins, "alloc")
                rtype = ptr_to(t)
            elif ins.op == "malloc":
                st = ot(ins.operands[0])
                if st is not None and st.kind != "i64":
                    err(ins, "malloc size must be i64")
                rtype = ptr_to(OPAQUE)
            elif ins.op == "free":
                pt = ot(ins.operands[0])
                if pt is not None and pt.kind != "ptr":
                    err(ins, "free operand must be a pointer")
            elif ins.op == "load":
                pt = ot(ins.operands[0])
                if pt is not None:
                    if pt.kind != "ptr":
                        err(ins, "load operand must be a pointer")
                    elif pt.pointee.kind == "opaque":
                        err(ins, "load through opaque pointer (cast it first)")
                    elif pt.pointee.kind not in SCALAR_KINDS:
                        err(ins, f"load of aggregate type {pt.pointee}")
                    else:
                        rtype = pt.pointee
            elif ins.op == "store":
                vt = ot(ins.operands[0])
                pt = ot(ins.operands[1])
                if pt is not None:
                    if pt.kind != "ptr":
                        err(ins, "store target must be a pointer")
                    elif pt.pointee.kind == "opaque":
                        err(ins, "store through opaque pointer (cast it first)")
                    elif pt.pointee.kind not in SCALAR_KINDS:
                        err(ins, f"store into aggregate type {pt.pointee}")
                    elif vt is not None and vt != pt.pointee:
                        err(ins, f"store of {vt} into {pt.pointee} cell")
            elif ins.op == "gep":
                pt = ot(ins.operands[0])
                sel = ins.operands[1]
                if pt is not None and pt.kind != "ptr":
                    err(ins, "gep operand must be a pointer")
                    pt = None
                if pt is not None:
                    base = pt.pointee
                    if sel.kind == "field":
                        if base.kind != "struct":
                            err(ins, f"gep field on non-struct pointer {pt}")
                        else:
                            sd = struct_map.get(base.struct_name)
                            if sd is None:
                                pass  # unknown struct reported already
                            elif not (0 <= sel.value < len(sd.fields)):
                                err(ins, f"gep field {sel.value} out of range for %{sd.name}")
                            else:
                                rtype = ptr_to(sd.fields[sel.value][1])
                                info.gep_offsets[iid] = field_offset(sd, sel.value, program)
                    else:
                        it = ot(sel)
                        if it is not None and it.kind != "i64":
                            err(ins, "gep index must be i64")
                        if base.kind == "array":
                            rtype = ptr_to(base.elem)
                            info.gep_strides[iid] = sizeof_type(base.elem, program)
                        elif base.kind == "opaque":
                            err(ins, "gep through opaque pointer (cast it first)")
                        else:
                            # pointer arithmetic over a non-array pointee
                            rtype = pt
                            info.gep_strides[iid] = sizeof_type(base, program)
            elif ins.op == "cast":
                st = ot(ins.operands[0])
                target = ins.operands[1].value
                if st is not None and st.kind != "ptr":
                    err(ins, "cast source must be a pointer")
                if target.kind != "ptr":
                    err(ins, f"cast target must be a pointer type, got {target}")
                else:
                    check_pointee = target.pointee
                    if check_pointee.kind != "opaque":
                        _check_value_type(check_pointee, struct_map, err, ins, "cast")
                    rtype = target
            elif ins.op == "funcaddr":
                if ins.operands[0].value not in program.function_map:
                    err(ins, f"unresolved function @{ins.operands[0].value}")
                rtype = FNPTR
            elif ins.op in ARITH_OPS:
                for opnd in ins.operands:
                    t = ot(opnd)
                    if t is not None and t.kind != "i64":
                        err(ins, f"{ins.op} operand must be i64")
                rtype = I64
            elif ins.op == "cmp":
                for opnd in ins.operands[1:]:
                    t = ot(opnd)
                    if t is not None and t.kind != "i64":
                        err(ins, "cmp operand must be i64")
                rtype = I64
            elif ins.op in ("call", "spawn"):
                callee = program.function_map.get(ins.operands[0].value)
                if callee is None:
                    err(ins, f"unresolved function @{ins.operands[0].value}")
                else:
                    args = ins.operands[1:]
                    if len(args) != len(callee.params):
                        err(ins, f"@{callee.name} expects {len(callee.params)} args, got {len(args)}")
                    for a, (_, pt2) in zip(args, callee.params):
                        at = ot(a)
                        if at is not None and at != pt2:
                            err(ins, f"argument type {at} does not match parameter {pt2}")
                    if ins.op == "call":
                        if ins.dest is not None and callee.ret is None:
                            err(ins, f"@{callee.name} returns void")
                        rtype = callee.ret
                    elif ins.dest is not None:
                        err(ins, "spawn does not produce a value")
            elif ins.op == "icall":
                ft = ot(ins.operands[0])
                if ft is not None and ft.kind != "fnptr":
                    err(ins, "icall callee must be fnptr")
                for a in ins.operands[1:]:
                    ot(a)
                rtype = None  # dynamic; a destination register gets no static type
            elif ins.op == "br":
                if ins.operands[0].value not in label_set:
                    err(ins, f"unknown label {ins.operands[0].value}")
            elif ins.op == "cbr":
                ct = ot(ins.operands[0])
                if ct is not None and ct.kind != "i64":
                    err(ins, "cbr condition must be i64")
                for lblop in ins.operands[1:]:
                    if lblop.value not in label_set:
                        err(ins, f"unknown label {lblop.value}")
            elif ins.op == "ret":
                if fn.ret is None and ins.operands:
                    err(ins, "ret with value in void function")
                if fn.ret is not None:
                    if not ins.operands:
                        err(ins, "ret without value in non-void function")
                    else:
                        t = ot(ins.operands[0])
                        if t is not None and t != fn.ret:
                            err(ins, f"ret type {t} does not match {fn.ret}")
            elif ins.op == "syscall":
                pass
            elif ins.op == "start_processing":
                transition_sites.append(iid)

            define(ins, rtype)

        if not block.instrs or block.instrs[-1].op not in TERMINATORS:
            diags.append(Diagnostic(0, 0, f"@{fn.name}: block {block.label} does not end in a terminator"))


def _check_value_type(t: TypeRef, struct_map: dict[str, StructDef], err, ins: Instr, where: str) -> None:
    if t.kind == "opaque":
        err(ins, f"opaque type not allowed in {where}")
        return
    if t.kind == "struct" and t.struct_name not in struct_map:
        err(ins, f"unknown struct %{t.struct_name} in {where}")
    elif t.kind == "ptr" and t.pointee.kind != "opaque":
        _check_value_type(t.pointee, struct_map, err, ins, where)
    elif t.kind == "array":
        if t.count < 1:
            err(ins, f"array count must be >= 1 in {where}")
        _check_value_type(t.elem, struct_map, err, ins, where)


def load_program(text: str) -> Program:
    """Parse + validate, raising ParseError on any diagnostic."""
    program, diags = parse_program(text)
    if program is None:
        raise ParseError(diags)
    diags = diags + validate(program)
    if diags:
        raise ParseError(diags)
    return program
