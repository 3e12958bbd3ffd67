"""Convert a transition snapshot into initial facts for the static solver.

Heap objects are cloned per concrete object (one abstract object per
allocation, named site#ordinal) so distinct objects from the same malloc
keep distinct points-to relationships; the site-based table is the ablation
that merges them back.  Cell and member identities use collapsed offsets,
folding every array element onto the first, which is exactly the solver's
field treatment.
"""

from __future__ import annotations

from dataclasses import dataclass

from .andersen import FLAT, Node, fn_node, obj
from .interp import FnVal, Machine, MemObject, PtrVal
from .ir import leaf_cells


class SeedingError(Exception):
    """A snapshot that cannot be seeded soundly (dangling pointers)."""


@dataclass(frozen=True)
class CloneTable:
    """Concrete heap object id -> abstract allocation name."""

    mapping: dict[int, str]
    site_based: bool

    def abstract_name(self, obj_id: int) -> str:
        return self.mapping[obj_id]


def clone_heap_sites(state: Machine, site_based: bool = False) -> CloneTable:
    """One abstract allocation per live heap object (or per site, for the
    ablation).  Clone ordinals follow allocation order at the site."""
    mapping: dict[int, str] = {}
    for meta, _ in state.live_heap_objects():
        if site_based:
            mapping[meta.obj] = meta.site
        else:
            mapping[meta.obj] = f"{meta.site}#{meta.seq}"
    return CloneTable(mapping, site_based)


def _member_for(state: Machine, clones: CloneTable, value, where: str) -> Node | None:
    if isinstance(value, FnVal):
        return fn_node(value.name)
    if isinstance(value, PtrVal):
        target = state.objects.get(value.obj)
        if target is None:
            raise SeedingError(f"{where}: pointer to unknown object")
        if target.kind == "heap":
            meta = state.heap_meta[target.obj]
            if meta.freed:
                raise SeedingError(f"{where}: dangling pointer to freed heap object "
                                   f"allocated at {meta.site}")
            base = clones.abstract_name(target.obj)
        elif target.kind == "global":
            base = target.base
        else:
            if target.dead:
                raise SeedingError(f"{where}: dangling pointer to a returned stack "
                                   f"slot allocated at {target.base}")
            base = target.base
        return obj(base, value.collapsed_offset // FLAT)
    return None  # ints, nulls, uninitialized


def _object_seeds(state: Machine, clones: CloneTable, memobj: MemObject,
                  owner_base: str, fn_only: bool) -> list[tuple[Node, Node]]:
    out: list[tuple[Node, Node]] = []
    effective = state.object_type(memobj)
    if effective.kind == "opaque":
        return out
    for cell in leaf_cells(effective, state.program):
        value = memobj.cells.get(cell.offset)
        if value is None:
            continue
        member = _member_for(state, clones, value,
                             f"cell {owner_base}+{cell.offset}")
        if member is None:
            continue
        if fn_only and member.kind != "fn":
            continue
        out.append((obj(owner_base, cell.collapsed // FLAT), member))
    return out


def extract_seeds(state: Machine, clones: CloneTable,
                  fn_only: bool = False) -> list[tuple[Node, Node]]:
    """Seed facts for every pointer-holding cell in globals, live stack
    slots, and live heap objects.

    Multiple cells that collapse onto one node (array elements; recursive
    stack slots from the same alloc) union their members.  fn_only keeps
    just the function-valued cells (the unreachable-code ablation).
    """
    seeds: set[tuple[Node, Node]] = set()
    for name in sorted(state.globals):
        memobj = state.objects[state.globals[name]]
        seeds.update(_object_seeds(state, clones, memobj, f"@{name}", fn_only))
    for memobj in state.live_stack_objects():
        seeds.update(_object_seeds(state, clones, memobj, memobj.base, fn_only))
    for meta, memobj in state.live_heap_objects():
        owner = clones.abstract_name(meta.obj)
        seeds.update(_object_seeds(state, clones, memobj, owner, fn_only))
    return sorted(seeds)


def seeds_json_lines(seeds: list[tuple[Node, Node]]) -> str:
    import json

    return "\n".join(
        json.dumps({"node": n.render(), "member": m.render()}) for n, m in seeds
    ) + ("\n" if seeds else "")


def project_node(node: Node) -> Node:
    """Collapse a clone back onto its base allocation site."""
    if node.kind == "obj" and "#" in node.base:
        return obj(node.base.split("#", 1)[0], node.field)
    return node


def project_members(members) -> frozenset[Node]:
    return frozenset(project_node(m) for m in members)
