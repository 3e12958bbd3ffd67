"""Analysis modes and report generation.

Four modes share the pipeline: baseline analyzes the whole program purely
statically; the other three interpret the initialization phase first and
differ in what they keep from it.  "unreachable" only drops init code that
can no longer run (re-analyzing what did run), "insensitive" seeds the
snapshot onto site-based heap objects, and "seeded" adds per-object heap
cloning, the full treatment.

A report carries the CFI equivalence classes per indirect call site (split
into init-phase observations and the processing-phase static set), the
debloat counts over the solved call graph, and per-phase syscall sets.
Reports are deterministic byte-for-byte and cached per (program, config,
mode, version).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .andersen import build_constraints, solve_worklist
from .interp import DEFAULT_BUDGET, Machine, run_init
from .ir import Program, format_program, iter_instrs
from .parser import validate
from .partition import partition
from .seeding import CloneTable, clone_heap_sites, extract_seeds

MODES = ("baseline", "unreachable", "insensitive", "seeded")

# (less precise, more precise) pairs whose per-site ECs must nest after
# projecting clones onto base sites.
MODE_ORDER = {
    ("baseline", "unreachable"),
    ("baseline", "insensitive"),
    ("baseline", "seeded"),
    ("insensitive", "seeded"),
}

# Instrumentation for the cache tests: bumped on every solver run.
SOLVE_CALLS = 0


class AnalysisError(Exception):
    pass


def program_hash(program: Program) -> str:
    return hashlib.sha256(format_program(program).encode()).hexdigest()


def config_hash(config: dict[str, int]) -> str:
    text = ",".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(text.encode()).hexdigest()


def cache_key(phash: str, config: dict[str, int], mode: str) -> str:
    text = f"{phash}|{config_hash(config)}|{mode}|{__version__}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class AnalysisReport:
    mode: str
    program_hash: str
    config: dict[str, int]
    toolkit_version: str
    scope: list[str]
    partition: dict | None
    executed_functions: list[str]
    spawned_entries: list[str]
    cfi: dict[str, dict]
    ec_stats: dict
    shared_call_sites: dict[str, dict]
    debloat: dict
    syscalls: dict
    seed_count: int

    def to_json(self) -> dict:
        return {
            "toolkit_version": self.toolkit_version,
            "mode": self.mode,
            "program_hash": self.program_hash,
            "config": {k: self.config[k] for k in sorted(self.config)},
            "config_hash": config_hash(self.config),
            "scope": self.scope,
            "partition": self.partition,
            "executed_functions": self.executed_functions,
            "spawned_entries": self.spawned_entries,
            "cfi": self.cfi,
            "ec_stats": self.ec_stats,
            "shared_call_sites": self.shared_call_sites,
            "debloat": self.debloat,
            "syscalls": self.syscalls,
            "seed_count": self.seed_count,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), indent=2, sort_keys=True).encode() + b"\n"


def report_from_json(data: dict) -> AnalysisReport:
    return AnalysisReport(
        mode=data["mode"],
        program_hash=data["program_hash"],
        config=dict(data["config"]),
        toolkit_version=data["toolkit_version"],
        scope=list(data["scope"]),
        partition=data["partition"],
        executed_functions=list(data["executed_functions"]),
        spawned_entries=list(data["spawned_entries"]),
        cfi=data["cfi"],
        ec_stats=data["ec_stats"],
        shared_call_sites=data["shared_call_sites"],
        debloat=data["debloat"],
        syscalls=data["syscalls"],
        seed_count=data["seed_count"],
    )


# ---------------------------------------------------------------------------
# Core analysis
# ---------------------------------------------------------------------------

def _icall_sites(program: Program) -> list[str]:
    out = []
    for fn in program.functions:
        for iid, _, _, ins in iter_instrs(fn):
            if ins.op == "icall":
                out.append(iid)
    return out


def _instr_counts(program: Program) -> dict[str, int]:
    return {fn.name: sum(len(b.instrs) for b in fn.blocks) for fn in program.functions}


def _reachable(program: Program, scope: frozenset[str], roots: set[str],
               call_graph: dict[str, frozenset[str]]) -> set[str]:
    """Functions reachable from the roots over solved call edges, restricted
    to the analysis scope."""
    sites_by_fn: dict[str, list[str]] = {}
    for fn in program.functions:
        sites = []
        for iid, _, _, ins in iter_instrs(fn):
            if ins.op in ("call", "icall", "spawn"):
                sites.append(iid)
        sites_by_fn[fn.name] = sites
    seen = {r for r in roots if r in scope}
    work = list(seen)
    while work:
        f = work.pop()
        for site in sites_by_fn.get(f, ()):
            for target in call_graph.get(site, ()):
                if target in scope and target not in seen:
                    seen.add(target)
                    work.append(target)
    return seen


def shared_callsite_split(program: Program, state: Machine | None,
                          scope: frozenset[str], cfi: dict[str, dict]) -> dict[str, dict]:
    """Indirect call sites observed during initialization whose function is
    re-analyzed for the processing phase: these need one CFI profile per
    phase (the two specialized clones of the containing function)."""
    if state is None:
        return {}
    shared = {}
    for site, entry in cfi.items():
        fn = site.split(":", 1)[0]
        if entry["init_observed"] and fn in scope and fn in state.executed_functions:
            shared[site] = entry
    return shared


def analyze(program: Program, config: dict[str, int], mode: str,
            budget: int = DEFAULT_BUDGET) -> AnalysisReport:
    global SOLVE_CALLS
    if mode not in MODES:
        raise AnalysisError(f"unknown mode {mode!r} (choose from {', '.join(MODES)})")
    diags = validate(program)
    if diags:
        raise AnalysisError(f"program failed validation: {diags[0]}")

    state: Machine | None = None
    part = None
    seeds: list = []
    clones: CloneTable | None = None

    if mode == "baseline":
        scope = frozenset(program.function_map)
        include_inits = True
        roots = {program.entry}
    else:
        stop = run_init(program, config, budget)
        if stop.kind == "finished":
            raise AnalysisError(
                "transition not reached: the program finished without executing "
                "start_processing under this configuration")
        if stop.kind == "budget":
            raise AnalysisError(f"transition not reached: {stop.message}")
        if stop.kind == "trap":
            raise AnalysisError(
                f"initialization trapped at {stop.location}: {stop.message}")
        state = stop.state
        part = partition(state)
        if mode == "unreachable":
            scope = frozenset(part.functions | state.executed_functions)
            clones = clone_heap_sites(state, site_based=True)
            seeds = extract_seeds(state, clones, fn_only=True)
            include_inits = True
        elif mode == "insensitive":
            scope = part.functions
            clones = clone_heap_sites(state, site_based=True)
            seeds = extract_seeds(state, clones)
            include_inits = False
        else:
            scope = part.functions
            clones = clone_heap_sites(state, site_based=False)
            seeds = extract_seeds(state, clones)
            include_inits = False
        roots = {f.fn.name for f in state.frames} | set(state.spawned_entries)

    graph = build_constraints(program, scope, include_global_inits=include_inits)
    SOLVE_CALLS += 1
    solution = solve_worklist(graph, seeds)

    init_observed: dict[str, set[str]] = {}
    if state is not None:
        for phase, site, target in state.trace.icalls:
            if phase == "init":
                init_observed.setdefault(site, set()).add(target)

    cfi: dict[str, dict] = {}
    for site in sorted(_icall_sites(program)):
        cfi[site] = {
            "init_observed": sorted(init_observed.get(site, ())),
            "processing_ec": sorted(solution.icall_targets.get(site, ())),
        }

    sizes = [len(e["processing_ec"]) for e in cfi.values()]
    ec_stats = {
        "sites": len(sizes),
        "avg": round(sum(sizes) / len(sizes), 6) if sizes else 0.0,
        "max": max(sizes) if sizes else 0,
    }

    reachable = _reachable(program, scope, roots, solution.call_graph)
    counts = _instr_counts(program)
    debloat = {
        "reachable_functions": sorted(reachable),
        "function_count": len(reachable),
        "instruction_count": sum(counts[f] for f in reachable),
    }

    processing_syscalls: set[str] = set()
    for fname in reachable:
        for _, _, _, ins in iter_instrs(program.function_map[fname]):
            if ins.op == "syscall":
                processing_syscalls.add(ins.operands[0].value)
    syscalls = {
        "init": sorted(state.syscalls_init) if state is not None else [],
        "processing": sorted(processing_syscalls),
    }

    return AnalysisReport(
        mode=mode,
        program_hash=program_hash(program),
        config=dict(config),
        toolkit_version=__version__,
        scope=sorted(scope),
        partition=part.to_json() if part is not None else None,
        executed_functions=sorted(state.executed_functions) if state is not None else [],
        spawned_entries=sorted(state.spawned_entries) if state is not None else [],
        cfi=cfi,
        ec_stats=ec_stats,
        shared_call_sites=shared_callsite_split(program, state, scope, cfi),
        debloat=debloat,
        syscalls=syscalls,
        seed_count=len(seeds),
    )


# ---------------------------------------------------------------------------
# Report cache
# ---------------------------------------------------------------------------

def cached_analyze(program: Program, config: dict[str, int], mode: str,
                   cache_dir: Path, stem: str,
                   budget: int = DEFAULT_BUDGET) -> tuple[bytes, bool]:
    """Analyze with the config-keyed report cache.

    Returns (report bytes, cache hit).  The cache file name carries the key
    of (program hash, config, mode, toolkit version); a stale or foreign
    file never matches because the embedded hashes are re-checked.
    """
    phash = program_hash(program)
    key = cache_key(phash, config, mode)
    path = cache_dir / f"{stem}.{key}.report.json"
    if path.exists():
        data = path.read_bytes()
        try:
            loaded = json.loads(data)
        except ValueError:
            loaded = None
        if (loaded is not None
                and loaded.get("program_hash") == phash
                and loaded.get("config_hash") == config_hash(config)
                and loaded.get("mode") == mode
                and loaded.get("toolkit_version") == __version__):
            return data, True
    report = analyze(program, config, mode, budget)
    data = report.to_bytes()
    cache_dir.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data, False


# ---------------------------------------------------------------------------
# Cross-mode comparison
# ---------------------------------------------------------------------------

def compare(a: AnalysisReport, b: AnalysisReport) -> dict:
    """Diff two reports for the same program and configuration.

    When the pair of modes is ordered (b strictly more precise than a), the
    per-site EC subset direction is asserted and violations are reported.
    """
    if a.program_hash != b.program_hash:
        raise AnalysisError("cannot compare: program hash mismatch")
    if config_hash(a.config) != config_hash(b.config):
        raise AnalysisError("cannot compare: configuration mismatch")

    per_site = {}
    violations = []
    ordered = (a.mode, b.mode) in MODE_ORDER
    for site in sorted(set(a.cfi) | set(b.cfi)):
        ec_a = set(a.cfi.get(site, {}).get("processing_ec", []))
        ec_b = set(b.cfi.get(site, {}).get("processing_ec", []))
        per_site[site] = {
            "size_a": len(ec_a),
            "size_b": len(ec_b),
            "removed": sorted(ec_a - ec_b),
            "added": sorted(ec_b - ec_a),
        }
        if ordered and not ec_b <= ec_a:
            violations.append({"site": site, "extra_targets": sorted(ec_b - ec_a)})

    sys_a = set(a.syscalls["processing"])
    sys_b = set(b.syscalls["processing"])
    return {
        "program_hash": a.program_hash,
        "config_hash": config_hash(a.config),
        "mode_a": a.mode,
        "mode_b": b.mode,
        "ordered": ordered,
        "per_site": per_site,
        "ec_stats": {
            "avg_a": a.ec_stats["avg"], "avg_b": b.ec_stats["avg"],
            "avg_delta": round(b.ec_stats["avg"] - a.ec_stats["avg"], 6),
            "max_a": a.ec_stats["max"], "max_b": b.ec_stats["max"],
        },
        "debloat": {
            "functions_a": a.debloat["function_count"],
            "functions_b": b.debloat["function_count"],
            "instructions_a": a.debloat["instruction_count"],
            "instructions_b": b.debloat["instruction_count"],
        },
        "syscalls": {
            "only_in_a": sorted(sys_a - sys_b),
            "only_in_b": sorted(sys_b - sys_a),
        },
        "violations": violations,
    }


def comparison_table(cmp: dict) -> str:
    """Plain-text rendering of a comparison."""
    lines = [
        f"modes: {cmp['mode_a']} vs {cmp['mode_b']}"
        + ("  (ordered: ECs must shrink)" if cmp["ordered"] else ""),
        f"avg EC size: {cmp['ec_stats']['avg_a']} -> {cmp['ec_stats']['avg_b']}"
        f"  (delta {cmp['ec_stats']['avg_delta']})",
        f"max EC size: {cmp['ec_stats']['max_a']} -> {cmp['ec_stats']['max_b']}",
        f"reachable functions: {cmp['debloat']['functions_a']} -> "
        f"{cmp['debloat']['functions_b']}",
        f"reachable instructions: {cmp['debloat']['instructions_a']} -> "
        f"{cmp['debloat']['instructions_b']}",
    ]
    if cmp["syscalls"]["only_in_a"]:
        lines.append("syscalls filtered out: " + ", ".join(cmp["syscalls"]["only_in_a"]))
    if cmp["syscalls"]["only_in_b"]:
        lines.append("syscalls added: " + ", ".join(cmp["syscalls"]["only_in_b"]))
    header = f"{'call site':<28} {'a':>3} {'b':>3}  removed targets"
    lines.append(header)
    lines.append("-" * len(header))
    for site, entry in cmp["per_site"].items():
        removed = ", ".join(entry["removed"]) if entry["removed"] else "-"
        lines.append(f"{site:<28} {entry['size_a']:>3} {entry['size_b']:>3}  {removed}")
    for v in cmp["violations"]:
        lines.append(f"VIOLATION at {v['site']}: unexpected targets {v['extra_targets']}")
    return "\n".join(lines) + "\n"
