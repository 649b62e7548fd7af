"""Miniature GPU program traces: grammar, CFG checks, and dominance analyses.

A trace file (.gput) is line oriented::

    program <name>
    func <fname>
    block <label> [succ <label> [<label>]] [prob <p>]
      malloc <sym> <bytes> [lazy]
      memcpy_h2d <sym> <bytes> [lazy]
      memcpy_d2h <sym> <bytes> [lazy]
      memset <sym> <bytes> [lazy]
      set_heap_limit <bytes>
      free <sym> [lazy]
      launch <kname> grid <gx> <gy> <gz> block <bx> <by> <bz>
             args <sym>[,<sym>...] dur <ms> [regs <n>] [smem <bytes>]
      call <fname>
    end

`#` starts a comment.  Byte counts are exact integers, no suffixes.  A
two-successor block may annotate `prob <p>`, the probability of taking
the first successor (default 0.5).  The function whose name matches the
`program` header is the entry point.

Programs are plain immutable data; every analysis here is a pure
function over them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from .errors import (
    MultipleExitError,
    RecursiveCallError,
    ThreadLimitError,
    TraceSyntaxError,
    UnknownSymbolError,
    UnreachableBlockError,
    UnresolvedFunctionError,
    UnresolvedLabelError,
)

MAX_THREADS_PER_BLOCK = 1024


class OpKind(enum.Enum):
    MALLOC = "malloc"
    MEMCPY_H2D = "memcpy_h2d"
    MEMCPY_D2H = "memcpy_d2h"
    MEMSET = "memset"
    FREE = "free"
    SET_HEAP_LIMIT = "set_heap_limit"
    LAUNCH = "launch"
    CALL = "call"


# Kinds that may carry the `lazy` suffix in source and be deferred to the
# runtime.  Launches anchor tasks and calls vanish at inlining, so neither
# can be lazy; set_heap_limit is interceptable but has no source suffix.
LAZY_ELIGIBLE = frozenset(
    {OpKind.MALLOC, OpKind.MEMCPY_H2D, OpKind.MEMCPY_D2H, OpKind.MEMSET, OpKind.FREE}
)


@dataclass(frozen=True)
class GpuOp:
    op_id: int
    kind: OpKind
    symbol: str | None = None
    args: tuple[str, ...] = ()
    bytes: int = 0
    kernel: str | None = None
    callee: str | None = None
    grid: tuple[int, int, int] = (0, 0, 0)
    block: tuple[int, int, int] = (0, 0, 0)
    regs_per_thread: int = 0
    smem_per_block: int = 0
    base_duration_ms: float = 0.0
    lazy: bool = False
    line: int = 0

    @property
    def threads_per_block(self) -> int:
        bx, by, bz = self.block
        return bx * by * bz

    @property
    def thread_blocks(self) -> int:
        gx, gy, gz = self.grid
        return gx * gy * gz


@dataclass(frozen=True)
class BasicBlock:
    label: str
    ops: tuple[GpuOp, ...] = ()
    succs: tuple[str, ...] = ()
    # probability of branching to succs[0] when there are two successors
    branch_prob: float = 0.5


@dataclass(frozen=True)
class FunctionGraph:
    name: str
    entry: str
    blocks: dict[str, BasicBlock] = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return list(self.blocks)

    @property
    def exit_label(self) -> str:
        for label, blk in self.blocks.items():
            if not blk.succs:
                return label
        raise MultipleExitError(f"function {self.name} has no exit block")

    def preds(self) -> dict[str, list[str]]:
        result: dict[str, list[str]] = {label: [] for label in self.blocks}
        for label, blk in self.blocks.items():
            for s in blk.succs:
                result[s].append(label)
        return result


@dataclass(frozen=True)
class Program:
    name: str
    functions: dict[str, FunctionGraph] = field(default_factory=dict)
    job_class: str | None = None

    @property
    def main(self) -> FunctionGraph:
        return self.functions[self.name]

    def all_ops(self) -> list[GpuOp]:
        out = []
        for fn in self.functions.values():
            for blk in fn.blocks.values():
                out.extend(blk.ops)
        return out


@dataclass(frozen=True)
class DominatorMap:
    """Dominator sets plus the immediate-dominator tree view.

    `doms[b]` is the full dominator set of block b (reflexive).  `idom[b]`
    is b's immediate dominator, None for the root.
    """

    root: str
    doms: dict[str, frozenset[str]]
    idom: dict[str, str | None]

    def dominates(self, a: str, b: str) -> bool:
        return a in self.doms[b]


def _int_field(tok: str, what: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise TraceSyntaxError(f"expected integer {what}, got {tok!r}", line) from None


def _float_field(tok: str, what: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise TraceSyntaxError(f"expected number {what}, got {tok!r}", line) from None


def _parse_op(tokens: list[str], op_id: int, line: int) -> GpuOp:
    kind_tok = tokens[0]
    rest = tokens[1:]

    def take_lazy(toks: list[str]) -> tuple[list[str], bool]:
        if toks and toks[-1] == "lazy":
            return toks[:-1], True
        return toks, False

    if kind_tok in ("malloc", "memcpy_h2d", "memcpy_d2h", "memset"):
        rest, lazy = take_lazy(rest)
        if len(rest) != 2:
            raise TraceSyntaxError(f"{kind_tok} needs <sym> <bytes>", line)
        nbytes = _int_field(rest[1], "byte count", line)
        if nbytes < 0:
            raise TraceSyntaxError(f"{kind_tok} byte count must be non-negative", line)
        if kind_tok == "malloc" and nbytes <= 0:
            raise TraceSyntaxError("malloc byte count must be positive", line)
        return GpuOp(op_id, OpKind(kind_tok), symbol=rest[0], bytes=nbytes, lazy=lazy, line=line)

    if kind_tok == "free":
        rest, lazy = take_lazy(rest)
        if len(rest) != 1:
            raise TraceSyntaxError("free needs <sym>", line)
        return GpuOp(op_id, OpKind.FREE, symbol=rest[0], lazy=lazy, line=line)

    if kind_tok == "set_heap_limit":
        if len(rest) != 1:
            raise TraceSyntaxError("set_heap_limit needs <bytes>", line)
        nbytes = _int_field(rest[0], "byte count", line)
        if nbytes < 0:
            raise TraceSyntaxError("set_heap_limit byte count must be non-negative", line)
        return GpuOp(op_id, OpKind.SET_HEAP_LIMIT, bytes=nbytes, line=line)

    if kind_tok == "call":
        if len(rest) != 1:
            raise TraceSyntaxError("call needs <fname>", line)
        return GpuOp(op_id, OpKind.CALL, callee=rest[0], line=line)

    if kind_tok == "launch":
        return _parse_launch(rest, op_id, line)

    raise TraceSyntaxError(f"unknown op {kind_tok!r}", line)


def _parse_launch(rest: list[str], op_id: int, line: int) -> GpuOp:
    if len(rest) < 9:
        raise TraceSyntaxError("launch needs <kname> grid gx gy gz block bx by bz ...", line)
    kname = rest[0]
    if rest[1] != "grid" or rest[5] != "block":
        raise TraceSyntaxError("launch expects 'grid' then 'block' dimension groups", line)
    grid = tuple(_int_field(t, "grid dim", line) for t in rest[2:5])
    blockdim = tuple(_int_field(t, "block dim", line) for t in rest[6:9])
    if any(d <= 0 for d in grid) or any(d <= 0 for d in blockdim):
        raise TraceSyntaxError("grid and block dims must be positive", line)
    threads = blockdim[0] * blockdim[1] * blockdim[2]
    if threads > MAX_THREADS_PER_BLOCK:
        raise ThreadLimitError(
            f"launch {kname}: {threads} threads per block exceeds {MAX_THREADS_PER_BLOCK}", line
        )

    args: tuple[str, ...] = ()
    dur: float | None = None
    regs = 0
    smem = 0
    i = 9
    while i < len(rest):
        key = rest[i]
        if i + 1 >= len(rest):
            raise TraceSyntaxError(f"launch option {key!r} missing value", line)
        val = rest[i + 1]
        if key == "args":
            args = tuple(a for a in val.split(",") if a)
        elif key == "dur":
            dur = _float_field(val, "duration", line)
        elif key == "regs":
            regs = _int_field(val, "register count", line)
        elif key == "smem":
            smem = _int_field(val, "shared memory bytes", line)
        else:
            raise TraceSyntaxError(f"unknown launch option {key!r}", line)
        i += 2
    if dur is None:
        raise TraceSyntaxError("launch needs dur <ms>", line)
    if dur <= 0:
        raise TraceSyntaxError("launch duration must be positive", line)
    if regs < 0 or smem < 0:
        raise TraceSyntaxError("regs and smem must be non-negative", line)
    return GpuOp(
        op_id,
        OpKind.LAUNCH,
        kernel=kname,
        args=args,
        grid=grid,  # type: ignore[arg-type]
        block=blockdim,  # type: ignore[arg-type]
        regs_per_thread=regs,
        smem_per_block=smem,
        base_duration_ms=dur,
        line=line,
    )


def parse_program(text: str) -> Program:
    """Parse trace text into a validated Program.

    Raises a TraceError subclass with a line number for every malformed
    construct: syntax errors, unknown symbols, unresolved labels or
    functions, thread-limit violations, recursive call graphs,
    unreachable blocks, and multi-exit functions.
    """
    program_name: str | None = None
    functions: dict[str, FunctionGraph] = {}

    cur_func: str | None = None
    cur_func_line = 0
    cur_blocks: dict[str, BasicBlock] = {}
    cur_label: str | None = None
    cur_ops: list[GpuOp] = []
    next_op_id = 0

    def close_block():
        nonlocal cur_label, cur_ops
        if cur_label is not None:
            blk = cur_blocks[cur_label]
            cur_blocks[cur_label] = replace(blk, ops=tuple(cur_ops))
        cur_label = None
        cur_ops = []

    def close_func(line: int):
        nonlocal cur_func, cur_blocks
        close_block()
        if cur_func is None:
            raise TraceSyntaxError("'end' outside a function", line)
        blocks = cur_blocks
        if not blocks:
            # an empty body still needs an entry/exit block
            blocks = {"entry": BasicBlock("entry")}
        entry = next(iter(blocks))
        functions[cur_func] = FunctionGraph(cur_func, entry, blocks)
        cur_func = None
        cur_blocks = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]

        if head == "program":
            if program_name is not None:
                raise TraceSyntaxError("duplicate program header", lineno)
            if len(tokens) != 2:
                raise TraceSyntaxError("program header needs exactly one name", lineno)
            program_name = tokens[1]
        elif head == "func":
            if program_name is None:
                raise TraceSyntaxError("func before program header", lineno)
            if cur_func is not None:
                raise TraceSyntaxError(f"func inside func {cur_func!r} (missing end?)", lineno)
            if len(tokens) != 2:
                raise TraceSyntaxError("func needs exactly one name", lineno)
            if tokens[1] in functions:
                raise TraceSyntaxError(f"duplicate function {tokens[1]!r}", lineno)
            cur_func = tokens[1]
            cur_func_line = lineno
        elif head == "block":
            if cur_func is None:
                raise TraceSyntaxError("block outside a function", lineno)
            close_block()
            rest = tokens[1:]
            if not rest:
                raise TraceSyntaxError("block needs a label", lineno)
            label = rest[0]
            if label in cur_blocks:
                raise TraceSyntaxError(f"duplicate block label {label!r}", lineno)
            succs: tuple[str, ...] = ()
            prob = 0.5
            rest = rest[1:]
            if rest:
                if rest[0] != "succ":
                    raise TraceSyntaxError(f"expected 'succ', got {rest[0]!r}", lineno)
                rest = rest[1:]
                if rest and rest[-2:-1] == ["prob"]:
                    prob = _float_field(rest[-1], "branch probability", lineno)
                    if not 0.0 <= prob <= 1.0:
                        raise TraceSyntaxError("branch probability must be in [0, 1]", lineno)
                    rest = rest[:-2]
                if not 1 <= len(rest) <= 2:
                    raise TraceSyntaxError("succ takes one or two labels", lineno)
                succs = tuple(rest)
                if len(succs) != 2 and prob != 0.5:
                    raise TraceSyntaxError("prob only applies to two-successor blocks", lineno)
            cur_blocks[label] = BasicBlock(label, succs=succs, branch_prob=prob)
            cur_label = label
        elif head == "end":
            close_func(lineno)
        else:
            if cur_func is None or cur_label is None:
                raise TraceSyntaxError(f"op {head!r} outside a block", lineno)
            cur_ops.append(_parse_op(tokens, next_op_id, lineno))
            next_op_id += 1

    if program_name is None:
        raise TraceSyntaxError("missing program header", 1)
    if cur_func is not None:
        raise TraceSyntaxError(f"function {cur_func!r} missing 'end'", cur_func_line)

    program = Program(program_name, functions)
    _validate(program)
    return program


def _validate(p: Program) -> None:
    if p.name not in p.functions:
        raise UnresolvedFunctionError(f"program entry function {p.name!r} not defined")

    declared = {op.symbol for op in p.all_ops() if op.kind is OpKind.MALLOC}

    for fn in p.functions.values():
        for label, blk in fn.blocks.items():
            for s in blk.succs:
                if s not in fn.blocks:
                    raise UnresolvedLabelError(
                        f"block {label!r} in {fn.name!r} names unknown successor {s!r}"
                    )
            for op in blk.ops:
                if op.kind is OpKind.CALL:
                    if op.callee not in p.functions:
                        raise UnresolvedFunctionError(
                            f"call to undefined function {op.callee!r}", op.line
                        )
                elif op.kind is not OpKind.LAUNCH and op.symbol is not None:
                    if op.symbol not in declared:
                        raise UnknownSymbolError(
                            f"symbol {op.symbol!r} is never allocated", op.line
                        )

        reachable = _reachable(fn, fn.entry)
        for label in fn.blocks:
            if label not in reachable:
                raise UnreachableBlockError(
                    f"block {label!r} in {fn.name!r} is unreachable from entry"
                )
        exits = [label for label, blk in fn.blocks.items() if not blk.succs]
        if len(exits) != 1:
            raise MultipleExitError(
                f"function {fn.name!r} must have exactly one exit block, found {exits}"
            )

    _check_acyclic_calls(p)


def _reachable(fn: FunctionGraph, start: str, skip: str | None = None) -> set[str]:
    seen: set[str] = set()
    if start == skip:
        return seen
    stack = [start]
    while stack:
        label = stack.pop()
        if label in seen:
            continue
        seen.add(label)
        for s in fn.blocks[label].succs:
            if s != skip and s not in seen:
                stack.append(s)
    return seen


def _check_acyclic_calls(p: Program) -> None:
    # colors: 0 unvisited, 1 on stack, 2 done
    color: dict[str, int] = {}

    def visit(name: str, via_line: int) -> None:
        state = color.get(name, 0)
        if state == 1:
            raise RecursiveCallError(f"recursive call cycle through {name!r}", via_line)
        if state == 2:
            return
        color[name] = 1
        fn = p.functions[name]
        for blk in fn.blocks.values():
            for op in blk.ops:
                if op.kind is OpKind.CALL:
                    visit(op.callee, op.line)  # type: ignore[arg-type]
        color[name] = 2

    visit(p.name, 0)
    for name in p.functions:
        if color.get(name, 0) != 2:
            visit(name, 0)


def _postorder(fn: FunctionGraph, entry: str, succs_of) -> list[str]:
    order: list[str] = []
    seen: set[str] = set()
    stack: list[tuple[str, int]] = [(entry, 0)]
    seen.add(entry)
    while stack:
        node, idx = stack[-1]
        nxt = succs_of(node)
        if idx < len(nxt):
            stack[-1] = (node, idx + 1)
            child = nxt[idx]
            if child not in seen:
                seen.add(child)
                stack.append((child, 0))
        else:
            order.append(node)
            stack.pop()
    return order


def _dominators(nodes: list[str], root: str, preds: dict[str, list[str]], rpo: list[str]) -> DominatorMap:
    all_nodes = frozenset(nodes)
    doms: dict[str, frozenset[str]] = {n: all_nodes for n in nodes}
    doms[root] = frozenset({root})
    changed = True
    while changed:
        changed = False
        for n in rpo:
            if n == root:
                continue
            ps = [p for p in preds[n] if p in all_nodes]
            new = all_nodes
            for p in ps:
                new = new & doms[p]
            new = new | {n}
            if new != doms[n]:
                doms[n] = new
                changed = True

    idom: dict[str, str | None] = {root: None}
    for n in nodes:
        if n == root:
            continue
        strict = doms[n] - {n}
        # the immediate dominator is the strict dominator dominated by all others
        idom[n] = max(strict, key=lambda d: len(doms[d])) if strict else None
    return DominatorMap(root, doms, idom)


def compute_dominators(fn: FunctionGraph) -> DominatorMap:
    """Iterative set-intersection dataflow rooted at the entry block."""
    preds = fn.preds()
    rpo = list(reversed(_postorder(fn, fn.entry, lambda n: list(fn.blocks[n].succs))))
    return _dominators(fn.labels, fn.entry, preds, rpo)


def compute_postdominators(fn: FunctionGraph) -> DominatorMap:
    """Dominators of the edge-reversed CFG rooted at the single exit."""
    exit_label = fn.exit_label
    rev_preds = {label: list(fn.blocks[label].succs) for label in fn.blocks}
    rev_succs = fn.preds()
    rpo = list(reversed(_postorder(fn, exit_label, lambda n: rev_succs[n])))
    return _dominators(fn.labels, exit_label, rev_preds, rpo)


def inline_calls(p: Program) -> Program:
    """Flatten the acyclic call graph into one single-function Program.

    Call sites are expanded depth first: the calling block is split at the
    call, the callee's blocks are spliced in with uniquified labels, and
    the callee's exit jumps to the split-off remainder.  Ops of the main
    function keep their op_ids; spliced callee ops get fresh ones so two
    expansions of the same function stay distinct.
    """
    main = p.functions[p.name]
    if not any(op.kind is OpKind.CALL for op in p.all_ops()):
        return Program(p.name, {p.name: main}, p.job_class)

    next_id = max((op.op_id for op in p.all_ops()), default=-1) + 1
    copy_count = 0
    out_blocks: dict[str, BasicBlock] = {}

    def fresh_ids(ops: tuple[GpuOp, ...]) -> tuple[GpuOp, ...]:
        nonlocal next_id
        renamed = []
        for op in ops:
            renamed.append(replace(op, op_id=next_id))
            next_id += 1
        return tuple(renamed)

    def unique(label: str) -> str:
        while label in out_blocks:
            label += "_"
        return label

    def splice(fn: FunctionGraph, label_map: dict[str, str], fresh: bool) -> tuple[str, str]:
        """Emit fn's blocks under label_map; return (entry, final exit) labels."""
        exit_final: dict[str, str] = {}
        for label, blk in fn.blocks.items():
            out_succs = tuple(label_map[s] for s in blk.succs)
            ops = fresh_ids(blk.ops) if fresh else blk.ops
            exit_final[label] = emit_chain(ops, label_map[label], out_succs, blk.branch_prob)
        return label_map[fn.entry], exit_final[fn.exit_label]

    def emit_chain(ops: tuple[GpuOp, ...], out_label: str, out_succs: tuple[str, ...], prob: float) -> str:
        """Emit ops as a block chain split at calls; return the last label."""
        nonlocal copy_count
        call_at = next((i for i, op in enumerate(ops) if op.kind is OpKind.CALL), None)
        if call_at is None:
            out_blocks[out_label] = BasicBlock(out_label, ops, out_succs, prob)
            return out_label
        callee = p.functions[ops[call_at].callee]  # type: ignore[index]
        copy_count += 1
        n = copy_count
        # reserve the head slot so block order still starts at the caller
        out_blocks[out_label] = BasicBlock(out_label)
        sub_map = {}
        for lbl in callee.blocks:
            out = unique(f"{callee.name}.{n}.{lbl}")
            sub_map[lbl] = out
            out_blocks[out] = BasicBlock(out)
        sub_entry, sub_exit = splice(callee, sub_map, fresh=True)
        cont_label = unique(f"{out_label}.c{n}")
        out_blocks[out_label] = BasicBlock(out_label, ops[:call_at], (sub_entry,), 0.5)
        out_blocks[sub_exit] = replace(out_blocks[sub_exit], succs=(cont_label,))
        return emit_chain(ops[call_at + 1 :], cont_label, out_succs, prob)

    splice(main, {lbl: lbl for lbl in main.blocks}, fresh=False)
    fn = FunctionGraph(p.name, main.entry, out_blocks)
    return Program(p.name, {p.name: fn}, p.job_class)


def format_program(p: Program) -> str:
    """Pretty-print a Program back to trace text; inverse of parse_program."""
    lines = [f"program {p.name}"]
    for fn in p.functions.values():
        lines.append(f"func {fn.name}")
        for blk in fn.blocks.values():
            head = f"block {blk.label}"
            if blk.succs:
                head += " succ " + " ".join(blk.succs)
                if len(blk.succs) == 2 and blk.branch_prob != 0.5:
                    head += f" prob {blk.branch_prob}"
            lines.append(head)
            for op in blk.ops:
                lines.append("  " + _format_op(op))
        lines.append("end")
    return "\n".join(lines) + "\n"


def _format_op(op: GpuOp) -> str:
    lazy = " lazy" if op.lazy else ""
    k = op.kind
    if k is OpKind.MALLOC or k in (OpKind.MEMCPY_H2D, OpKind.MEMCPY_D2H, OpKind.MEMSET):
        return f"{k.value} {op.symbol} {op.bytes}{lazy}"
    if k is OpKind.FREE:
        return f"free {op.symbol}{lazy}"
    if k is OpKind.SET_HEAP_LIMIT:
        return f"set_heap_limit {op.bytes}"
    if k is OpKind.CALL:
        return f"call {op.callee}"
    gx, gy, gz = op.grid
    bx, by, bz = op.block
    parts = [f"launch {op.kernel} grid {gx} {gy} {gz} block {bx} {by} {bz}"]
    if op.args:
        parts.append("args " + ",".join(op.args))
    dur = op.base_duration_ms
    parts.append(f"dur {int(dur) if dur == int(dur) else dur}")
    if op.regs_per_thread:
        parts.append(f"regs {op.regs_per_thread}")
    if op.smem_per_block:
        parts.append(f"smem {op.smem_per_block}")
    return " ".join(parts)
