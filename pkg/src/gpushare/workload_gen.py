"""Seeded workload generation from a template catalog.

A catalog is a JSON file of job templates; each template expands to one
trace program whose segments become separately scheduled tasks.  A
workload is a shuffled batch of jobs sampled per class from a mix like
"3:1" (larges:smalls).  Everything is keyed off the seed so the same
(mix, n, seed, catalog) always yields byte-identical JSONL.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from importlib import resources

from .errors import ConfigError

MIB = 1024 * 1024

# the standard suite: four mixes at two batch sizes
STANDARD_SUITE: dict[str, tuple[str, int]] = {
    "w1": ("1:1", 16),
    "w2": ("2:1", 16),
    "w3": ("3:1", 16),
    "w4": ("5:1", 16),
    "w5": ("1:1", 32),
    "w6": ("2:1", 32),
    "w7": ("3:1", 32),
    "w8": ("5:1", 32),
}


@dataclass(frozen=True)
class WorkloadJob:
    job_id: str
    template: str
    job_class: str
    trace_text: str


@dataclass(frozen=True)
class Workload:
    mix: str
    n_jobs: int
    seed: int
    jobs: tuple[WorkloadJob, ...]

    def to_jsonl(self) -> str:
        lines = []
        for job in self.jobs:
            lines.append(json.dumps(
                {
                    "job_id": job.job_id,
                    "class": job.job_class,
                    "template": job.template,
                    "inline_trace": job.trace_text,
                },
                sort_keys=True,
            ))
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def workload_from_jsonl(text: str, mix: str = "", seed: int = -1) -> Workload:
    jobs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            jobs.append(WorkloadJob(rec["job_id"], rec["template"],
                                    rec["class"], rec["inline_trace"]))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"bad workload line {lineno}: {exc}") from None
    return Workload(mix, len(jobs), seed, tuple(jobs))


# -- catalogs ------------------------------------------------------------------


def builtin_catalog(name: str = "std") -> dict:
    fname = {"std": "catalog.json", "neural": "neural_catalog.json"}.get(name)
    if fname is None:
        raise ConfigError(f"unknown builtin catalog {name!r}")
    text = resources.files("gpushare.data").joinpath(fname).read_text()
    return json.loads(text)


def load_catalog(path: str) -> dict:
    if path in ("std", "neural"):
        return builtin_catalog(path)
    try:
        with open(path) as fh:
            cat = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read catalog: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"catalog is not valid JSON: {exc}") from None
    if "templates" not in cat:
        raise ConfigError("catalog has no 'templates' list")
    return cat


def template_names(catalog: dict, job_class: str) -> list[str]:
    return [t["name"] for t in catalog["templates"] if t["class"] == job_class]


def _template(catalog: dict, name: str) -> dict:
    for t in catalog["templates"]:
        if t["name"] == name:
            return t
    raise ConfigError(f"template {name!r} not in catalog")


def template_footprint_bytes(tmpl: dict) -> int:
    return sum(mib * MIB for seg in tmpl["segments"] for mib in seg["buffers_mib"])


def template_duration_ms(tmpl: dict) -> int:
    return sum(k["dur_ms"] for seg in tmpl["segments"] for k in seg["kernels"])


def template_trace(tmpl: dict) -> str:
    """Expand one template into a single-block trace program.

    Each segment is self-contained: allocate, copy in, launch, free.  The
    segment therefore forms one task whose memory is released before the
    next segment's first allocation, so a job never holds two segments'
    footprints at once.
    """
    lazy = " lazy" if tmpl.get("lazy") else ""
    name = tmpl["name"]
    lines = [f"program {name}", f"func {name}", "block entry"]
    for si, seg in enumerate(tmpl["segments"]):
        syms = []
        for bi, mib in enumerate(seg["buffers_mib"]):
            sym = f"s{si}b{bi}"
            syms.append(sym)
            nbytes = mib * MIB
            lines.append(f"  malloc {sym} {nbytes}{lazy}")
            lines.append(f"  memcpy_h2d {sym} {nbytes}{lazy}")
        args = ",".join(syms)
        for k in seg["kernels"]:
            lines.append(
                f"  launch {k['name']} grid {k['grid']} 1 1 "
                f"block {k['threads']} 1 1 args {args} dur {k['dur_ms']} "
                f"regs {k['regs']}"
                + (f" smem {k['smem']}" if k.get("smem") else "")
            )
        for sym in syms:
            lines.append(f"  free {sym}")
    lines.append("end")
    return "\n".join(lines) + "\n"


# -- generation ----------------------------------------------------------------


def parse_mix(mix: str) -> tuple[int, int]:
    """Parse 'L:S' into (large_ratio, small_ratio)."""
    try:
        rl, rs = mix.split(":")
        rl, rs = int(rl), int(rs)
    except ValueError:
        raise ConfigError(f"bad mix {mix!r}, expected like '3:1'") from None
    if rl < 0 or rs < 0 or rl + rs == 0:
        raise ConfigError(f"bad mix {mix!r}")
    return rl, rs


def gen_workload(mix: str, n: int, seed: int, catalog: dict | None = None) -> Workload:
    """Sample n jobs at the given larges:smalls mix, shuffled by seed.

    The large-job count is rounded up: a 16-job 5:1 mix yields
    ceil(5/6 * 16) = 14 larges and 2 smalls.
    """
    if catalog is None:
        catalog = builtin_catalog()
    if n < 1:
        raise ConfigError("workload needs at least one job")
    rl, rs = parse_mix(mix)
    if n < rl + rs:
        raise ConfigError(f"{n} jobs cannot realize a {mix} mix")
    n_large = math.ceil(rl / (rl + rs) * n)
    n_small = n - n_large
    smalls = template_names(catalog, "small")
    larges = template_names(catalog, "large")
    if not smalls and not larges:
        # single-class catalogs (the neural one): one shared pool
        pool = [t["name"] for t in catalog["templates"]]
        if not pool:
            raise ConfigError("catalog has no templates")
        smalls = larges = pool
    elif not smalls:
        smalls = larges
    elif not larges:
        larges = smalls
    rng = random.Random(f"{seed}|{mix}|{n}")
    picks = [rng.choice(smalls) for _ in range(n_small)]
    picks += [rng.choice(larges) for _ in range(n_large)]
    rng.shuffle(picks)
    width = max(2, len(str(n - 1)))
    jobs = []
    for i, name in enumerate(picks):
        tmpl = _template(catalog, name)
        jobs.append(WorkloadJob(f"j{i:0{width}d}", name, tmpl["class"],
                                template_trace(tmpl)))
    return Workload(mix, n, seed, tuple(jobs))


def standard_workload(name: str, seed: int, catalog: dict | None = None) -> Workload:
    try:
        mix, n = STANDARD_SUITE[name]
    except KeyError:
        raise ConfigError(
            f"unknown workload {name!r}; known: {', '.join(STANDARD_SUITE)}") from None
    return gen_workload(mix, n, seed, catalog)
