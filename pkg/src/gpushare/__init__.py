"""Compiler-guided sharing of multi-SM GPU devices, at desk scale.

Parse a miniature GPU program trace, lift it into schedulable tasks
(kernel launches bundled with the memory ops they depend on), and replay
batches of such programs through a deterministic discrete-event
simulator under four admission policies.
"""

from .device_model import PRESETS, DeviceSpec, DeviceState, device_spec
from .errors import (
    AnalysisError,
    ConfigError,
    ContractViolation,
    GpuShareError,
    LazyBindingError,
    TraceError,
)
from .lazy_runtime import LazyState, PseudoAddress, kernel_launch_prepare, replay
from .metrics import RunMetrics, compare, compute_metrics, run_workload
from .schedulers import PolicyConfig, Scheduler, parse_policy
from .sim_engine import SimConfig, SimJob, SimReport, run_sim
from .task_builder import (
    GpuTask,
    ProgramPoint,
    ResourceRequest,
    TaskAnalysis,
    UnitTask,
    analyze_program,
    build_unit_tasks,
    compute_resource_request,
    mark_lazy_ops,
    merge_unit_tasks,
    place_probe,
)
from .trace_model import (
    BasicBlock,
    FunctionGraph,
    GpuOp,
    OpKind,
    Program,
    compute_dominators,
    compute_postdominators,
    format_program,
    inline_calls,
    parse_program,
)
from .workload_gen import (
    STANDARD_SUITE,
    Workload,
    WorkloadJob,
    builtin_catalog,
    gen_workload,
    load_catalog,
    standard_workload,
    template_trace,
)

__version__ = "0.1.0"
