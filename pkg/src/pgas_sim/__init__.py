"""Desk-scale PGAS communication runtime.

Symmetric heaps with offset translation, a lock-free reverse-offload ring to
a node proxy, cutover-based transport selection between collaborative direct
stores and a simulated copy engine, push-style collectives, and a benchmark
harness that reproduces the measurement methodology over the simulated cost
model.
"""

from . import amo, bench, collectives, rma
from .config import RuntimeConfig, load_config
from .dtypes import (ALL_TYPES, F32, F64, I8, I16, I32, I64, U8, U16, U32,
                     U64, ElementType)
from .errors import (CompletionError, ConfigError, ContractViolation,
                     GeometryError, HeapExhausted, LinkError,
                     PendingOperationsError, PgasError, SendAfterShutdown)
from .heap import AccessTable, PeId, SymmetricHeap, translate
from .ring import CompletionPool, Ring, RingMessage
from .runtime import PeContext, Runtime, init, my_pe, n_pes
from .transport import (CostModel, CutoverPolicy, EngineScheduler,
                        TopologyProfile, WorkGroupCtx, choose_path,
                        cohort_group, make_work_group, measure_cutover,
                        solo_group)

__version__ = "0.1.0"
