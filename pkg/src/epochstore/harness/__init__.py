from .audit import PropertyAudit
from .crash import CrashConfig, CrashRecord, CrashReport, recovered_state, run_once, run_with_crashes
from .oplog import OpLog, OpLogEntry
from .oracle import oracle_replay
from .scheduler import CooperativeScheduler

__all__ = [
    "CooperativeScheduler", "CrashConfig", "CrashRecord", "CrashReport", "OpLog", "OpLogEntry",
    "PropertyAudit", "oracle_replay", "recovered_state", "run_once", "run_with_crashes",
]
