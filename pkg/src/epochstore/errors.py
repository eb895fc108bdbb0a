"""Exception hierarchy shared by every layer of the store."""


class EpochStoreError(Exception):
    pass


# persistence layer

class GeometryError(EpochStoreError, ValueError):
    pass


class BadSuperblock(EpochStoreError):
    pass


class OutOfMemory(EpochStoreError, MemoryError):
    pass


class OversizeAllocation(EpochStoreError, ValueError):
    pass


class DoubleFree(EpochStoreError):
    pass


class UnsupportedOperation(EpochStoreError):
    pass


class CorruptImage(EpochStoreError):
    pass


# runtime

class OldSeeNewException(EpochStoreError):
    """An operation touched a payload labeled with a newer epoch than its own."""

    def __init__(self, op_epoch, payload_epoch):
        super().__init__(f"operation in epoch {op_epoch} saw payload from epoch {payload_epoch}")
        self.op_epoch = op_epoch
        self.payload_epoch = payload_epoch


class EpochAdvanced(EpochStoreError):
    """check_epoch found the global clock ahead of the operation's epoch."""

    def __init__(self, op_epoch, current):
        super().__init__(f"epoch advanced from {op_epoch} to {current}")
        self.op_epoch = op_epoch
        self.current = current


class OperationStateError(EpochStoreError, RuntimeError):
    """begin/end misuse: nested begin, end without begin, mutation outside an op."""


class RuntimeStateError(EpochStoreError, RuntimeError):
    pass


# structures / harness

class MissingVertex(EpochStoreError, KeyError):
    pass


class InconsistentSurvivors(EpochStoreError):
    pass


class IllFormedLog(EpochStoreError, ValueError):
    pass


class ConfigError(EpochStoreError, ValueError):
    pass
