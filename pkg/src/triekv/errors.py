"""Exception types shared across the store."""


class StoreError(Exception):
    """Base class for all store failures."""


class InvalidArgument(StoreError):
    pass


class InvalidConfig(StoreError):
    pass


class CorruptionError(StoreError):
    """On-disk state failed a structural or checksum validation."""


class BudgetExhausted(StoreError):
    """Every resident region is pinned; nothing can be evicted."""


class StoreLocked(StoreError):
    """Another live handle owns the store directory."""


class StoreClosed(StoreError):
    pass


class StoreFailed(StoreError):
    """An earlier internal failure poisoned this handle; reopen the store."""
