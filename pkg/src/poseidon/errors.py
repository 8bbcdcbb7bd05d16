class ProtocolError(RuntimeError):
    """A message violated the synchronization protocol (bad length, duplicate, wrong scheme)."""


class StaleUpdateError(ProtocolError):
    """An update arrived for an iteration other than the chunk's current one."""


class SyncStateError(RuntimeError):
    """A syncer operation was invoked in the wrong state."""
