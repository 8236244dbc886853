class BridgeError(Exception):
    """Base class for failures raised by this package."""


class BridgeConfigError(BridgeError):
    """Bad job parameters or trainer-config content."""


class BridgeDataError(BridgeError):
    """Dataset file does not match the expected schema."""
