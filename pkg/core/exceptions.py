class UdaError(Exception):
    """Base class for adaptation pipeline exceptions"""
    exit_code = 1


class ConfigurationError(UdaError):
    """Raised when a configuration or call argument is invalid"""
    exit_code = 2


class RoleDatasetMismatchError(ConfigurationError):
    """Raised when a training role is given incompatible datasets"""
    pass


class DataError(UdaError):
    """Raised when input data is missing, unreadable or malformed"""
    exit_code = 3


class MissingDataError(DataError):
    """Raised when generated datasets are not present on disk"""
    pass


class ManifestNotFoundError(DataError):
    """Raised when a manifest file does not exist"""
    pass


class ImageReadError(DataError):
    """Raised when an image file cannot be decoded"""
    pass


class CheckpointError(DataError):
    """Raised when a checkpoint cannot be read or does not match"""
    pass


class UndefinedCoverageError(DataError):
    """Raised when oracle and baseline mAP coincide"""
    pass


class RunNotFoundError(DataError):
    """Raised when a requested run has no emitted report"""
    pass


class InternalInvariantError(UdaError):
    """Raised when an internal invariant is violated"""
    exit_code = 4


class AlignmentForbiddenError(InternalInvariantError):
    """Raised when feature alignment is invoked during student training"""
    pass
