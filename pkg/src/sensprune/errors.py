"""Exception hierarchy shared by every stage."""


class SensPruneError(Exception):
    exit_code = 1


class ConfigError(SensPruneError):
    exit_code = 2


class ShapeError(ConfigError):
    """Tensor or layer shapes do not line up."""


class DataFormatError(SensPruneError):
    exit_code = 3

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class TrainingError(SensPruneError):
    exit_code = 4

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)


class ConstraintError(SensPruneError):
    """A structural edit would violate the network topology."""


class InvalidRequestError(SensPruneError, ValueError):
    pass
