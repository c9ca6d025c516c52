"""Exception hierarchy shared across the package."""


class GPSFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(GPSFormerError, ValueError):
    pass


class ConfigError(GPSFormerError, ValueError):
    pass


class ArgumentError(GPSFormerError, ValueError):
    pass


class AggregationError(GPSFormerError, ValueError):
    pass


class GatherIndexError(GPSFormerError, IndexError):
    pass


class NonFiniteError(GPSFormerError, FloatingPointError):
    pass


class ParseError(GPSFormerError, ValueError):
    pass


class EpisodeError(GPSFormerError, ValueError):
    pass


class CheckpointError(GPSFormerError, ValueError):
    pass


class TrainingDiverged(GPSFormerError, RuntimeError):
    def __init__(self, message, epoch=None, batch_id=None, dump_path=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_id = batch_id
        self.dump_path = dump_path
