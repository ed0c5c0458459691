"""Exception hierarchy shared across the lab."""


class MiaLabError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(MiaLabError, ValueError):
    pass


class ContractError(MiaLabError, ValueError):
    """An input violated a documented precondition."""


class FormatError(MiaLabError, ValueError):
    pass


class SizingError(MiaLabError, ValueError):
    pass


class CalibrationError(MiaLabError, ValueError):
    pass


class ExperimentError(MiaLabError):
    """Wraps a failure with the repeat index and pipeline stage it came from."""

    def __init__(self, message: str, repeat: int | None = None, stage: str | None = None):
        self.repeat = repeat
        self.stage = stage
        where = []
        if repeat is not None:
            where.append(f"repeat {repeat}")
        if stage is not None:
            where.append(f"stage {stage}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
