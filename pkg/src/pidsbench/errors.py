"""Exception hierarchy for pidsbench."""


class PidsbenchError(Exception):
    """Base class for every error raised by the pipeline."""


class ConfigError(PidsbenchError):
    def __init__(self, message: str, path: str | None = None) -> None:
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class IngestError(PidsbenchError):
    pass


class SplitLeakageError(IngestError):
    def __init__(self, split: str, window_start: int, node_ids: list[str]) -> None:
        self.split = split
        self.window_start = window_start
        self.node_ids = node_ids
        preview = ", ".join(node_ids[:5])
        super().__init__(
            f"attack activity leaks into {split} window starting at {window_start}: {preview}"
        )


class TransformError(PidsbenchError):
    pass


class FeaturizationError(PidsbenchError):
    pass


class BatchingError(PidsbenchError):
    pass


class ModelError(PidsbenchError):
    pass


class NonFiniteGradientError(ModelError):
    def __init__(self, parameter_names: list[str]) -> None:
        self.parameter_names = parameter_names
        super().__init__(f"non-finite gradient in: {', '.join(parameter_names)}")


class EvaluationError(PidsbenchError):
    pass


class CacheError(PidsbenchError):
    pass
