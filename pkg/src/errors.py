class NonFiniteError(RuntimeError):
    def __init__(self, layer: int, where: str = "forward"):
        self.layer = layer
        super().__init__(f"Non-finite activation in layer {layer} ({where} pass)")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})")


class SimulationUnstableError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Non-finite field at integration step {step}; reduce dt")


class ObservationSingularityError(RuntimeError):
    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"Reciprocal marginal singular at state entry {index} (x={value})")


class StageError(RuntimeError):
    """Wraps any failure inside a pipeline stage so the CLI can report which stage broke."""

    EXIT_CODES = {
        "simulate": 10,
        "train-rom": 11,
        "train-forecaster": 12,
        "gen-obs": 13,
        "run-gla": 14,
        "report": 15,
        "sweep-surrogate": 16,
        "reorder-mesh": 17,
    }

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")

    @property
    def exit_code(self) -> int:
        return self.EXIT_CODES.get(self.stage, 1)
