"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration value or mode."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class TileFormatError(ValueError):
    """A tile or mask file failed to parse; message names the byte offset."""


class CheckpointFormatError(ValueError):
    """A checkpoint file failed to parse or does not match the model."""


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN/Inf; message carries step and last finite loss."""

    def __init__(self, step: int, last_finite: float | None):
        self.step = step
        self.last_finite = last_finite
        last = "none" if last_finite is None else f"{last_finite:.6g}"
        super().__init__(
            f"non-finite loss at step {step} (last finite loss: {last})"
        )
