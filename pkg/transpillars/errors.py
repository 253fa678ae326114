###############################################################################
# Exceptions
###############################################################################


class DimensionError(ValueError):
    """Tensor or feature-map shapes do not agree"""


class ConfigurationError(ValueError):
    """A configuration value is invalid"""


class ContractError(RuntimeError):
    """An operation was called outside of its contract"""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss"""

    def __init__(self, stage: str, epoch: int, step: int, losses: dict) -> None:
        """Create divergence error

        Arguments
            stage
                The training stage ('base' or 'full')
            epoch
                The epoch in which the loss diverged
            step
                The global optimizer step
            losses
                The loss components at the time of divergence
        """
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.losses = losses
        components = ', '.join(f'{key}={value}' for key, value in losses.items())
        super().__init__(
            f'Non-finite loss in stage {stage}, epoch {epoch}, '
            f'step {step}: {components}')
