class FlunowError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(FlunowError, ValueError):
    """Invalid or incomplete experiment / synthesis configuration."""


class DataError(FlunowError, ValueError):
    """Input panel files that cannot be turned into a valid PanelDataset."""


class ModelError(FlunowError, RuntimeError):
    """
    A model failed to fit or predict during a walk-forward run.
    Carries the (model, location, horizon, week) context of the failure.
    """

    def __init__(self, message: str, model: str = "", location: str = "", horizon: int = 0, week: str = ""):
        self.model = model
        self.location = location
        self.horizon = horizon
        self.week = week
        context = ", ".join(
            f"{k}={v}" for k, v in
            (("model", model), ("location", location), ("horizon", horizon), ("week", week)) if v
        )
        super().__init__(f"{message} [{context}]" if context else message)


class InconclusiveTestError(FlunowError, ValueError):
    """Signed-rank test with no non-zero differences: no decision is possible."""
