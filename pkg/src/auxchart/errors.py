"""Exception hierarchy shared across the package."""


class AuxChartError(ValueError):
    """Base class for all errors raised by auxchart."""


class DegenerateSubgroupError(AuxChartError):
    """A subgroup has zero spread in the auxiliary variable, so T1 is undefined."""


class EstimatorDomainError(AuxChartError):
    """The ratio-type estimators are evaluated outside x_bar + mu_x > 0."""


class NearSingularError(AuxChartError):
    """Weight normal equations are (numerically) singular."""


class CalibrationRangeError(AuxChartError):
    """No coefficient inside the admissible bracket attains the target ARL."""


class PrecisionError(AuxChartError):
    """The Monte Carlo budget cannot deliver the requested precision."""
