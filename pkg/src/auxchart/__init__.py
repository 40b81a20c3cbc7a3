"""Shewhart-type process-mean control charts built on auxiliary-variable estimators."""

from .charts import (
    Calibration,
    ChartConfig,
    ControlLimits,
    LimitStyle,
    SignalReport,
    calibrate,
    estimate_limits,
    limits_for,
    limits_probability,
    limits_three_sigma,
    monitor,
)
from .errors import (
    AuxChartError,
    CalibrationRangeError,
    DegenerateSubgroupError,
    EstimatorDomainError,
    NearSingularError,
    PrecisionError,
)
from .estimators import (
    ALL_KINDS,
    EstimatorKind,
    EstimatorWeights,
    SubgroupStats,
    WeightSource,
    exact_mse,
    statistic,
    subgroup_stats,
    theoretical_mse,
    weights_for,
)
from .process import IN_CONTROL, ProcessParameters, RngStream, ShiftSpec, Subgroup, sample_subgroup
from .simulation import (
    ArlEntry,
    ArlProfile,
    PerformanceSummary,
    ShiftGrid,
    arl,
    arl_curve,
    compare_arl,
    performance_summary,
    run_length,
)

__version__ = "0.1.0"
