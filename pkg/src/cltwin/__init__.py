"""Digital twin of a C+L band optical line system.

Physical layer (SRS fiber, EDFAs, GN-model NLI), a synthetic field link,
stage-wise calibration from telemetry and EDFA configuration optimization.
"""

from .amplifier import EdfaConfig, EdfaModel, amplify
from .calibration import (
    CalibrationReport,
    TwinState,
    accuracy_report,
    calibrate,
    stage1_baseline,
    stage2_totals,
    stage3_fit,
    stage4_nf,
    stage5_verify,
)
from .exceptions import NotCalibratedError, NumericalError, ValidationError
from .fiber import FiberSpan, propagate_span
from .field import FiberCut, GroundTruth, NoiseSpec, PerturbationSpec, SetConfig, SetLoading, make_field
from .link import LinkTopology, propagate_link, receiver_metrics, replica_topology
from .optimizer import (
    OptimizationOutcome,
    OptimizationProblem,
    equalize_receiver,
    lattice_search,
    objective,
    optimize,
    recover,
)
from .qot import HullError, TransponderCurve, default_curve, gsnr, nli_span, osnr_ref
from .spectral import ChannelGrid, PowerSpectrum, SpectralProfile, build_cl_grid, replica_grid

__version__ = "0.1.0"
