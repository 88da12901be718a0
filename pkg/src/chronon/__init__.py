"""Entanglement-assisted two-way clock synchronization toolkit."""
from .correlator import (CorrelationHistogram, NoPeakFoundError, NormalizationError, PeakSearchResult,
                         autocorrelate, correlate, find_peak, g2_normalize)
from .peakfit import CascadeFit, FitError, G2Fit, ResidualReport, fit_cascade, fit_g2, residual_report
from .qdsim import (ClockParams, GroundTruth, LinkParams, MeasurementConfig, PolarizationState, SourceParams,
                    simulate_hbt, simulate_run, simulate_tomography_set)
from .syncproto import (DelayVerification, SyncProtocolError, SyncReport, apply_offset, compute_sync,
                        kappa_from_reference, path_length_from_roundtrip, verify_delay_insertion)
from .timetags import TagFormatError, TagStream, TagTruncationError, TimeTag, read_stream, write_stream
from .tomography import (DensityMatrix, ProjectionCounts, ReconstructionError, TimeBinSeries, WaveplateCorrection,
                         apply_waveplate, concurrence, fidelity, fit_fidelity_oscillation, mle_reconstruct, project_coincidences,
                         tomo_timeseries)

__version__ = "0.1.0"
