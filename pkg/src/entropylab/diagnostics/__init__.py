from .enumeration import DEFAULT_GUARD, EnumeratedDistribution, EnumerationGuardError, enumerate_distribution
from .lemmas import (AdvantageNotCentered, CorollaryVerdict, DriftResult, EntropyReport, FormatMassReport,
                     InterferenceReport, VersionMismatch, corollary_check, drift_order, entropy_rate_check,
                     entropy_report, format_mass, group_bundles, interference, kernel_drift, mean_token_entropy,
                     predicted_vs_observed_drift, rel_error, sample_corollary_instance)
from .metrics import DegeneracyReport, degeneracy_metrics, duplication_ratio, separation_score
