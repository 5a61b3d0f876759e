"""Out-of-distribution detectors for trained classifiers."""
from .archive import ActivationArchive, load_archive, predicted_classes, save_archive, spatial_mean
from .calibration import CalibrationMap, ConfidenceCalibrator, confidence, fit_calibration
from .energy import EnergyDetector, energy
from .gram import GramDetector, gram_matrix
from .mahalanobis import MahalanobisDetector, layer_score
from .metrics import ScoreSeries, auroc, detection_accuracy, evaluate, tnr_at_tpr95
from .micronet import MicroNet, MicroNetClassifier, fgsm, forward, input_gradient

__version__ = "0.1.0"
