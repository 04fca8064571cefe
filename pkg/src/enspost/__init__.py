"""Statistical post-processing of ensemble temperature forecasts with EMOS and BMA."""
from .bma import BmaParams, fit_bma, predict_bma
from .dataset import Dataset, ForecastCase, Station, TrainingWindow, load_dataset, select_window
from .distributions import EnsemblePredictive, MixturePredictive, NormalPredictive
from .emos import EmosParams, fit_emos, predict_emos
from .verification import build_report, coverage_nominal, dm_test, ks_uniform_subsampled

__version__ = "0.1.0"
