"""
XferLab Configuration
Desk-scale transfer attack laboratory - defaults for every stage of the pipeline
"""

import os
from pathlib import Path

# Base directory
BASE_DIR = Path(__file__).parent

# Output directories
RUNS_DIR = BASE_DIR / "runs"
CONFIGS_DIR = BASE_DIR / "configs"


# ==========================================
# Autodiff Engine Configuration
# ==========================================
class EngineConfig:
    """Configuration for the numpy reverse-mode engine and SGD training"""

    # Training hyperparameters (mini-batch SGD with momentum)
    EPOCHS = 6
    LEARNING_RATE = 0.05
    BATCH_SIZE = 64
    MOMENTUM = 0.9
    ACCURACY_FLOOR = 0.80        # Held-out accuracy below this = under-trained

    # Architectures available in the model zoo
    ARCHITECTURES = ("logistic", "mlp", "vgg", "resnet")

    # Weight file format
    WEIGHT_MAGIC = b"XFW1"


# ==========================================
# Synthetic Dataset Configuration
# ==========================================
class DatasetConfig:
    """Configuration for the class-conditional synthetic image generator"""

    SEED = 0
    TRAIN_SIZE = 10000
    TEST_SIZE = 2000
    CLASSES = 10
    SHAPE = (1, 16, 16)          # (channels, height, width)

    # Generator knobs
    MAX_SHIFT = 3                # Random translation in pixels, both axes
    NOISE_STD = 0.06             # Gaussian pixel noise
    STROKES_PER_CLASS = 2        # Bars/boxes that identify a class
    SHARED_STROKES = 2           # Bars/boxes drawn into every class template
    SHARED_LEVEL = 0.6           # Shared strokes, relative to the sample contrast
    DISTRACTORS = 2              # Strokes borrowed from other classes per sample
    DISTRACTOR_RANGE = (0.3, 0.75)  # Distractor level, relative to the sample contrast
    BACKGROUND_RANGE = (0.15, 0.45)
    CONTRAST_RANGE = (0.2, 0.45)

    # 8-bit quantization grid
    LEVELS = 255

    DATASET_MAGIC = b"XFD1"


# ==========================================
# Baseline Attack Configuration
# ==========================================
class BaselineConfig:
    """Configuration for FGSM / I-FGSM / PGD / MI-FGSM baselines"""

    METHOD = "ifgsm"             # Options: 'fgsm', 'ifgsm', 'pgd', 'mifgsm'
    CONSTRAINT = "linf"          # Options: 'linf', 'l2'

    # l-infinity defaults
    EPSILON = 0.03
    STEP_SIZE = 1.0 / 255

    # l2 defaults
    L2_EPSILON = 1.0
    L2_STEP_SIZE = 0.1

    STEPS = 10                   # p, iterations of the baseline
    MOMENTUM = 1.0               # mu, MI-FGSM only
    RANDOM_START = None          # PGD restart radius; None = epsilon

    MEMBERSHIP_TOL = 1e-12

    TRAJECTORY_MAGIC = b"XFT1"


# ==========================================
# Enhancement Configuration
# ==========================================
class EnhanceConfig:
    """Configuration for the ILA / ILA++ enhancement phase"""

    MODE = "ilapp"               # Options: 'none', 'ila', 'ilapp'
    LAMBDA = float("inf")        # Ridge parameter; inf = H^T r guide
    NORMALIZED = True            # Row-normalize discrepancies before fitting
    STEPS = 100
    STEP_SIZE = None             # None = reuse the baseline step size
    TAP = "pool1"

    SPD_DIAGONAL_FLOOR = 1e-12   # Cholesky pivots below this are rejected

    GUIDE_MAGIC = b"XFG1"


# ==========================================
# Benchmark Configuration
# ==========================================
class BenchConfig:
    """Configuration for transfer evaluation and sweeps"""

    SOURCE = "vgg"
    VICTIMS = ("resnet", "mlp")
    POPULATION = 500             # Filtered examples per seed
    QUANTIZE = True              # Round to the 8-bit grid before evaluation
    INCLUDE_SOURCE = True        # Also report white-box success on the source

    SWEEP = "p"                  # Options: 'p', 'lambda', 'layer', 'seeds', 'baselines'
    SEEDS = (0, 1, 2, 3, 4)

    REPORT_COLUMNS = (
        "method", "baseline", "source", "victim", "constraint", "epsilon",
        "p", "lambda", "tap", "n", "success_rate", "mean_ce_loss",
        "mean_disturbance", "seed",
    )

    # Desk-scale trend checks over black-box rates (fractions, not percent)
    ILA_GAIN = 0.05              # ILA over the raw baseline
    TREND_SLACK = 0.01           # Shortfall tolerated by the "not worse" checks
    P_NEAR = 10
    P_FAR = 100
    LAMBDA_LARGE = 1e12
    LAMBDA_SMALL = 0.01
    TREND_COLUMNS = ("report", "check", "observed", "bound", "passed")

    ADVERSARIAL_MAGIC = b"XFA1"


# ==========================================
# System-Wide Configuration
# ==========================================
class SystemConfig:
    """Global settings for the command-line surface"""

    TOOL_NAME = "xferlab"
    VERSION = "1.0.0"

    # Parallelism: 0 = all available cores
    THREADS = 0
    THREADS_ENV = "XFERLAB_THREADS"

    # Logging and progress
    LOG_LEVEL = os.getenv("XFERLAB_LOG_LEVEL", "INFO")
    PROGRESS = True

    SEED = 0
    OUTPUT_DIR = str(RUNS_DIR / "default")
    MANIFEST_NAME = "manifest.json"
