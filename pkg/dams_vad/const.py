FEATURE_MAGIC = b"DAMSFEAT"
FEATURE_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"

DEFAULT_SCALES = (1, 3, 9, 27)
SYNTHETIC_DURATIONS = (2, 6, 18, 54)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
PROBABILITY_CLAMP = 1e-7
GRAD_CHECK_STEP = 1e-6

LOG_LEVELS = {
    "error": "ERROR",
    "warn": "WARNING",
    "info": "INFO",
    "debug": "DEBUG",
}
