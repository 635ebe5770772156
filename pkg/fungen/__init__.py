"""
fungen

Conditional discrete diffusion for functional protein sequence generation.
Annotation tags, sequence motifs and backbone coordinates steer an
absorbing-state denoiser; the package also ships the curation pipeline and
the evaluation metric suite used to judge generated sequences.
"""

import logging
import os

__version__ = "0.1.0"

logger = logging.getLogger(__name__)

# Process-wide defaults. Everything else is configured explicitly through
# JSON run configs (see fungen.config).
DEFAULT_SETTINGS = {
    "config_dir": "",  # Directory searched for relative --config paths
    "workers": 1,  # Worker pool size; 1 guarantees determinism
    "log_level": "WARNING",  # Root log level set by the CLI
    "float_digits": 6,  # Significant digits for floats in reports
}

CONFIG_DIR_ENV = "FUNGEN_CONFIG_DIR"


def get_settings() -> dict:
    """
    Resolve process settings.

    Returns:
        dict: DEFAULT_SETTINGS with the config directory taken from the
        FUNGEN_CONFIG_DIR environment variable when it is set.
    """
    settings = dict(DEFAULT_SETTINGS)

    config_dir = os.environ.get(CONFIG_DIR_ENV)
    if config_dir:
        settings["config_dir"] = config_dir
        logger.debug(f"Using config directory from {CONFIG_DIR_ENV}: {config_dir}")

    return settings
