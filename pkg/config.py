"""
The on-disk configuration document: a flat TOML file mapped onto
RegistrationConfig plus the pipeline-level switches.
"""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib  # type: ignore
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from _errors import ConfigError
from _globals import DEFAULT_ANGLES, DEFAULT_DEFORMABLE_RESOLUTION, DEFAULT_RESOLUTIONS, DEFAULT_SCALE_TOLERANCE
from core import LevelConfig, RegistrationConfig

# parallel per-level lists and the LevelConfig field each one feeds
LEVEL_KEYS = {
    'level_theta': 'theta',
    'level_iterations': 'iterations',
    'level_step_size': 'step_size',
    'level_mi_bins': 'mi_bins',
    'level_mi_window': 'mi_window',
    'level_mi_stride': 'mi_stride',
    'level_downsample': 'downsample',
    'level_smoothing': 'smoothing',
}
DEFAULT_DOWNSAMPLE = (4, 2, 1)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    angles: Tuple[float, ...] = DEFAULT_ANGLES
    resolutions: Tuple[int, ...] = DEFAULT_RESOLUTIONS
    scale_tolerance: float = DEFAULT_SCALE_TOLERANCE
    deterministic_seed: int = 0
    direction: Literal['he_to_shg', 'shg_to_he'] = 'he_to_shg'
    select_by: Literal['inliers', 'matches'] = 'inliers'
    ransac_threshold: float = 3.0
    ransac_iterations: int = 2000
    min_inliers: int = 8
    min_inlier_fraction: float = 0.05
    max_keypoints: int = 2000
    match_ratio: float = 0.8
    deformable_resolution: int = DEFAULT_DEFORMABLE_RESOLUTION
    workers: int = 1

    level_theta: Optional[List[float]] = None
    level_iterations: Optional[List[int]] = None
    level_step_size: Optional[List[float]] = None
    level_mi_bins: Optional[List[int]] = None
    level_mi_window: Optional[List[int]] = None
    level_mi_stride: Optional[List[int]] = None
    level_downsample: Optional[List[int]] = None
    level_smoothing: Optional[List[float]] = None

    deformable_enabled: bool = True
    matcher: str = 'builtin'
    matcher_timeout: float = Field(60.0, gt=0.0)
    output_dir: Optional[str] = None

    @field_validator('matcher')
    @classmethod
    def _matcher_known(cls, value):
        if value != 'builtin' and not (value.startswith('external:') and value[len('external:'):].strip()):
            raise ValueError("expected 'builtin' or 'external:<command line>'")
        return value

    def _level_count(self):
        lengths = {key: len(getattr(self, key)) for key in LEVEL_KEYS if getattr(self, key) is not None}
        if len(set(lengths.values())) > 1:
            raise ConfigError("per-level lists differ in length: "
                              + ", ".join(f"{k}={n}" for k, n in sorted(lengths.items())))
        return next(iter(lengths.values()), len(DEFAULT_DOWNSAMPLE))

    def _levels(self):
        count = self._level_count()
        if count == 0:
            raise ConfigError("level_*: at least one deformable level is required")
        levels = []
        for index in range(count):
            values = {field: getattr(self, key)[index]
                      for key, field in LEVEL_KEYS.items() if getattr(self, key) is not None}
            if 'downsample' not in values:
                values['downsample'] = (DEFAULT_DOWNSAMPLE[index] if count == len(DEFAULT_DOWNSAMPLE)
                                        else 2 ** (count - 1 - index))
            levels.append(values)
        return levels

    def to_registration_config(self):
        """
        Build the validated RegistrationConfig.

        Raises:
        - ConfigError: Naming the first offending key.
        """
        fields = self.model_dump(include=set(RegistrationConfig.model_fields) - {'levels'})
        try:
            levels = tuple(LevelConfig(**values) for values in self._levels())
            return RegistrationConfig(levels=levels, **fields)
        except ValidationError as e:
            raise ConfigError(_describe(e, prefix='level_'))


def _describe(error, prefix=''):
    first = error.errors()[0]
    # the only model-level check is the coarse-to-fine level ordering
    location = '.'.join(str(part) for part in first['loc']) or ('level_downsample' if prefix else '(document)')
    if first['type'] == 'extra_forbidden':
        return f"unknown key '{location}'"
    if prefix and first['loc'] and first['loc'][0] in LevelConfig.model_fields:
        location = prefix + location
    return f"{location}: {first['msg']}"


def load_config(path):
    """
    Read and validate a TOML configuration file.

    Parameters:
    - path (str or Path): Configuration file; None yields the defaults.

    Returns:
    - PipelineConfig: The parsed document.

    Raises:
    - ConfigError: Unreadable file, bad TOML, unknown key or invalid value.
    """
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            document = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})")
    try:
        config = PipelineConfig(**document)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_describe(e)}")
    # surface RegistrationConfig violations at load time
    config.to_registration_config()
    return config
