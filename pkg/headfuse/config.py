"""Pipeline configuration: a tree of frozen dataclasses stored as JSON."""

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import Optional, Tuple

from headfuse.errors import StorageError, ValidationError


@dataclass(frozen=True)
class SynthConfig:
  head_subdivisions: int = 3
  head_latent_dim: int = 8
  face_angle: float = 50.
  ear_angle: float = 25.
  ear_rings: int = 4
  ear_segments: int = 12
  ear_latent_dim: int = 4
  n_train: int = 50
  n_scans: int = 20
  n_test: int = 20
  scan_noise: float = 0.1


@dataclass(frozen=True)
class RegressConfig:
  count: Optional[int] = None  # defaults to 10 x whole components
  extractor: str = 'crop'


@dataclass(frozen=True)
class RegistrationConfig:
  profile: Optional[str] = None
  stiffness_high: float = 50.
  stiffness_low: float = 0.5
  steps: int = 8
  inner_iters: int = 5
  reject_factor: float = 4.


@dataclass(frozen=True)
class GaussianConfig:
  keep: int = 150
  blend_rule: str = 'product'
  psd: str = 'repair'
  # Kernels over more than this many coordinates are kept in factor form.
  dense_limit: int = 12000


@dataclass(frozen=True)
class RefineConfig:
  variance: float = 0.98
  landmark_sigma2: float = 1.
  dense_sigma2: float = 0.25
  icp_iters: int = 5
  reject_factor: float = 3.
  max_points: int = 1500
  iterations: int = 2
  keep: float = 0.997
  face_align: bool = True
  band_rings: int = 12


@dataclass(frozen=True)
class EarConfig:
  sides: Tuple[str, ...] = ('right', 'left')
  blend_rule: str = 'product'
  psd: str = 'repair'


@dataclass(frozen=True)
class EyeConfig:
  components: int = 5
  c_l: float = 1.
  c_t: float = 0.1
  c_el: float = 1e-2
  c_eye_l: float = 1e-2
  c_eye_t: float = 1e-2
  c_rot: float = 0.
  max_iters: int = 50
  tolerance: float = 1e-6


@dataclass(frozen=True)
class MetricsConfig:
  upto: Optional[int] = None
  draws: int = 5000
  specificity_reference: str = 'test'
  t_max: float = 10.
  bins: int = 200


@dataclass(frozen=True)
class PipelineConfig:
  seed: int = 7
  threads: int = 1
  synth: SynthConfig = field(default_factory=SynthConfig)
  regress: RegressConfig = field(default_factory=RegressConfig)
  registration: RegistrationConfig = field(default_factory=RegistrationConfig)
  gaussian: GaussianConfig = field(default_factory=GaussianConfig)
  refine: RefineConfig = field(default_factory=RefineConfig)
  ear: EarConfig = field(default_factory=EarConfig)
  eye: EyeConfig = field(default_factory=EyeConfig)
  metrics: MetricsConfig = field(default_factory=MetricsConfig)

  def __post_init__(self):
    validate(self)


CHOICES = {
    ('regress', 'extractor'): ('crop', 'nicp'),
    ('gaussian', 'blend_rule'): ('sum', 'product'),
    ('gaussian', 'psd'): ('repair', 'check', 'ignore'),
    ('ear', 'blend_rule'): ('sum', 'product'),
    ('ear', 'psd'): ('repair', 'check', 'ignore'),
    ('metrics', 'specificity_reference'): ('train', 'test'),
}


def validate(config: PipelineConfig):
  for (section, key), allowed in CHOICES.items():
    value = getattr(getattr(config, section), key)
    if value not in allowed:
      raise ValidationError(
          f'{section}.{key} must be one of {allowed}, got {value!r}.')
  if not set(config.ear.sides) <= {'left', 'right'}:
    raise ValidationError(f'ear.sides must name left/right, got '
                          f'{config.ear.sides}.')
  if config.threads < 1:
    raise ValidationError('threads must be at least 1.')
  if config.gaussian.dense_limit < 1:
    raise ValidationError('gaussian.dense_limit must be positive.')
  if not 0 < config.refine.variance <= 1:
    raise ValidationError('refine.variance must lie in (0, 1].')
  for name in ('head_latent_dim', 'ear_latent_dim'):
    if getattr(config.synth, name) < 1:
      raise ValidationError(f'synth.{name} must be at least 1.')
  if config.synth.scan_noise < 0:
    raise ValidationError('synth.scan_noise must be nonnegative.')
  for name in ('n_train', 'n_scans', 'n_test'):
    if getattr(config.synth, name) < 2:
      raise ValidationError(f'synth.{name} must be at least 2.')


def _coerce(value, hint, path: str):
  origin = typing.get_origin(hint)
  args = typing.get_args(hint)
  if dataclasses.is_dataclass(hint):
    return _from_dict(hint, value, path)
  if origin is typing.Union:
    if value is None and type(None) in args:
      return None
    inner = [a for a in args if a is not type(None)][0]
    return _coerce(value, inner, path)
  if origin is tuple:
    if not isinstance(value, (list, tuple)):
      raise ValidationError(f'{path}: expected a list, got {value!r}.')
    return tuple(_coerce(v, args[0], path) for v in value)
  if hint is bool:
    if not isinstance(value, bool):
      raise ValidationError(f'{path}: expected a boolean, got {value!r}.')
    return value
  if hint is int:
    if isinstance(value, bool) or not isinstance(value, int):
      raise ValidationError(f'{path}: expected an integer, got {value!r}.')
    return value
  if hint is float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
      raise ValidationError(f'{path}: expected a number, got {value!r}.')
    return float(value)
  if hint is str:
    if not isinstance(value, str):
      raise ValidationError(f'{path}: expected a string, got {value!r}.')
    return value
  raise ValidationError(f'{path}: unsupported type {hint}.')


def _from_dict(cls, data, path: str = ''):
  if not isinstance(data, dict):
    raise ValidationError(f'{path or "config"}: expected an object.')
  hints = typing.get_type_hints(cls)
  names = {f.name for f in dataclasses.fields(cls)}
  unknown = set(data) - names
  if unknown:
    raise ValidationError(
        f'{path or "config"}: unknown keys {sorted(unknown)}.')
  kwargs = {k: _coerce(v, hints[k], f'{path}.{k}' if path else k)
            for k, v in data.items()}
  return cls(**kwargs)


def config_from_dict(data) -> PipelineConfig:
  return _from_dict(PipelineConfig, data)


def config_to_dict(config: PipelineConfig):
  return dataclasses.asdict(config)


def dumps_config(config: PipelineConfig) -> str:
  return json.dumps(config_to_dict(config), indent=2, sort_keys=True) + '\n'


def load_config(path: str) -> PipelineConfig:
  try:
    with open(path, 'r') as f:
      data = json.load(f)
  except OSError as e:
    raise StorageError(f'Cannot read {path}: {e}') from e
  except json.JSONDecodeError as e:
    raise ValidationError(f'{path}: malformed config: {e}') from e
  return config_from_dict(data)


def dump_config(config: PipelineConfig, path: str):
  try:
    with open(path, 'w') as f:
      f.write(dumps_config(config))
  except OSError as e:
    raise StorageError(f'Cannot write {path}: {e}') from e
