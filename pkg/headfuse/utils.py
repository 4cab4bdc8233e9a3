"""Collections of util functions and classes."""

import abc
import logging
import os
import numpy as np
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar('T')
R = TypeVar('R')

logger = logging.getLogger(__name__)

THREADS_ENV = 'HEADFUSE_THREADS'


def annotate(description: str):
  """The decorated function is the same as the original, except for appending
  the string `description` into the docstring."""

  def decorator(func):
    origin_doc = func.__doc__
    if origin_doc is None:
      new_doc = description
    else:
      new_doc = '\n\n'.join([origin_doc, description])
    if not new_doc.endswith('\n'):
      new_doc += '\n'
    func.__doc__ = new_doc
    return func

  return decorator


def deterministic(func):
  return annotate(
      'NOTE:\n\tDeterministic under a fixed `seed`; all randomness is drawn '
      'from `numpy.random.default_rng(seed)`.')(func)


def get_rng(seed: Optional[int]) -> np.random.Generator:
  return np.random.default_rng(seed)


def infinity_norm(x: np.ndarray) -> float:
  if np.size(x) == 0:
    return 0.
  return float(np.max(np.abs(x)))


def resolve_threads(threads: Optional[int] = None, default: int = 1) -> int:
  """Explicit value first, then the `HEADFUSE_THREADS` env var, else
  `default`."""
  if threads is None:
    threads = int(os.environ.get(THREADS_ENV, default))
  return max(1, int(threads))


def parallel_map(func: Callable[[T], R],
                 items: Iterable[T],
                 threads: Optional[int] = None) -> List[R]:
  """Order-preserving map; the result never depends on the thread count."""
  items = list(items)
  threads = resolve_threads(threads)
  if threads == 1 or len(items) < 2:
    return [func(item) for item in items]
  with ThreadPoolExecutor(max_workers=threads) as pool:
    return list(pool.map(func, items))


class History:
  """Util for logging the internal information in an iterative process."""

  def __init__(self):
    self.logs = defaultdict(dict)

  def log(self, step: int, key: str, value: object):
    if isinstance(value, np.generic):
      value = value.item()
    self.logs[step][key] = value

  def steps(self) -> List[int]:
    return sorted(self.logs)

  def series(self, key: str) -> List[object]:
    return [self.logs[s][key] for s in self.steps() if key in self.logs[s]]

  def show(self, step: int, keys: List[str] = None):
    """Returns the string to show."""
    if keys is None:
      keys = list(self.logs[step])

    aspects = []
    for k in keys:
      v = self.logs[step].get(k, None)
      if isinstance(v, (float, np.floating)):
        v = f'{v:.5g}'
      elif isinstance(v, (bool, int, str)):
        v = str(v)
      else:
        raise ValueError(f'Type {type(v)} is temporally not supported.')
      aspects.append(f'{k}: {v}')

    show_str = ' - '.join([f'step: {step}'] + aspects)
    return show_str


class Callback(abc.ABC):
  """For the iterative solvers (GPA, NICP, ICP refinement, Gauss-Newton)."""

  @abc.abstractmethod
  def __call__(self, step: int, history: History) -> None:
    return NotImplemented


class LogProgress(Callback):

  def __init__(self, log_step: int = 1, verbose: bool = False,
               name: str = 'solver'):
    self.log_step = log_step
    self.verbose = verbose
    self.name = name

  def __call__(self, step: int, history: History):
    if step % self.log_step != 0:
      return
    line = f'{self.name} {history.show(step)}'
    if self.verbose:
      logger.info(line)
    else:
      logger.debug(line)


def run_callbacks(callbacks: Optional[List[Callback]],
                  step: int,
                  history: History):
  if callbacks:
    for callback in callbacks:
      callback(step, history)
