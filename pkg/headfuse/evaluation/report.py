"""CSV tables and SVG plots of metric curves."""

import csv
import io
import logging
import numpy as np
import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
from typing import List, Optional, Sequence, Tuple, Union

from headfuse.errors import StorageError, ValidationError
from headfuse.evaluation.metrics import CedReport, MetricCurve, check_curve

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('label', 'x', 'y', 'std')
SVG_HASHSALT = 'headfuse'


def _curves(items: Sequence[Union[MetricCurve, CedReport]]
            ) -> List[MetricCurve]:
  curves = [i.to_curve() if isinstance(i, CedReport) else i for i in items]
  for curve in curves:
    check_curve(curve)
  return curves


def curves_to_csv(curves: Sequence[MetricCurve]) -> str:
  """One row per curve point; floats in shortest round-trip form."""
  out = io.StringIO()
  writer = csv.writer(out, lineterminator='\n')
  writer.writerow(CSV_COLUMNS)
  for curve in curves:
    std = [None] * len(curve.x) if curve.std is None else curve.std
    for x, y, s in zip(curve.x, curve.y, std):
      writer.writerow([curve.label, repr(float(x)), repr(float(y)),
                       '' if s is None else repr(float(s))])
  return out.getvalue()


def parse_csv(text: str) -> List[MetricCurve]:
  """Inverse of `curves_to_csv`."""
  rows = list(csv.reader(io.StringIO(text)))
  if not rows or tuple(rows[0]) != CSV_COLUMNS:
    raise ValidationError(f'Report CSV must start with {CSV_COLUMNS}.')
  grouped = {}
  for label, x, y, s in rows[1:]:
    grouped.setdefault(label, []).append(
        (float(x), float(y), None if s == '' else float(s)))
  curves = []
  for label, points in grouped.items():
    x, y, s = zip(*points)
    std = None if any(v is None for v in s) else np.array(s)
    curves.append(MetricCurve(label, np.array(x), np.array(y), std))
  return curves


def curves_to_svg(curves: Sequence[MetricCurve],
                  title: Optional[str] = None,
                  labels: Tuple[str, str] = ('x', 'y')) -> str:
  fig = Figure(figsize=(6, 4))
  FigureCanvasSVG(fig)
  ax = fig.add_subplot(1, 1, 1)
  for curve in curves:
    ax.plot(curve.x, curve.y, label=curve.label)
    if curve.std is not None:
      ax.fill_between(curve.x, curve.y - curve.std, curve.y + curve.std,
                      alpha=0.2)
  ax.set_xlabel(labels[0])
  ax.set_ylabel(labels[1])
  if title:
    ax.set_title(title)
  if curves:
    ax.legend(loc='best')
  ax.grid(True, alpha=0.3)
  out = io.StringIO()
  with matplotlib.rc_context({'svg.hashsalt': SVG_HASHSALT,
                              'svg.fonttype': 'path'}):
    fig.savefig(out, format='svg', metadata={'Date': None})
  return out.getvalue()


def emit_report(items: Sequence[Union[MetricCurve, CedReport]],
                prefix: str,
                title: Optional[str] = None,
                labels: Tuple[str, str] = ('x', 'y')) -> Tuple[str, str]:
  """Writes `<prefix>.csv` and `<prefix>.svg`; identical inputs give
  identical bytes."""
  curves = _curves(items)
  paths = (prefix + '.csv', prefix + '.svg')
  contents = (curves_to_csv(curves), curves_to_svg(curves, title, labels))
  for path, content in zip(paths, contents):
    try:
      with open(path, 'w', newline='') as f:
        f.write(content)
    except OSError as e:
      raise StorageError(f'Cannot write {path}: {e}') from e
  logger.info(f'Wrote {paths[0]} and {paths[1]}.')
  return paths


def load_report(path: str) -> List[MetricCurve]:
  try:
    with open(path, 'r', newline='') as f:
      return parse_csv(f.read())
  except OSError as e:
    raise StorageError(f'Cannot read {path}: {e}') from e
