"""Mesh and landmark files: ASCII OBJ, binary little-endian PLY and JSON."""

import json
import logging
import os
import numpy as np

from headfuse.errors import StorageError, ValidationError
from headfuse.shape.mesh import LandmarkSet, TriMesh

logger = logging.getLogger(__name__)


def _parse_face_index(token: str) -> int:
  return int(token.split('/')[0])


def load_obj(path: str) -> TriMesh:
  """Reads `v` and `f` lines; polygons are fan-triangulated, other records
  are ignored."""
  vertices, triangles = [], []
  try:
    with open(path, 'r') as f:
      for line in f:
        tokens = line.strip().split()
        if not tokens or tokens[0].startswith('#'):
          continue
        if tokens[0] == 'v':
          vertices.append([float(x) for x in tokens[1:4]])
        elif tokens[0] == 'f':
          ids = [_parse_face_index(t) for t in tokens[1:]]
          # OBJ is 1-based; negative indices count from the end.
          ids = [i - 1 if i > 0 else len(vertices) + i for i in ids]
          for k in range(1, len(ids) - 1):
            triangles.append([ids[0], ids[k], ids[k + 1]])
  except OSError as e:
    raise StorageError(f'Cannot read {path}: {e}') from e
  except (ValueError, IndexError) as e:
    raise StorageError(f'Malformed OBJ file {path}: {e}') from e
  return TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                 np.array(triangles, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh, path: str):
  lines = [f'v {x!r} {y!r} {z!r}' for x, y, z in mesh.vertices.tolist()]
  lines += [f'f {a + 1} {b + 1} {c + 1}' for a, b, c in mesh.triangles.tolist()]
  try:
    with open(path, 'w') as f:
      f.write('\n'.join(lines) + '\n')
  except OSError as e:
    raise StorageError(f'Cannot write {path}: {e}') from e


_PLY_TYPES = {
    'float': '<f4', 'float32': '<f4', 'double': '<f8', 'float64': '<f8',
    'uchar': 'u1', 'uint8': 'u1', 'char': 'i1', 'int8': 'i1',
    'short': '<i2', 'int16': '<i2', 'ushort': '<u2', 'uint16': '<u2',
    'int': '<i4', 'int32': '<i4', 'uint': '<u4', 'uint32': '<u4',
}


def _read_ply_header(f):
  elements = []
  line = f.readline().strip()
  if line != b'ply':
    raise StorageError('Not a PLY file.')
  while True:
    line = f.readline()
    if not line:
      raise StorageError('Unterminated PLY header.')
    tokens = line.decode('ascii').split()
    if not tokens:
      continue
    if tokens[0] == 'format':
      if tokens[1] != 'binary_little_endian':
        raise StorageError(f'Unsupported PLY format {tokens[1]}.')
    elif tokens[0] == 'element':
      elements.append((tokens[1], int(tokens[2]), []))
    elif tokens[0] == 'property':
      if tokens[1] == 'list':
        elements[-1][2].append((tokens[4], ('list', tokens[2], tokens[3])))
      else:
        elements[-1][2].append((tokens[2], tokens[1]))
    elif tokens[0] == 'end_header':
      return elements


def load_ply(path: str) -> TriMesh:
  """Binary little-endian PLY with float `x, y, z`, optional uchar
  `red, green, blue` and a `vertex_indices` triangle list."""
  try:
    with open(path, 'rb') as f:
      elements = _read_ply_header(f)
      body = f.read()
  except OSError as e:
    raise StorageError(f'Cannot read {path}: {e}') from e

  vertices = np.zeros((0, 3))
  colors = None
  triangles = np.zeros((0, 3), dtype=np.int64)
  offset = 0
  try:
    for name, count, props in elements:
      if name == 'vertex':
        dtype = np.dtype([(p, _PLY_TYPES[t]) for p, t in props])
        data = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        offset += dtype.itemsize * count
        vertices = np.stack([data['x'], data['y'], data['z']], axis=1)
        if all(c in dtype.names for c in ('red', 'green', 'blue')):
          colors = np.stack(
              [data['red'], data['green'], data['blue']], axis=1) / 255.
      elif name == 'face':
        (_, (_, count_type, index_type)), = props
        dtype = np.dtype([('n', _PLY_TYPES[count_type]),
                          ('v', _PLY_TYPES[index_type], 3)])
        data = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        offset += dtype.itemsize * count
        if count and np.any(data['n'] != 3):
          raise StorageError('Only triangle faces are supported.')
        triangles = data['v'].astype(np.int64)
      else:
        raise StorageError(f'Unsupported PLY element {name}.')
  except (KeyError, ValueError) as e:
    raise StorageError(f'Malformed PLY file {path}: {e}') from e
  return TriMesh(vertices.astype(np.float64), triangles, colors)


def save_ply(mesh: TriMesh, path: str):
  n, t = mesh.n_vertices, len(mesh.triangles)
  header = ['ply', 'format binary_little_endian 1.0',
            f'element vertex {n}',
            'property float x', 'property float y', 'property float z']
  fields = [('x', '<f4'), ('y', '<f4'), ('z', '<f4')]
  if mesh.colors is not None:
    header += ['property uchar red', 'property uchar green',
               'property uchar blue']
    fields += [('red', 'u1'), ('green', 'u1'), ('blue', 'u1')]
  header += [f'element face {t}',
             'property list uchar uint vertex_indices', 'end_header']

  vdata = np.zeros(n, dtype=np.dtype(fields))
  for k, name in enumerate('xyz'):
    vdata[name] = mesh.vertices[:, k]
  if mesh.colors is not None:
    rgb = np.round(mesh.colors * 255.).astype(np.uint8)
    for k, name in enumerate(('red', 'green', 'blue')):
      vdata[name] = rgb[:, k]
  fdata = np.zeros(t, dtype=np.dtype([('n', 'u1'), ('v', '<u4', 3)]))
  fdata['n'] = 3
  fdata['v'] = mesh.triangles

  try:
    with open(path, 'wb') as f:
      f.write(('\n'.join(header) + '\n').encode('ascii'))
      f.write(vdata.tobytes())
      f.write(fdata.tobytes())
  except OSError as e:
    raise StorageError(f'Cannot write {path}: {e}') from e


def load_mesh(path: str) -> TriMesh:
  ext = os.path.splitext(path)[1].lower()
  if ext == '.obj':
    return load_obj(path)
  if ext == '.ply':
    return load_ply(path)
  raise StorageError(f'Unsupported mesh format: {path}')


def save_mesh(mesh: TriMesh, path: str):
  ext = os.path.splitext(path)[1].lower()
  if ext == '.obj':
    save_obj(mesh, path)
  elif ext == '.ply':
    save_ply(mesh, path)
  else:
    raise StorageError(f'Unsupported mesh format: {path}')


def load_json(path: str):
  try:
    with open(path, 'r') as f:
      return json.load(f)
  except OSError as e:
    raise StorageError(f'Cannot read {path}: {e}') from e
  except json.JSONDecodeError as e:
    raise StorageError(f'Malformed JSON in {path}: {e}') from e


def save_json(obj, path: str):
  try:
    with open(path, 'w') as f:
      json.dump(obj, f, indent=2, sort_keys=True)
      f.write('\n')
  except OSError as e:
    raise StorageError(f'Cannot write {path}: {e}') from e


def load_landmarks(path: str) -> LandmarkSet:
  """JSON map `name -> [x, y, z]` or `name -> [x, y]`. An optional
  `"indices": {name: vertex}` entry carries model correspondence."""
  data = load_json(path)
  if not isinstance(data, dict):
    raise ValidationError(f'{path}: landmarks must be a JSON object.')
  indices = data.pop('indices', None)
  # Keep file order; json preserves it.
  landmarks = LandmarkSet.from_dict(data)
  if indices is not None:
    try:
      order = [int(indices[n]) for n in landmarks.names]
    except KeyError as e:
      raise ValidationError(f'{path}: no index for landmark {e}.') from None
    landmarks = LandmarkSet(landmarks.names, landmarks.points, order)
  logger.debug(f'Loaded {len(landmarks)} landmarks from {path}.')
  return landmarks


def save_landmarks(landmarks: LandmarkSet, path: str):
  data = landmarks.to_dict()
  if landmarks.indices is not None:
    data['indices'] = {
        n: int(i) for n, i in zip(landmarks.names, landmarks.indices)}
  try:
    with open(path, 'w') as f:
      json.dump(data, f, indent=2)
      f.write('\n')
  except OSError as e:
    raise StorageError(f'Cannot write {path}: {e}') from e
