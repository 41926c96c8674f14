"""
Файловые форматы: контейнер тензоров RTEN, изображения PFM и чекпоинты.

RTEN: b"RTEN", версия u8 = 1, длина заголовка u32 LE, JSON-заголовок
{dtype, shape, layout}, затем данные little-endian в порядке row-major.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import ujson

from . import tensor as T
from .exceptions import ContractError, FormatError
from .network import ModelParams, NetworkConfig
from .training import AdamState

logger = logging.getLogger(__name__)

RTEN_MAGIC = b'RTEN'
RTEN_VERSION = 1
RTEN_DTYPES = {'f32': np.dtype('<f4'), 'f64': np.dtype('<f8')}
CHECKPOINT_VERSION = 1


def write_json(path: Path, data: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        f.write(ujson.dumps(data, indent=2, sort_keys=True, escape_forward_slashes=False))
        f.write('\n')


def read_json(path: Path) -> dict:
    with Path(path).open('r', encoding='utf-8') as f:
        return ujson.load(f)


def encode_rten(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    name = T.dtype_name(array.dtype)
    header = ujson.dumps({'dtype': name, 'shape': list(array.shape), 'layout': 'row-major'},
                         sort_keys=True).encode('utf-8')
    payload = np.ascontiguousarray(array, dtype=RTEN_DTYPES[name]).tobytes()
    return RTEN_MAGIC + struct.pack('<BI', RTEN_VERSION, len(header)) + header + payload


def decode_rten(data: bytes, path='<bytes>') -> np.ndarray:
    if len(data) < 9:
        raise FormatError(path, len(data), "файл короче заголовка RTEN")
    if data[:4] != RTEN_MAGIC:
        raise FormatError(path, 0, f"неверная сигнатура {data[:4]!r}")
    version, header_len = struct.unpack('<BI', data[4:9])
    if version != RTEN_VERSION:
        raise FormatError(path, 4, f"неподдерживаемая версия {version}")
    end = 9 + header_len
    if len(data) < end:
        raise FormatError(path, 9, f"заголовок длины {header_len} обрезан")
    try:
        header = ujson.loads(data[9:end].decode('utf-8'))
        dtype = RTEN_DTYPES[header['dtype']]
        shape = tuple(int(n) for n in header['shape'])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(path, 9, f"некорректный заголовок: {e}") from None
    if header.get('layout', 'row-major') != 'row-major':
        raise FormatError(path, 9, f"неподдерживаемая раскладка {header['layout']!r}")
    expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
    if len(data) - end != expected:
        raise FormatError(path, end, f"данных {len(data) - end} байт, ожидается {expected}")
    return np.frombuffer(data, dtype=dtype, offset=end).reshape(shape).astype(dtype.newbyteorder('='))


def write_rten(path: Path, array: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_rten(array))


def read_rten(path: Path) -> np.ndarray:
    path = Path(path)
    return decode_rten(path.read_bytes(), path)


def write_pfm(path: Path, image: np.ndarray):
    """Одноканальный PFM "Pf", масштаб -1.0 (little-endian), строки снизу вверх."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ContractError(f"PFM пишет только 2D-карты, форма {image.shape}")
    height, width = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"Pf\n{width} {height}\n-1.0\n".encode('ascii')
    path.write_bytes(header + np.ascontiguousarray(np.flipud(image), dtype='<f4').tobytes())


def _pfm_token(data: bytes, offset: int, path) -> Tuple[bytes, int]:
    while offset < len(data) and data[offset:offset + 1].isspace():
        offset += 1
    start = offset
    while offset < len(data) and not data[offset:offset + 1].isspace():
        offset += 1
    if start == offset:
        raise FormatError(path, start, "заголовок PFM обрезан")
    return data[start:offset], offset


def read_pfm(path: Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    kind, offset = _pfm_token(data, 0, path)
    if kind != b'Pf':
        raise FormatError(path, 0, f"ожидается одноканальный PFM 'Pf', получено {kind!r}")
    try:
        width, offset = _pfm_token(data, offset, path)
        height, offset = _pfm_token(data, offset, path)
        scale, offset = _pfm_token(data, offset, path)
        width, height, scale = int(width), int(height), float(scale)
    except ValueError as e:
        raise FormatError(path, offset, f"некорректный заголовок PFM: {e}") from None
    offset += 1
    dtype = '<f4' if scale < 0 else '>f4'
    expected = 4 * width * height
    if len(data) - offset != expected:
        raise FormatError(path, offset, f"данных {len(data) - offset} байт, ожидается {expected}")
    image = np.frombuffer(data, dtype=dtype, offset=offset).reshape(height, width)
    return np.flipud(image).astype(np.float32)


def save_checkpoint(directory: Path, params: ModelParams, state: Optional[AdamState] = None,
                    extra: Optional[dict] = None):
    """Каталог: manifest.json, params/<имя>.rten, adam/m|v/<имя>.rten."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, tensor in params.items():
        write_rten(directory / 'params' / f'{name}.rten', tensor.data)
    manifest = {
        'version': CHECKPOINT_VERSION,
        'network': params.config.to_dict(),
        'dtype': T.dtype_name(params.dtype),
        'params': {name: list(tensor.shape) for name, tensor in params.items()},
        'adam': None,
    }
    if state is not None and state.m:
        for name in state.m:
            write_rten(directory / 'adam' / 'm' / f'{name}.rten', state.m[name])
            write_rten(directory / 'adam' / 'v' / f'{name}.rten', state.v[name])
        manifest['adam'] = {'step': state.step}
    manifest.update(extra or {})
    write_json(directory / 'manifest.json', manifest)
    logger.info(f"Чекпоинт сохранён: {directory}")


def load_checkpoint(directory: Path) -> Tuple[ModelParams, Optional[AdamState], dict]:
    """Возвращает (ModelParams, AdamState | None, manifest)."""
    directory = Path(directory)
    manifest_path = directory / 'manifest.json'
    if not manifest_path.exists():
        raise FormatError(manifest_path, 0, "нет manifest.json")
    manifest = read_json(manifest_path)
    config = NetworkConfig.from_dict(manifest['network'])
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in manifest['params'].items():
        path = directory / 'params' / f'{name}.rten'
        arrays[name] = read_rten(path)
        if list(arrays[name].shape) != list(shape):
            raise FormatError(path, 9, f"форма {arrays[name].shape}, в манифесте {shape}")
    params = ModelParams.from_arrays(config, arrays)
    state = None
    if manifest.get('adam'):
        state = AdamState(step=int(manifest['adam']['step']),
                          m={name: read_rten(directory / 'adam' / 'm' / f'{name}.rten') for name in arrays},
                          v={name: read_rten(directory / 'adam' / 'v' / f'{name}.rten') for name in arrays})
    return params, state, manifest
