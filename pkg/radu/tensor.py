"""
Минимальный n-мерный тензор с обратным распространением градиента.

Данные хранятся в numpy-массиве (row-major). Каждая дифференцируемая операция
возвращает Tensor, который помнит своих родителей и функцию обратного прохода;
граф строится только если хотя бы один вход требует градиента, поэтому
инференс и численное дифференцирование не тратят память на граф.

Обучение идёт в f32, проверка градиентов в f64.
"""
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ContractError, GradientError

DTYPES = {'f32': np.float32, 'f64': np.float64}
LEAKY_SLOPE = 0.1


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float64)
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ContractError(f"Неизвестный dtype {dtype!r}, ожидается один из {sorted(DTYPES)}") from None
    return np.dtype(dtype)


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, candidate in DTYPES.items():
        if dtype == candidate:
            return name
    raise ContractError(f"dtype {dtype} не поддерживается")


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == 'f':
            self.data = data
        else:
            self.data = np.asarray(data, dtype=resolve_dtype(dtype))
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def backward(self, grad=None):
        """Обратный проход от этого узла; градиенты листьев накапливаются в `.grad`."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward без градиента только для скаляра, форма {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ContractError(f"Градиент формы {grad.shape} для тензора формы {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            current, expanded = stack.pop()
            if expanded:
                order.append(current)
                continue
            if id(current) in seen:
                continue
            seen.add(id(current))
            stack.append((current, True))
            for parent in current._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): grad}
        for current in reversed(order):
            g = pending.pop(id(current), None)
            if g is None:
                continue
            if current._backward is None:
                g = g.astype(current.dtype, copy=False)
                current.grad = g.copy() if current.grad is None else current.grad + g
                continue
            for parent, parent_grad in zip(current._parents, current._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ''
        return f"Tensor{label}(shape={self.shape}, dtype={dtype_name(self.dtype)}, requires_grad={self.requires_grad})"


class GradSlot(Tensor):
    """Обучаемый лист: значение и градиент той же формы, градиент обнулён."""
    __slots__ = ()

    def __init__(self, value, dtype=None, name: Optional[str] = None):
        if dtype is None and not (isinstance(value, np.ndarray) and value.dtype.kind == 'f'):
            dtype = np.float64
        super().__init__(np.array(value, dtype=dtype, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Результат операции: граф запоминается только если он нужен."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype if like is not None else np.float64))


def _pair(a, b, op: str) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    a, b = as_tensor(a, like), as_tensor(b, like)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ContractError(f"{op}: несовместимые формы {a.shape} и {b.shape}")
    return a, b


def _unscalar(g: np.ndarray, target: Tensor) -> np.ndarray:
    if target.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b, 'add')
    return node(a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, 'sub')
    return node(a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, 'mul')
    return node(a.data * b.data, (a, b),
                lambda g: (_unscalar(g * b.data, a), _unscalar(g * a.data, b)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return node(y, (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = a.data > 0
    y = np.where(positive, a.data, slope * a.data).astype(a.dtype, copy=False)
    return node(y, (a,), lambda g: (g * np.where(positive, 1.0, slope).astype(g.dtype),))


def absolute(a: Tensor) -> Tensor:
    return node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def reduce_sum(a: Tensor) -> Tensor:
    total = np.asarray(a.data.sum(), dtype=a.dtype)
    return node(total, (a,), lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ContractError("mean пустого тензора")
    return mul(reduce_sum(a), 1.0 / a.size)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: несовместимые формы {a.shape} и {b.shape}")
    # einsum без BLAS: строка результата не зависит от положения строки во входе
    out = np.einsum('ij,jk->ik', a.data, b.data)
    return node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    return node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat пустого списка")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Явное расширение по осям размера 1 (неявного broadcasting в ядре нет)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ContractError(f"broadcast_to: {a.shape} не расширяется до {shape}") from None
    return node(out, (a,), lambda g: (_sum_to(g, a.shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W + b для x формы [N, C_in]."""
    y = matmul(x, weight)
    return add(y, broadcast_to(reshape(bias, (1, -1)), y.shape))


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Выборка строк по индексам (ось 0), индексы могут повторяться."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return node(a.data[indices], (a,), backward)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Сумма строк по сегментам в порядке следования строк."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if segment_ids.shape != a.shape[:1]:
        raise ContractError(f"segment_sum: {segment_ids.shape[0]} индексов на {a.shape[0]} строк")
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, segment_ids, a.data)
    return node(out, (a,), lambda g: (g[segment_ids],))


def getitem(a: Tensor, index) -> Tensor:
    """Только базовая индексация (срезы, целые): без повторов элементов."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return node(np.array(a.data[index]), (a,), backward)


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool
    checked: int
    worst: Tuple[int, int] = (-1, -1)

    def __str__(self):
        status = 'OK' if self.passed else 'FAIL'
        return (f"{self.name}: {status}, max rel. error {self.max_rel_error:.3e} "
                f"({self.checked} элементов, худший вход/индекс {self.worst})")


def _output(op: Callable, arrays: Sequence[np.ndarray], name: str) -> np.ndarray:
    out = op(*[Tensor(a) for a in arrays])
    if not np.all(np.isfinite(out.data)):
        raise GradientError(f"{name}: нечисловое значение в прямом проходе")
    return np.asarray(out.data, dtype=np.float64)


def grad_check(op: Callable, inputs: Sequence, step: float = 1e-6, tol: float = 1e-5,
               name: Optional[str] = None) -> GradCheckReport:
    """
    Сравнивает аналитический градиент суммы выходов op с центральными разностями.

    Относительная ошибка элемента: |a - n| / max(|a|, |n|, 1e-12); проверка пройдена,
    если максимум ошибки <= tol. Разность выходов берётся поэлементно до суммирования,
    так округление большой суммы не попадает в числитель.
    """
    name = name or getattr(op, '__name__', repr(op))
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [GradSlot(a, name=f"{name}[{k}]") for k, a in enumerate(arrays)]
    out = op(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise GradientError(f"{name}: нечисловое значение в прямом проходе")
    if out.requires_grad:
        reduce_sum(out).backward()

    worst_error, worst, checked = 0.0, (-1, -1), 0
    for k, (array, leaf) in enumerate(zip(arrays, leaves)):
        flat = array.reshape(-1)
        analytic = leaf.grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = _output(op, arrays, name)
            flat[i] = original - step
            minus = _output(op, arrays, name)
            flat[i] = original
            numeric = float(np.sum(plus - minus)) / (2.0 * step)
            error = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-12)
            checked += 1
            if error > worst_error:
                worst_error, worst = error, (k, i)
    return GradCheckReport(name=name, max_rel_error=float(worst_error), passed=worst_error <= tol,
                           checked=checked, worst=worst)
