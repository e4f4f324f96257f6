# -*- coding: utf-8 -*-
"""Motor mínimo de tensores densos con diferenciación en modo reverso.

Todos los valores son ``float64`` en orden row-major y los mapas de
features usan la convención ``H x W x C`` en todo el paquete. Cada
operación diferenciable retorna un :class:`Tensor` nuevo (los valores son
inmutables una vez producidos) y, si alguno de sus inputs requiere
gradiente, registra un :class:`Node` con la función que calcula los
adjuntos de sus inputs.

:func:`backward` ordena topológicamente el grafo alcanzable desde la raíz
y lo recorre una sola vez en orden inverso, acumulando gradientes sólo en
las hojas (parámetros e inputs marcados con ``requires_grad``).

"""
import contextlib
from typing import Callable
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from panodeform.exceptions import DimensionError
from panodeform.exceptions import InvalidSize
from panodeform.exceptions import NonFiniteError

IGNORE_INDEX = 255
"""Valor de label ignorado en pérdidas y métricas."""

KL_EPS = 1e-12

BORDER_MODES = ("clamp", "wrap_horizontal")

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class _GradMode:  # pylint: disable=too-few-public-methods
    enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Desactiva el registro del grafo dentro del bloque."""
    previous = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = previous


class Node:  # pylint: disable=too-few-public-methods
    """Registro de una operación: id, inputs y backward con lo guardado."""

    __slots__ = ("op", "parents", "backward")

    def __init__(
        self,
        op: str,
        parents: Tuple["Tensor", ...],
        backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
    ):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """Par valor/gradiente denso.

    Args:
        data: Valores; se copian a un buffer ``float64`` propio.
        requires_grad: Si es ``True`` el tensor es una hoja del grafo y
            acumula gradiente en :attr:`grad` tras :func:`backward`.

    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if not np.isfinite(array).all():
            raise NonFiniteError(op="tensor")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        """Extents del tensor."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Vista de sólo lectura de los valores."""
        view = self.data.view()
        view.flags.writeable = False
        return view

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copia sin historia."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Atajo para :func:`backward`."""
        backward(self, grad)

    def __repr__(self) -> str:
        return "Tensor(shape={}, requires_grad={})".format(
            self.shape, self.requires_grad
        )

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value: ArrayLike) -> Tensor:
    """Envuelve constantes; los tensores pasan sin copia."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(
    op: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    grad_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op=op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = _GradMode.enabled and any(
        p.requires_grad for p in parents
    )
    if out.requires_grad:
        out.node = Node(op, tuple(parents), grad_fn)
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in reversed(tensor.node.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Propaga adjuntos desde ``root`` hacia las hojas.

    Sin ``grad`` la raíz debe ser escalar (semilla 1). Los gradientes se
    suman a los ya presentes en cada hoja.

    """
    if not root.requires_grad:
        return
    if grad is None:
        if root.size != 1:
            raise DimensionError(
                op="backward", detail="la raíz no es escalar"
            )
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != root.shape:
        raise DimensionError(
            op="backward",
            detail="grad {} vs raíz {}".format(grad.shape, root.shape),
        )

    pending = {id(root): grad}
    for tensor in reversed(_topological_order(root)):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        for parent, parent_grad in zip(
            tensor.node.parents, tensor.node.backward(g)
        ):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise ----------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), grad_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), grad_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make("mul", a.data * b.data, (a, b), grad_fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make("div", a.data / b.data, (a, b), grad_fn)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU con la aproximación tanh."""
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * x.data * (1 - t * t) * d_inner),)

    return _make("gelu", 0.5 * x.data * (1 + t), (x,), grad_fn)


def clamp(x: Tensor, lo: ArrayLike, hi: ArrayLike) -> Tensor:
    """Clamp duro; el gradiente pasa (1) sólo dentro de ``[lo, hi]``.

    ``lo`` y ``hi`` pueden ser escalares o arreglos broadcasteables a
    ``x`` (p.ej. cotas distintas para filas y columnas).

    """
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), x.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), x.shape)
    if np.any(lo > hi):
        raise DimensionError(op="clamp", detail="lo > hi")
    inside = (x.data >= lo) & (x.data <= hi)

    def grad_fn(g):
        return (g * inside,)

    out = np.minimum(np.maximum(x.data, lo), hi)
    return _make("clamp", out, (x,), grad_fn)


# Reducciones y forma ---------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        return (_expand(g, x.shape, axis, keepdims),)

    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _make("sum", data, (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size / max(np.asarray(x.data.sum(axis=axis)).size, 1)

    def grad_fn(g):
        return (_expand(g, x.shape, axis, keepdims) / count,)

    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    return _make("mean", data, (x,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def grad_fn(g):
        return (g.reshape(x.shape),)

    try:
        data = x.data.reshape(shape)
    except ValueError as error:
        raise DimensionError(op="reshape", detail=str(error))
    return _make("reshape", data, (x,), grad_fn)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _make("transpose", x.data.transpose(axes), (x,), grad_fn)


def index_select(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """``np.take`` a lo largo de ``axis`` con índices enteros 1-D."""
    indices = np.asarray(indices, dtype=np.intp)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(
            np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0)
        )
        return (full,)

    return _make(
        "index_select", np.take(x.data, indices, axis=axis), (x,), grad_fn
    )


def take_pixels(f: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Lee ``f[ys, xs, :]`` con índices enteros ya resueltos en el borde.

    Args:
        f: Mapa ``H x W x C``.
        ys, xs: Índices enteros de igual forma ``S``.

    Returns:
        Tensor de forma ``S + (C,)``.

    """
    if f.ndim != 3:
        raise DimensionError(op="take_pixels", detail="f debe ser HxWxC")
    ys = np.asarray(ys, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.intp)

    def grad_fn(g):
        full = np.zeros_like(f.data)
        np.add.at(full, (ys, xs), g)
        return (full,)

    return _make("take_pixels", f.data[ys, xs], (f,), grad_fn)


# Álgebra lineal --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Producto ``[M x K] @ [K x N]`` con adjuntos exactos."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            op="matmul", detail="{} @ {}".format(a.shape, b.shape)
        )

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), grad_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Producto por lotes ``[B x M x K] @ [B x K x N]``."""
    if (
        a.ndim != 3
        or b.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise DimensionError(
            op="bmm", detail="{} @ {}".format(a.shape, b.shape)
        )

    def grad_fn(g):
        return (
            np.matmul(g, b.data.transpose(0, 2, 1)),
            np.matmul(a.data.transpose(0, 2, 1), g),
        )

    return _make("bmm", np.matmul(a.data, b.data), (a, b), grad_fn)


# Normalización y probabilidades ---------------------------------------------


def _softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax estabilizado restando el máximo."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(op="softmax", detail="eje {}".format(axis))
    y = _softmax_array(x.data, axis)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), grad_fn)


def layernorm(
    x: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """LayerNorm sobre el último eje (media 0, varianza 1 antes del afín)."""
    channels = x.shape[-1]
    gamma = gamma if gamma is not None else Tensor(np.ones(channels))
    beta = beta if beta is not None else Tensor(np.zeros(channels))
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(
        "layernorm", xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn
    )


def cross_entropy(
    logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX
) -> Tensor:
    """Media de ``-log softmax`` sobre los pixeles no ignorados.

    Sin pixeles válidos la pérdida es 0 con gradiente nulo.

    """
    classes = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(
            op="cross_entropy",
            detail="labels {} vs logits {}".format(labels.shape, logits.shape),
        )
    flat = logits.data.reshape(-1, classes)
    target = labels.reshape(-1).astype(np.int64)
    valid = target != ignore_index
    if np.any((target[valid] < 0) | (target[valid] >= classes)):
        raise DimensionError(
            op="cross_entropy", detail="label fuera de [0, K)"
        )
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _make(
            "cross_entropy",
            np.asarray(0.0),
            (logits,),
            lambda g: (np.zeros_like(logits.data),),
        )

    shifted = flat - flat.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm
    rows = np.nonzero(valid)[0]
    loss = -log_prob[rows, target[rows]].sum() / n_valid

    def grad_fn(g):
        grad = np.exp(log_prob)
        grad[rows, target[rows]] -= 1.0
        grad[~valid] = 0.0
        return ((g * grad / n_valid).reshape(logits.shape),)

    return _make("cross_entropy", np.asarray(loss), (logits,), grad_fn)


def kl_div(
    p_ref: ArrayLike,
    p: Tensor,
    mask: Optional[np.ndarray] = None,
    eps: float = KL_EPS,
) -> Tensor:
    """``sum p_ref * log(p_ref / p)`` por posición, promedio sobre posiciones.

    Ambos argumentos son distribuciones sobre el último eje; los dos
    llevan un piso ``eps`` antes del logaritmo. ``mask`` selecciona las
    posiciones que participan del promedio.

    """
    p_ref = as_tensor(p_ref)
    if p_ref.shape != p.shape:
        raise DimensionError(
            op="kl_div", detail="{} vs {}".format(p_ref.shape, p.shape)
        )
    classes = p.shape[-1]
    ref = p_ref.data.reshape(-1, classes)
    cur = p.data.reshape(-1, classes)
    valid = (
        np.ones(ref.shape[0], dtype=bool)
        if mask is None
        else np.asarray(mask, dtype=bool).reshape(-1)
    )
    n_valid = int(valid.sum())
    ref_floor = np.maximum(ref, eps)
    cur_floor = np.maximum(cur, eps)
    log_ratio = np.log(ref_floor) - np.log(cur_floor)
    raw = (ref * log_ratio).sum(axis=1)
    # con los pisos una fila puede quedar apenas bajo cero
    per_row = np.maximum(raw, 0.0)
    kept = valid & (raw >= 0.0)
    loss = per_row[valid].sum() / n_valid if n_valid else 0.0

    def grad_fn(g):
        if not n_valid:
            return np.zeros_like(p_ref.data), np.zeros_like(p.data)
        scale = (g / n_valid) * kept[:, None]
        d_cur = -scale * ref / cur_floor * (cur >= eps)
        d_ref = scale * (log_ratio + (ref >= eps))
        return d_ref.reshape(p_ref.shape), d_cur.reshape(p.shape)

    return _make("kl_div", np.asarray(loss), (p_ref, p), grad_fn)


# Muestreo -------------------------------------------------------------------


def resolve_border(y, x, height, width, border):
    """Coordenadas dentro del mapa y máscaras de "estaba dentro"."""
    if border not in BORDER_MODES:
        raise DimensionError(op="bilinear_sample", detail=border)
    y_in = (y >= 0) & (y <= height - 1)
    yc = np.clip(y, 0, height - 1)
    if border == "clamp":
        x_in = (x >= 0) & (x <= width - 1)
        xc = np.clip(x, 0, width - 1)
    else:
        x_in = np.ones_like(x, dtype=bool)
        xc = np.mod(x, width)
    return yc, xc, y_in, x_in


def _bilinear_coord_grad(g, corners, wy, wx):
    """Derivadas de la interpolación respecto de (y, x)."""
    v00, v01, v10, v11 = corners
    d_y = g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
    d_x = g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
    return d_y, d_x


def bilinear_sample(
    f: Tensor, coords: Tensor, border: str = "clamp"
) -> Tensor:
    """Interpola ``f`` bilinealmente en coordenadas reales ``(y, x)``.

    Args:
        f: Mapa ``H x W x C``.
        coords: ``N x 2`` (mismas coordenadas para todos los canales) o
            ``N x C x 2`` (una coordenada por canal).
        border: ``clamp`` satura filas y columnas al borde;
            ``wrap_horizontal`` satura filas y envuelve columnas
            (continuidad de 360 grados).

    Returns:
        Tensor ``N x C``. El gradiente fluye a ``f`` y a ``coords``.

    """
    f, coords = as_tensor(f), as_tensor(coords)
    if f.ndim != 3:
        raise DimensionError(op="bilinear_sample", detail="f debe ser HxWxC")
    height, width, channels = f.shape
    per_channel = coords.ndim == 3
    if coords.shape[-1] != 2 or (
        per_channel and coords.shape[1] != channels
    ):
        raise DimensionError(
            op="bilinear_sample", detail="coords {}".format(coords.shape)
        )

    yc, xc, y_in, x_in = resolve_border(
        coords.data[..., 0], coords.data[..., 1], height, width, border
    )
    y_floor = np.floor(yc)
    x_floor = np.floor(xc)
    wy = yc - y_floor
    wx = xc - x_floor
    y0 = y_floor.astype(np.intp)
    y1 = np.minimum(y0 + 1, height - 1)
    if border == "clamp":
        x0 = x_floor.astype(np.intp)
        x1 = np.minimum(x0 + 1, width - 1)
    else:
        x0 = x_floor.astype(np.intp) % width
        x1 = (x0 + 1) % width

    if per_channel:
        chan = np.broadcast_to(np.arange(channels), y0.shape)
        index = [
            (y0, x0, chan),
            (y0, x1, chan),
            (y1, x0, chan),
            (y1, x1, chan),
        ]
        wy_b, wx_b = wy, wx
    else:
        index = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
        wy_b, wx_b = wy[:, None], wx[:, None]
    corners = [f.data[i] for i in index]
    weights = [
        (1 - wy_b) * (1 - wx_b),
        (1 - wy_b) * wx_b,
        wy_b * (1 - wx_b),
        wy_b * wx_b,
    ]
    out = (
        weights[0] * corners[0]
        + weights[1] * corners[1]
        + weights[2] * corners[2]
        + weights[3] * corners[3]
    )

    def grad_fn(g):
        d_f = np.zeros_like(f.data)
        for where, weight in zip(index, weights):
            np.add.at(d_f, where, g * weight)
        d_y, d_x = _bilinear_coord_grad(g, corners, wy_b, wx_b)
        if not per_channel:
            d_y, d_x = d_y.sum(axis=1), d_x.sum(axis=1)
        d_coords = np.stack([d_y * y_in, d_x * x_in], axis=-1)
        return d_f, d_coords

    return _make("bilinear_sample", out, (f, coords), grad_fn)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Pesos lineales ``n_out x n_in`` con convención align-corners=false."""
    if n_out <= 0 or n_in <= 0:
        raise InvalidSize(size=(n_in, n_out), op="upsample_bilinear")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    low = np.floor(src).astype(np.intp)
    high = np.minimum(low + 1, n_in - 1)
    frac = src - low
    rows = np.arange(n_out)
    matrix = np.zeros((n_out, n_in))
    np.add.at(matrix, (rows, low), 1 - frac)
    np.add.at(matrix, (rows, high), frac)
    return matrix


def resize_array(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Remuestreo bilineal sin grafo de un arreglo ``H x W x C``."""
    ry = interpolation_matrix(array.shape[0], out_h)
    rx = interpolation_matrix(array.shape[1], out_w)
    return np.einsum("oh,hwc,pw->opc", ry, array, rx, optimize=True)


def upsample_bilinear(f: Tensor, out_h: int, out_w: int) -> Tensor:
    """Remuestreo bilineal de ``H x W x C`` a ``out_h x out_w x C``."""
    if f.ndim != 3:
        raise DimensionError(op="upsample_bilinear", detail="f debe ser HxWxC")
    if out_h <= 0 or out_w <= 0:
        raise InvalidSize(size=(out_h, out_w), op="upsample_bilinear")
    ry = interpolation_matrix(f.shape[0], out_h)
    rx = interpolation_matrix(f.shape[1], out_w)

    def grad_fn(g):
        return (np.einsum("oh,opc,pw->hwc", ry, g, rx, optimize=True),)

    data = np.einsum("oh,hwc,pw->opc", ry, f.data, rx, optimize=True)
    return _make("upsample_bilinear", data, (f,), grad_fn)
