"""Reverse-mode automatic differentiation over dense numpy arrays.

Implements exactly the operators the restoration network and its
attribution need: elementwise arithmetic, basic slicing and reshape,
2-D matmul, strided 2-D convolution, per-location channel layer norm,
nearest-neighbour 2x upsampling, full reductions, and the PSNR / L1
training losses built from those primitives.

Each op records a closure that maps the output gradient back to its
parents; `backward()` walks the tape in reverse topological order.
Arrays are float32 by default; pass float64 arrays for high-precision
verification runs. Operands of mixed precision are rejected rather
than silently promoted.
"""
from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.float32, np.float64)

# mse is floored before the log so identical images give a finite loss
PSNR_MSE_FLOOR = 1e-12


def _contig(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d to shape (1,); keep 0-d as is
    if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"]:
        return arr
    return np.ascontiguousarray(arr)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    elif dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return _contig(arr)


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode grads.

    Leaves are created directly; interior nodes are created by ops and
    carry a `_backward` closure. Gradients accumulate into `.grad`
    (same shape and dtype as `.data`) when `backward()` runs from a
    scalar node downstream of this one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- graph construction helpers ------------------------------------

    def _make_child(self, data: np.ndarray, parents: tuple["Tensor", ...],
                    backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = ""
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise TypeError(
                    f"mixed dtypes {self.data.dtype} and {other.data.dtype}")
            return other
        # python / numpy scalar
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def _check_same_shape(a: "Tensor", b: "Tensor") -> None:
        # broadcasting is deliberately out of scope; scalars ride along
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")

    @staticmethod
    def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        if g.shape == shape:
            return g
        # only the scalar-vs-array case can occur given _check_same_shape
        return g.sum().reshape(shape)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        Tensor._check_same_shape(self, other)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accum(Tensor._reduce_to(g, a.shape))
            b._accum(Tensor._reduce_to(g, b.shape))

        return self._make_child(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            a._accum(-g)

        return self._make_child(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return (-self) + self._coerce(other)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        Tensor._check_same_shape(self, other)
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accum(Tensor._reduce_to(g * b.data, a.shape))
            b._accum(Tensor._reduce_to(g * a.data, b.shape))

        return self._make_child(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects two 2-D tensors")
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"matmul inner dims {self.shape} @ {other.shape}")
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            a._accum(g @ b.data.T)
            b._accum(a.data.T @ g)

        return self._make_child(a.data @ b.data, (a, b), backward)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def backward(g: np.ndarray) -> None:
            a._accum(g.reshape(a.shape))

        return self._make_child(out_data, (a,), backward)

    def __getitem__(self, idx) -> "Tensor":
        # basic slicing only: the gate and per-image losses slice views
        a = self
        out_data = a.data[idx]
        if out_data.base is None and out_data.size != 1:
            raise ValueError("only basic slicing is supported")

        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accum(full)

        return self._make_child(_contig(np.asarray(out_data)), (a,), backward)

    # -- reductions and pointwise functions -----------------------------

    def sum(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            a._accum(np.broadcast_to(g, a.shape))

        out = np.asarray(a.data.sum(dtype=a.data.dtype)).reshape(())
        return self._make_child(out, (a,), backward)

    def mean(self) -> "Tensor":
        a = self
        n = a.data.size
        inv = np.asarray(1.0 / n, dtype=a.data.dtype)

        def backward(g: np.ndarray) -> None:
            a._accum(np.broadcast_to(g * inv, a.shape))

        out = np.asarray(a.data.mean(dtype=a.data.dtype)).reshape(())
        return self._make_child(out, (a,), backward)

    def abs(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            # subgradient 0 at exactly 0
            a._accum(g * np.sign(a.data))

        return self._make_child(np.abs(a.data), (a,), backward)

    def log10(self) -> "Tensor":
        a = self
        if np.any(a.data <= 0):
            raise ValueError("log10 requires strictly positive input")
        ln10 = np.asarray(math.log(10.0), dtype=a.data.dtype)

        def backward(g: np.ndarray) -> None:
            a._accum(g / (a.data * ln10))

        return self._make_child(np.log10(a.data), (a,), backward)

    def clamp_min(self, lo: float) -> "Tensor":
        a = self
        lo_arr = np.asarray(lo, dtype=a.data.dtype)

        def backward(g: np.ndarray) -> None:
            # gradient passes only where the input was strictly above lo
            a._accum(g * (a.data > lo_arr))

        return self._make_child(np.maximum(a.data, lo_arr), (a,), backward)

    # -- backward driver -------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss node")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free interior grads once consumed; leaves keep theirs
                if node is not self:
                    node.grad = None


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with OIHW kernels plus bias.

    Odd kernels only. Forward lowers the padded input to patch columns
    (im2col) and runs one matmul; backward scatters the kernel-space
    gradient back with the transposed layout.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be OIHW, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.data.dtype != weight.data.dtype or x.data.dtype != bias.data.dtype:
        raise TypeError("conv2d operands must share one dtype")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # patches: [N, Cin, Ho, Wo, kh, kw] view, no copy
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols2 = cols.reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols2 @ wmat.T + bias.data
    out_data = np.ascontiguousarray(
        out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    hp, wp = h + 2 * padding, w + 2 * padding

    def backward(g: np.ndarray) -> None:
        gcols = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if weight.requires_grad:
            weight._accum((gcols.T @ cols2).reshape(weight.shape))
        if bias.requires_grad:
            bias._accum(gcols.sum(axis=0))
        if x.requires_grad:
            gc = (gcols @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=x.data.dtype)
            # scatter-add each kernel offset back onto the padded grid
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gc[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x._accum(gxp)

    return x._make_child(out_data, (x, weight, bias), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis at each spatial location of NCHW input."""
    if x.data.ndim != 4:
        raise ValueError(f"layer_norm input must be NCHW, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if x.data.dtype != gamma.data.dtype or x.data.dtype != beta.data.dtype:
        raise TypeError("layer_norm operands must share one dtype")

    dt = x.data.dtype
    mu = x.data.mean(axis=1, keepdims=True, dtype=dt)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True, dtype=dt)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=dt))
    inv = inv.astype(dt)
    xhat = xc * inv
    gview = gamma.data.reshape(1, c, 1, 1)
    out_data = xhat * gview + beta.data.reshape(1, c, 1, 1)

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx_hat = g * gview
            m1 = gx_hat.mean(axis=1, keepdims=True, dtype=dt)
            m2 = (gx_hat * xhat).mean(axis=1, keepdims=True, dtype=dt)
            x._accum(inv * (gx_hat - m1 - xhat * m2))

    return x._make_child(out_data, (x, gamma, beta), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat each spatial position of NCHW input into a 2x2 block."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample input must be NCHW, got shape {x.shape}")
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g: np.ndarray) -> None:
        x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return x._make_child(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def loss_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient 0 where pred equals target."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def loss_psnr(pred: Tensor, target: Tensor, max_val: float = 1.0) -> Tensor:
    """Negative peak signal-to-noise ratio in dB; lower is better.

    loss = 10*log10(max(mse, 1e-12)) - 20*log10(max_val), so identical
    images bottom out at -120 dB for max_val 1 instead of diverging.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    diff = pred - target
    mse = (diff * diff).mean().clamp_min(PSNR_MSE_FLOOR)
    return mse.log10() * 10.0 - 20.0 * math.log10(max_val)


# ---------------------------------------------------------------------------
# gradient utilities


def backprop(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward from a scalar loss; return grads keyed like `params`.

    Parameters that do not influence the loss get zero gradients rather
    than missing entries, so optimizers can treat the result uniformly.
    """
    loss.backward()
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    return out


def finite_diff_grad(f: Callable[[Mapping[str, np.ndarray]], float],
                     params: Mapping[str, np.ndarray],
                     h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays."""
    grads: dict[str, np.ndarray] = {}
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max over elements of |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def wrap_params(arrays: Mapping[str, np.ndarray], requires_grad: bool = True,
                dtype=None) -> dict[str, Tensor]:
    """Wrap named arrays as leaf tensors, optionally casting dtype."""
    return {k: Tensor(v if dtype is None else v.astype(dtype), requires_grad=requires_grad)
            for k, v in arrays.items()}
