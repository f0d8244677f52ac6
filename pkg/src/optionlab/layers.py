"""Neural layer zoo built on the in-package autodiff primitives.

Four model families share one ``ModelSpec``/``Model`` interface:

* ``dense``   - plain MLP on the 10 pricing features,
* ``conv1d``  - time-delay stack on overlapping feature windows,
* ``lstm``/``gru`` (+ optional ``attention``) - recurrent stacks on causal
  windows, read out at the last timestep,
* ``kan``     - layers that expand a mixed, tanh-squashed input in an
  orthogonal-polynomial basis and contract against learned coefficients.

Every model ends in a linear head; KAN models also start with a linear head
that maps the raw feature width onto the polynomial width.  Parameter
counting (``param_count``) is pure arithmetic on the ModelSpec and is asserted
elsewhere to agree with the runtime tensor enumeration.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ACTIVATIONS",
    "KAN_FAMILIES",
    "LayerSpec",
    "ModelSpec",
    "DenseParams",
    "Conv1dParams",
    "LstmParams",
    "GruParams",
    "AttentionParams",
    "KanLayerParams",
    "dense_forward",
    "conv1d_forward",
    "lstm_step",
    "gru_step",
    "self_attention",
    "kan_poly_eval",
    "kan_layer_forward",
    "init_kan",
    "make_dropout_mask",
    "Model",
    "build_model",
    "param_count",
    "save_model",
    "load_model",
]


def _identity(t: Tensor) -> Tensor:
    return t


ACTIVATIONS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "softmax": ad.softmax,
    "none": _identity,
}

KAN_FAMILIES = ("chebyshev2", "legendre", "bessel", "laguerre")

_RNN_KINDS = ("lstm", "gru", "attention")
_KINDS = ("dense", "conv1d", "kan") + _RNN_KINDS


def _activation_fn(name):
    key = "none" if name is None else name
    if key not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; known: {sorted(ACTIVATIONS)}")
    return ACTIVATIONS[key]


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class LayerSpec:
    """One layer: its kind, output width, and kind-specific settings.

    ``width`` means: units for dense, filters for conv1d, hidden size for
    lstm/gru, the per-head dimension for attention (must equal the incoming
    width; the output is twice that), and the polynomial width for kan.
    """

    kind: str
    width: int
    activation: str | None = None
    degree: int | None = None
    family: str | None = None
    kernel_size: int | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; known: {_KINDS}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation is not None:
            _activation_fn(self.activation)
        if self.kind == "kan":
            if self.degree is None or self.degree < 0:
                raise ValueError("kan layers need a degree >= 0")
            if self.family not in KAN_FAMILIES:
                raise ValueError(
                    f"kan family must be one of {KAN_FAMILIES}, got {self.family!r}"
                )
        if self.kind == "conv1d" and (self.kernel_size is None or self.kernel_size < 1):
            raise ValueError("conv1d layers need kernel_size >= 1")


@dataclass(frozen=True)
class ModelSpec:
    """A full architecture: input width, layer stack, output width.

    ``timesteps`` is required for conv1d models (the flatten head needs it)
    and optional elsewhere; it documents the window length the model expects.
    ``kan_init`` picks the coefficient-variance convention: "code" uses
    std = 1/(in*(degree+1)), "eq" uses std = 1/(in*degree) except at degree 0
    where it falls back to the "code" formula.
    """

    layers: tuple
    input_dim: int = 10
    output_dim: int = 1
    timesteps: int | None = None
    kan_init: str = "code"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.kan_init not in ("code", "eq"):
            raise ValueError(f"kan_init must be 'code' or 'eq', got {self.kan_init!r}")
        kinds = {l.kind for l in self.layers}
        if kinds <= {"dense"} or kinds <= {"kan"} or kinds <= {"conv1d"}:
            pass
        elif kinds <= set(_RNN_KINDS) and kinds & {"lstm", "gru"}:
            if self.layers[0].kind == "attention":
                raise ValueError("attention cannot be the first layer")
        else:
            raise ValueError(
                f"incompatible layer kinds in one model: {sorted(kinds)}"
            )
        if self.mode() == "conv" and self.timesteps is None:
            raise ValueError("conv1d models need timesteps (the flatten head size)")
        if self.timesteps is not None and self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        self._width_chain()  # validates attention widths

    def mode(self) -> str:
        kind = self.layers[0].kind
        if kind == "dense":
            return "mlp"
        if kind == "kan":
            return "kan"
        if kind == "conv1d":
            return "conv"
        return "rnn"

    def _width_chain(self) -> list:
        """Input width seen by each layer, plus the final pre-head width."""
        widths = []
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            widths.append(prev)
            if layer.kind == "attention":
                if layer.width != prev:
                    raise ValueError(
                        f"attention layer {i} width {layer.width} must equal the "
                        f"incoming width {prev}"
                    )
                prev = 2 * prev
            else:
                prev = layer.width
        widths.append(prev)
        return widths

    def head_in_dim(self) -> int:
        final = self._width_chain()[-1]
        if self.mode() == "conv":
            return self.timesteps * final
        return final

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            entry = {"kind": l.kind, "width": l.width}
            if l.activation is not None:
                entry["activation"] = l.activation
            if l.degree is not None:
                entry["degree"] = l.degree
            if l.family is not None:
                entry["family"] = l.family
            if l.kernel_size is not None:
                entry["kernel_size"] = l.kernel_size
            if l.dropout:
                entry["dropout"] = l.dropout
            layers.append(entry)
        out = {
            "layers": layers,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
        }
        if self.timesteps is not None:
            out["timesteps"] = self.timesteps
        if self.kan_init != "code":
            out["kan_init"] = self.kan_init
        return out

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        allowed = {"layers", "input_dim", "output_dim", "timesteps", "kan_init"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {sorted(unknown)}")
        if "layers" not in d:
            raise ValueError("ModelSpec needs a 'layers' list")
        layer_allowed = {
            "kind", "width", "activation", "degree", "family", "kernel_size", "dropout",
        }
        layers = []
        for i, entry in enumerate(d["layers"]):
            bad = set(entry) - layer_allowed
            if bad:
                raise ValueError(f"unknown LayerSpec keys in layer {i}: {sorted(bad)}")
            layers.append(LayerSpec(**entry))
        return ModelSpec(
            layers=tuple(layers),
            input_dim=d.get("input_dim", 10),
            output_dim=d.get("output_dim", 1),
            timesteps=d.get("timesteps"),
            kan_init=d.get("kan_init", "code"),
        )


# ---------------------------------------------------------------------------
# parameter containers and forwards


@dataclass
class DenseParams:
    weights: Tensor  # [in, out]
    bias: Tensor  # [out]
    activation: str | None = None


def dense_forward(p: DenseParams, x: Tensor) -> Tensor:
    """act(x @ W + b)."""
    return _activation_fn(p.activation)(ad.add(ad.matmul(x, p.weights), p.bias))


@dataclass
class Conv1dParams:
    kernels: Tensor  # [kernel_size, in_channels, filters]
    bias: Tensor  # [filters]
    activation: str | None = None
    dropout: float = 0.0


def conv1d_forward(p: Conv1dParams, x: Tensor, train: bool = False, rng=None) -> Tensor:
    """Length-preserving 1-D convolution over [batch, time, channels].

    Zero "same" padding, with the extra pad on the left for even kernels, so
    out[:, t] = sum_dk pad(x)[:, t + dk] @ kernels[dk].  Implemented as a sum
    of shifted matmuls over the kernel taps.
    """
    if x.ndim != 3:
        raise ValueError(f"conv1d expects [batch, time, channels], got {x.shape}")
    k, in_ch, _ = p.kernels.shape
    if x.shape[-1] != in_ch:
        raise ValueError(
            f"conv1d: input has {x.shape[-1]} channels, kernels expect {in_ch}"
        )
    batch, time = x.shape[0], x.shape[1]
    left, right = k // 2, (k - 1) // 2

    if left or right:
        xt = ad.transpose_last(x)  # [B, C, T]
        parts = []
        if left:
            parts.append(Tensor(np.zeros((batch, in_ch, left))))
        parts.append(xt)
        if right:
            parts.append(Tensor(np.zeros((batch, in_ch, right))))
        padded = ad.transpose_last(ad.concat(parts))  # [B, T + k - 1, C]
    else:
        padded = x

    out = None
    for dk in range(k):
        window = ad.slice_(padded, (slice(None), slice(dk, dk + time), slice(None)))
        term = ad.matmul(window, ad.slice_(p.kernels, dk))
        out = term if out is None else ad.add(out, term)
    out = _activation_fn(p.activation)(ad.add(out, p.bias))
    if train and p.dropout > 0.0:
        out = ad.dropout_apply(out, make_dropout_mask(rng, out.shape, p.dropout))
    return out


@dataclass
class LstmParams:
    """Gate weights act on the concatenation [h_prev, x_t] (hidden first)."""

    w_f: Tensor
    b_f: Tensor
    w_i: Tensor
    b_i: Tensor
    w_o: Tensor
    b_o: Tensor
    w_c: Tensor
    b_c: Tensor


def lstm_step(p: LstmParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One recurrence step: returns (h_t, c_t).

    f,i,o = sigmoid([h,x]W + b); c~ = tanh([h,x]W_c + b_c);
    c_t = f*c_prev + i*c~; h_t = o*tanh(c_t).
    """
    z = ad.concat([h_prev, x_t])
    f = ad.sigmoid(ad.add(ad.matmul(z, p.w_f), p.b_f))
    i = ad.sigmoid(ad.add(ad.matmul(z, p.w_i), p.b_i))
    o = ad.sigmoid(ad.add(ad.matmul(z, p.w_o), p.b_o))
    c_tilde = ad.tanh(ad.add(ad.matmul(z, p.w_c), p.b_c))
    c_t = ad.add(ad.mul(f, c_prev), ad.mul(i, c_tilde))
    h_t = ad.mul(o, ad.tanh(c_t))
    return h_t, c_t


@dataclass
class GruParams:
    """Reset/update gates act on [h_prev, x_t]; the candidate on [r*h_prev, x_t]."""

    w_r: Tensor
    b_r: Tensor
    w_z: Tensor
    b_z: Tensor
    w_h: Tensor
    b_h: Tensor


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One recurrence step: h_t = z*h_prev + (1-z)*tanh([r*h_prev, x]W_h + b_h)."""
    zin = ad.concat([h_prev, x_t])
    r = ad.sigmoid(ad.add(ad.matmul(zin, p.w_r), p.b_r))
    z = ad.sigmoid(ad.add(ad.matmul(zin, p.w_z), p.b_z))
    cand = ad.tanh(
        ad.add(ad.matmul(ad.concat([ad.mul(r, h_prev), x_t]), p.w_h), p.b_h)
    )
    keep = ad.mul(z, h_prev)
    new = ad.mul(ad.sub(Tensor(np.ones_like(z.data)), z), cand)
    return ad.add(keep, new)


@dataclass
class AttentionParams:
    w_q: Tensor  # [d, d]
    w_k: Tensor
    w_v: Tensor


def self_attention(p: AttentionParams, h: Tensor) -> Tensor:
    """Scaled dot-product self-attention with a residual concat.

    A = softmax(QK^T / sqrt(d)) row-wise, O = AV, output = [O, H] on the last
    axis, so [.., T, d] -> [.., T, 2d].  Leading batch axes broadcast.
    """
    if h.ndim < 2:
        raise ValueError(f"attention expects [.., time, d], got {h.shape}")
    d = h.shape[-1]
    if p.w_q.shape[0] != d:
        raise ValueError(
            f"attention: input width {d} does not match weights {p.w_q.shape}"
        )
    q = ad.matmul(h, p.w_q)
    k = ad.matmul(h, p.w_k)
    v = ad.matmul(h, p.w_v)
    scores = ad.scale(ad.matmul(q, ad.transpose_last(k)), 1.0 / math.sqrt(d))
    weights = ad.softmax(scores)
    attended = ad.matmul(weights, v)
    return ad.concat([attended, h])


# ---------------------------------------------------------------------------
# KAN layers


@dataclass
class KanLayerParams:
    """Mix + squash + polynomial expansion + learned contraction.

    ``coeffs`` has shape [in, out, degree + 1]; ``mix_weights`` is [in, in]
    and acts on the layer input before the tanh squash (None drops the mix
    stage, in which case the bare input is squashed instead).
    """

    family: str
    degree: int
    coeffs: Tensor
    mix_weights: Tensor | None = None
    mix_bias: Tensor | None = None
    dropout: float = 0.0


def kan_poly_eval(family: str, degree: int, x: Tensor) -> Tensor:
    """Stack P_0(x) .. P_degree(x) on a new trailing axis.

    Recurrences (P used generically for each family):
      chebyshev2: P0=1, P1=2x,   P_n = 2x P_{n-1} - P_{n-2}
      legendre:   P0=1, P1=x,    n P_n = (2n-1) x P_{n-1} - (n-1) P_{n-2}
      bessel:     P0=1, P1=x+1,  P_n = (2n-1) x P_{n-1} + P_{n-2}
      laguerre:   P0=1, P1=1-x,  n P_n = (2n-1-x) P_{n-1} - (n-1) P_{n-2}

    Differentiable end to end (built from the autodiff primitives); output
    shape is x.shape + (degree + 1,).
    """
    if family not in KAN_FAMILIES:
        raise ValueError(f"unknown polynomial family {family!r}; known: {KAN_FAMILIES}")
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    ones = Tensor(np.ones(x.shape))
    polys = [ones]
    if degree >= 1:
        if family == "chebyshev2":
            polys.append(ad.scale(x, 2.0))
        elif family == "legendre":
            polys.append(x)
        elif family == "bessel":
            polys.append(ad.add(x, ones))
        else:  # laguerre
            polys.append(ad.sub(ones, x))
    for n in range(2, degree + 1):
        p1, p2 = polys[-1], polys[-2]
        if family == "chebyshev2":
            nxt = ad.sub(ad.mul(ad.scale(x, 2.0), p1), p2)
        elif family == "legendre":
            nxt = ad.scale(
                ad.sub(ad.scale(ad.mul(x, p1), 2.0 * n - 1.0), ad.scale(p2, n - 1.0)),
                1.0 / n,
            )
        elif family == "bessel":
            nxt = ad.add(ad.scale(ad.mul(x, p1), 2.0 * n - 1.0), p2)
        else:  # laguerre
            nxt = ad.scale(
                ad.sub(
                    ad.sub(ad.scale(p1, 2.0 * n - 1.0), ad.mul(x, p1)),
                    ad.scale(p2, n - 1.0),
                ),
                1.0 / n,
            )
        polys.append(nxt)
    stacked = [ad.reshape(p, p.shape + (1,)) for p in polys]
    return ad.concat(stacked)


def kan_layer_forward(
    p: KanLayerParams, z_prev: Tensor, train: bool = False, rng=None
) -> Tensor:
    """x = tanh(mix(z_prev)); y[b,o] = sum_{i,n} P_n(x[b,i]) * coeffs[i,o,n].

    The tanh keeps every polynomial argument inside [-1, 1].  The contraction
    is a flat matmul: the [in, out, n] coefficient block is transposed to
    [in, n, out] and reshaped to [in*(degree+1), out], matching the row-major
    flattening of the [batch, in, n] polynomial stack.
    """
    if p.mix_weights is not None:
        pre = ad.add(ad.matmul(z_prev, p.mix_weights), p.mix_bias)
    else:
        pre = z_prev
    x = ad.tanh(pre)
    poly = kan_poly_eval(p.family, p.degree, x)  # [batch, in, degree + 1]
    batch = poly.shape[0]
    in_dim, out_dim, n_basis = p.coeffs.shape
    flat = ad.reshape(poly, (batch, in_dim * n_basis))
    c = ad.reshape(ad.transpose_last(p.coeffs), (in_dim * n_basis, out_dim))
    y = ad.matmul(flat, c)
    if train and p.dropout > 0.0:
        y = ad.dropout_apply(y, make_dropout_mask(rng, y.shape, p.dropout))
    return y


# ---------------------------------------------------------------------------
# initialisation


def make_dropout_mask(rng, shape, rate: float) -> np.ndarray:
    """Inverted-scaling mask: entries are 0 with probability rate, else 1/(1-rate)."""
    if rng is None:
        raise ValueError("dropout at train time needs an rng")
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def _glorot(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_dense(rng, in_dim, out_dim, activation=None) -> DenseParams:
    return DenseParams(
        weights=Tensor(_glorot(rng, in_dim, out_dim, (in_dim, out_dim)), True),
        bias=Tensor(np.zeros(out_dim), True),
        activation=activation,
    )


def _init_conv1d(rng, kernel_size, in_ch, filters, activation, dropout) -> Conv1dParams:
    fan_in, fan_out = kernel_size * in_ch, kernel_size * filters
    return Conv1dParams(
        kernels=Tensor(
            _glorot(rng, fan_in, fan_out, (kernel_size, in_ch, filters)), True
        ),
        bias=Tensor(np.zeros(filters), True),
        activation=activation,
        dropout=dropout,
    )


def _init_gates(rng, in_dim, hidden, n_gates):
    rows = hidden + in_dim
    out = []
    for _ in range(n_gates):
        out.append(Tensor(_glorot(rng, rows, hidden, (rows, hidden)), True))
        out.append(Tensor(np.zeros(hidden), True))
    return out


def init_kan(
    rng,
    in_dim: int,
    out_dim: int,
    degree: int,
    family: str,
    variant: str = "code",
    dropout: float = 0.0,
    mix: bool = True,
) -> KanLayerParams:
    """Coefficients ~ N(0, std^2) with std = 1/(in*(degree+1)) ("code") or
    1/(in*degree) ("eq"); degree 0 always uses the "code" formula since the
    "eq" one degenerates there.  The mix stage gets Glorot weights and zero
    bias."""
    if variant not in ("code", "eq"):
        raise ValueError(f"variant must be 'code' or 'eq', got {variant!r}")
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    if variant == "eq" and degree > 0:
        std = 1.0 / (in_dim * degree)
    else:
        std = 1.0 / (in_dim * (degree + 1))
    coeffs = Tensor(rng.normal(0.0, std, size=(in_dim, out_dim, degree + 1)), True)
    mix_w = mix_b = None
    if mix:
        mix_w = Tensor(_glorot(rng, in_dim, in_dim, (in_dim, in_dim)), True)
        mix_b = Tensor(np.zeros(in_dim), True)
    return KanLayerParams(
        family=family,
        degree=degree,
        coeffs=coeffs,
        mix_weights=mix_w,
        mix_bias=mix_b,
        dropout=dropout,
    )


# ---------------------------------------------------------------------------
# the assembled model


class Model:
    """A layer stack plus linear head(s) and an optional input standardiser.

    The standardiser (per-feature mean/scale fitted on training data) is
    applied to raw inputs before the first layer; it is a preprocessing
    artifact, carried in checkpoints but not a trainable parameter.
    """

    def __init__(self, spec: ModelSpec, blocks, input_head, head, scaler=None):
        self.spec = spec
        self.blocks = blocks
        self.input_head = input_head
        self.head = head
        self.scaler = scaler

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        """Deterministically ordered [(name, Tensor)] of every trainable tensor."""
        out = []
        if self.input_head is not None:
            out.append(("input_head.w", self.input_head.weights))
            out.append(("input_head.b", self.input_head.bias))
        for i, (layer, block) in enumerate(zip(self.spec.layers, self.blocks)):
            prefix = f"layers.{i}"
            if layer.kind == "dense":
                out += [(f"{prefix}.w", block.weights), (f"{prefix}.b", block.bias)]
            elif layer.kind == "conv1d":
                out += [(f"{prefix}.kernels", block.kernels), (f"{prefix}.b", block.bias)]
            elif layer.kind == "lstm":
                out += [
                    (f"{prefix}.w_f", block.w_f), (f"{prefix}.b_f", block.b_f),
                    (f"{prefix}.w_i", block.w_i), (f"{prefix}.b_i", block.b_i),
                    (f"{prefix}.w_o", block.w_o), (f"{prefix}.b_o", block.b_o),
                    (f"{prefix}.w_c", block.w_c), (f"{prefix}.b_c", block.b_c),
                ]
            elif layer.kind == "gru":
                out += [
                    (f"{prefix}.w_r", block.w_r), (f"{prefix}.b_r", block.b_r),
                    (f"{prefix}.w_z", block.w_z), (f"{prefix}.b_z", block.b_z),
                    (f"{prefix}.w_h", block.w_h), (f"{prefix}.b_h", block.b_h),
                ]
            elif layer.kind == "attention":
                out += [
                    (f"{prefix}.w_q", block.w_q),
                    (f"{prefix}.w_k", block.w_k),
                    (f"{prefix}.w_v", block.w_v),
                ]
            elif layer.kind == "kan":
                out += [
                    (f"{prefix}.mix_w", block.mix_weights),
                    (f"{prefix}.mix_b", block.mix_bias),
                    (f"{prefix}.coeffs", block.coeffs),
                ]
        out.append(("head.w", self.head.weights))
        out.append(("head.b", self.head.bias))
        return out

    def snapshot(self):
        return [t.data.copy() for _, t in self.parameters()]

    def restore(self, snap):
        params = self.parameters()
        if len(snap) != len(params):
            raise ValueError("snapshot does not match this model's parameters")
        for (_, t), arr in zip(params, snap):
            t.data = np.ascontiguousarray(arr, dtype=np.float64)

    def set_scaler(self, mean, scale):
        mean = np.asarray(mean, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if mean.shape != (self.spec.input_dim,) or scale.shape != (self.spec.input_dim,):
            raise ValueError("scaler must be per-input-feature vectors")
        if not np.all(scale > 0.0):
            raise ValueError("scaler scale entries must be positive")
        self.scaler = (mean, scale)

    # -- forward ------------------------------------------------------------

    def _prepare_input(self, x) -> Tensor:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        mode = self.spec.mode()
        want = 3 if mode in ("conv", "rnn") else 2
        if arr.ndim != want:
            raise ValueError(
                f"{mode} model expects {want}-D input, got shape {arr.shape}"
            )
        if arr.shape[-1] != self.spec.input_dim:
            raise ValueError(
                f"input feature width {arr.shape[-1]} != spec input_dim "
                f"{self.spec.input_dim}"
            )
        if self.scaler is not None:
            mean, scale = self.scaler
            arr = (arr - mean) / scale
        return Tensor(arr)

    def forward(self, x, train: bool = False, rng=None) -> Tensor:
        """Predictions as a Tensor of shape [batch] (output_dim 1) or [batch, out]."""
        h = self._prepare_input(x)
        mode = self.spec.mode()
        if mode in ("mlp", "kan"):
            if self.input_head is not None:
                h = dense_forward(self.input_head, h)
            for layer, block in zip(self.spec.layers, self.blocks):
                if layer.kind == "dense":
                    h = dense_forward(block, h)
                    if train and layer.dropout > 0.0:
                        h = ad.dropout_apply(
                            h, make_dropout_mask(rng, h.shape, layer.dropout)
                        )
                else:
                    h = kan_layer_forward(block, h, train=train, rng=rng)
        elif mode == "conv":
            if self.spec.timesteps != h.shape[1]:
                raise ValueError(
                    f"conv model built for {self.spec.timesteps} timesteps, "
                    f"got {h.shape[1]}"
                )
            for layer, block in zip(self.spec.layers, self.blocks):
                h = conv1d_forward(block, h, train=train, rng=rng)
            h = ad.reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
        else:  # rnn
            for layer, block in zip(self.spec.layers, self.blocks):
                if layer.kind == "attention":
                    h = self_attention(block, h)
                else:
                    h = _run_recurrent(layer.kind, block, h, layer.width)
                if layer.activation is not None:
                    h = _activation_fn(layer.activation)(h)
                if train and layer.dropout > 0.0:
                    h = ad.dropout_apply(
                        h, make_dropout_mask(rng, h.shape, layer.dropout)
                    )
            h = ad.slice_(h, (slice(None), -1, slice(None)))  # last timestep
        out = dense_forward(self.head, h)
        if self.spec.output_dim == 1:
            out = ad.reshape(out, (out.shape[0],))
        return out

    def predict(self, x, batch_size: int = 8192) -> np.ndarray:
        """Inference without a tape, in batches; returns a numpy array."""
        arr = np.asarray(x, dtype=np.float64)
        outs = []
        for start in range(0, arr.shape[0], batch_size):
            outs.append(self.forward(arr[start : start + batch_size]).data)
        return np.concatenate(outs, axis=0)


def _run_recurrent(kind: str, block, x: Tensor, hidden: int) -> Tensor:
    """Unroll an lstm/gru over [batch, time, features] -> [batch, time, hidden]."""
    batch, time = x.shape[0], x.shape[1]
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    steps = []
    for t in range(time):
        x_t = ad.slice_(x, (slice(None), t, slice(None)))
        if kind == "lstm":
            h, c = lstm_step(block, x_t, h, c)
        else:
            h = gru_step(block, x_t, h)
        steps.append(ad.reshape(h, (batch, hidden, 1)))
    return ad.transpose_last(ad.concat(steps))  # [B, H, T] -> [B, T, H]


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Deterministically initialise a model from its spec and a seed."""
    rng = np.random.default_rng(seed)
    input_head = None
    blocks = []
    prev = spec.input_dim
    if spec.mode() == "kan":
        first = spec.layers[0].width
        input_head = _init_dense(rng, spec.input_dim, first, activation=None)
        prev = first
    for layer in spec.layers:
        if layer.kind == "dense":
            blocks.append(_init_dense(rng, prev, layer.width, layer.activation))
            prev = layer.width
        elif layer.kind == "conv1d":
            blocks.append(
                _init_conv1d(
                    rng, layer.kernel_size, prev, layer.width,
                    layer.activation, layer.dropout,
                )
            )
            prev = layer.width
        elif layer.kind == "lstm":
            w = _init_gates(rng, prev, layer.width, 4)
            blocks.append(LstmParams(*w))
            prev = layer.width
        elif layer.kind == "gru":
            w = _init_gates(rng, prev, layer.width, 3)
            blocks.append(GruParams(*w))
            prev = layer.width
        elif layer.kind == "attention":
            blocks.append(
                AttentionParams(
                    w_q=Tensor(_glorot(rng, prev, prev, (prev, prev)), True),
                    w_k=Tensor(_glorot(rng, prev, prev, (prev, prev)), True),
                    w_v=Tensor(_glorot(rng, prev, prev, (prev, prev)), True),
                )
            )
            prev = 2 * prev
        elif layer.kind == "kan":
            blocks.append(
                init_kan(
                    rng, prev, layer.width, layer.degree, layer.family,
                    variant=spec.kan_init, dropout=layer.dropout,
                )
            )
            prev = layer.width
    head = _init_dense(rng, spec.head_in_dim(), spec.output_dim, activation=None)
    return Model(spec, blocks, input_head, head)


def param_count(spec: ModelSpec) -> int:
    """Trainable scalar count, by pure arithmetic on the ModelSpec.

    dense: in*out + out.  conv1d: k*in*filters + filters.  lstm: 4 gates of
    (in+h)*h + h; gru: 3.  attention: 3*d^2 (no biases).  kan: in*out*(deg+1)
    coefficients plus an in*in mix with bias; kan models add a linear input
    head, and every model ends with a linear output head.
    """
    total = 0
    prev = spec.input_dim
    if spec.mode() == "kan":
        first = spec.layers[0].width
        total += spec.input_dim * first + first
        prev = first
    for layer in spec.layers:
        if layer.kind == "dense":
            total += prev * layer.width + layer.width
            prev = layer.width
        elif layer.kind == "conv1d":
            total += layer.kernel_size * prev * layer.width + layer.width
            prev = layer.width
        elif layer.kind == "lstm":
            total += 4 * ((prev + layer.width) * layer.width + layer.width)
            prev = layer.width
        elif layer.kind == "gru":
            total += 3 * ((prev + layer.width) * layer.width + layer.width)
            prev = layer.width
        elif layer.kind == "attention":
            total += 3 * prev * prev
            prev = 2 * prev
        elif layer.kind == "kan":
            total += prev * layer.width * (layer.degree + 1)
            total += prev * prev + prev
            prev = layer.width
    total += spec.head_in_dim() * spec.output_dim + spec.output_dim
    return total


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"OLNN"
_VERSION = 1


def save_model(model: Model, path) -> None:
    """Write a checkpoint: magic, version, meta JSON, then named f64 tensors.

    Layout (all integers little-endian):
      "OLNN" | u32 version | u32 meta_len | meta (UTF-8 JSON)
      | u32 n_tensors | for each: u16 name_len | name | u8 ndim
      | ndim * u64 dims | dims-product * f64 payload
    The meta JSON holds the ModelSpec dict and the input scaler (or null).
    """
    meta = {
        "spec": model.spec.to_dict(),
        "scaler": None
        if model.scaler is None
        else {"mean": model.scaler[0].tolist(), "scale": model.scaler[1].tolist()},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_model(path) -> Model:
    """Rebuild a model from a checkpoint written by ``save_model``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"not a model checkpoint (bad magic {blob[:4]!r})")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_tensors,) = struct.unpack_from("<I", blob, off)
    off += 4

    loaded = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        loaded[name] = np.array(arr, dtype=np.float64)

    spec = ModelSpec.from_dict(meta["spec"])
    model = build_model(spec, seed=0)
    names = [name for name, _ in model.parameters()]
    if set(names) != set(loaded):
        raise ValueError(
            "checkpoint tensors do not match the model spec: "
            f"missing {sorted(set(names) - set(loaded))}, "
            f"extra {sorted(set(loaded) - set(names))}"
        )
    for name, tensor in model.parameters():
        if loaded[name].shape != tensor.shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape {loaded[name].shape}, "
                f"expected {tensor.shape}"
            )
        tensor.data = np.ascontiguousarray(loaded[name])
    if meta.get("scaler"):
        model.set_scaler(meta["scaler"]["mean"], meta["scaler"]["scale"])
    return model
