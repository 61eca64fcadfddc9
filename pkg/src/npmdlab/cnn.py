"""One-sided stride-one ReLU CNNs with magnitude caps, trained by capped ERM.

Architecture: pad x in R^D to a D x J matrix (x in channel 0), apply M blocks
of L layers (conv -> add bias -> ReLU), then a dense layer sum(W * G(x)) + b.
An optional truncation stage clips the output to [-A, A].

Parameters live in one flat float64 vector; ``CnnParams`` exposes views of it
in block-major, layer-major, row-major order (the serialization order).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .manifold import EmbeddedManifold, lipschitz_ratio_max


class CapViolationError(ValueError):
    pass


class NanLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CnnSpec:
    blocks_M: int
    layers_per_block_L: int
    max_channels_J: int
    filter_size_I: int
    weight_cap_R1: float
    output_cap_R2: float
    ambient_dim_D: int

    def __post_init__(self):
        for name in ("blocks_M", "layers_per_block_L", "max_channels_J", "ambient_dim_D"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 2 <= self.filter_size_I <= self.ambient_dim_D:
            raise ValueError(f"filter size must lie in [2, D], got I={self.filter_size_I}")
        if self.weight_cap_R1 <= 0 or self.output_cap_R2 <= 0:
            raise ValueError("caps must be positive")

    @property
    def n_layers(self) -> int:
        return self.blocks_M * self.layers_per_block_L

    @property
    def filter_shape(self) -> tuple[int, int, int]:
        J = self.max_channels_J
        return (J, self.filter_size_I, J)

    @property
    def bias_shape(self) -> tuple[int, int]:
        return (self.ambient_dim_D, self.max_channels_J)

    @property
    def layer_size(self) -> int:
        return math.prod(self.filter_shape) + math.prod(self.bias_shape)

    @property
    def n_params(self) -> int:
        return self.n_layers * self.layer_size + self.ambient_dim_D * self.max_channels_J + 1


@dataclass(frozen=True)
class RestrictedClassSpec:
    bound_A: float
    lip_L: float
    alpha: float = 1.0
    proximity_eps: float = 0.0
    check_net: EmbeddedManifold | None = None

    def __post_init__(self):
        if self.bound_A <= 0 or self.lip_L < 0 or self.proximity_eps < 0:
            raise ValueError("restriction constants must be nonnegative (A positive)")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


@dataclass
class CnnParams:
    spec: CnnSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got {self.flat.shape}")

    @classmethod
    def zeros(cls, spec: CnnSpec) -> "CnnParams":
        return cls(spec, np.zeros(spec.n_params))

    def copy(self) -> "CnnParams":
        return CnnParams(self.spec, self.flat.copy())

    def _layer_offset(self, m: int, l: int) -> int:
        return (m * self.spec.layers_per_block_L + l) * self.spec.layer_size

    def filter(self, m: int, l: int) -> np.ndarray:
        o = self._layer_offset(m, l)
        n = math.prod(self.spec.filter_shape)
        return self.flat[o:o + n].reshape(self.spec.filter_shape)

    def bias(self, m: int, l: int) -> np.ndarray:
        o = self._layer_offset(m, l) + math.prod(self.spec.filter_shape)
        return self.flat[o:o + math.prod(self.spec.bias_shape)].reshape(self.spec.bias_shape)

    def layers(self):
        for m in range(self.spec.blocks_M):
            for l in range(self.spec.layers_per_block_L):
                yield self.filter(m, l), self.bias(m, l)

    @property
    def dense_W(self) -> np.ndarray:
        o = self.spec.n_layers * self.spec.layer_size
        return self.flat[o:o + math.prod(self.spec.bias_shape)].reshape(self.spec.bias_shape)

    @property
    def dense_b(self) -> float:
        return float(self.flat[-1])

    def cap_vector(self) -> np.ndarray:
        caps = np.full(self.spec.n_params, self.spec.weight_cap_R1)
        caps[self.spec.n_layers * self.spec.layer_size:] = self.spec.output_cap_R2
        return caps

    def validate(self) -> None:
        if np.any(np.abs(self.flat) > self.cap_vector()):
            raise CapViolationError("parameters exceed the magnitude caps R1/R2")


def init_params(spec: CnnSpec, rng, scale: float = 1.0, noise: float = 0.1) -> CnnParams:
    """Random first layer, near-identity deeper layers, small dense layer; clipped to the caps.

    The first layer is He-initialized on the single input channel. Later layers
    start at the identity on tap 0 plus ``noise`` times a He draw, so a deep
    plain ReLU stack initially passes its features through unchanged.
    """
    p = CnnParams.zeros(spec)
    J, I = spec.max_channels_J, spec.filter_size_I
    for m in range(spec.blocks_M):
        for l in range(spec.layers_per_block_L):
            if m == 0 and l == 0:
                p.filter(m, l)[...] = rng.standard_normal(spec.filter_shape) * scale * math.sqrt(2.0 / I)
            else:
                w = rng.standard_normal(spec.filter_shape) * noise * math.sqrt(2.0 / (I * J))
                w[np.arange(J), 0, np.arange(J)] += 1.0
                p.filter(m, l)[...] = w
            p.bias(m, l)[...] = 0.01
    p.dense_W[...] = rng.standard_normal(spec.bias_shape) * scale / math.sqrt(math.prod(spec.bias_shape))
    np.clip(p.flat, -p.cap_vector(), p.cap_vector(), out=p.flat)
    return p


# --- forward / backward -------------------------------------------------------

def _windows(Z: np.ndarray, I: int) -> np.ndarray:
    """(B, D, C) -> (B, D, I, C) with rows beyond D treated as zero."""
    B, D, C = Z.shape
    Zp = np.concatenate([Z, np.zeros((B, I - 1, C))], axis=1) if I > 1 else Z
    return np.stack([Zp[:, i:i + D, :] for i in range(I)], axis=2)


def conv_forward(Z: np.ndarray, filt: np.ndarray) -> np.ndarray:
    """Y[k, j] = sum_{i, l} filt[j, i, l] * Z[k+i-1, l] with one-sided zero extension.

    Accepts a single D x C_in matrix or a batch of shape (B, D, C_in).
    """
    Z = np.asarray(Z, dtype=float)
    filt = np.asarray(filt, dtype=float)
    single = Z.ndim == 2
    Zb = Z[None] if single else Z
    if filt.ndim != 3 or filt.shape[2] != Zb.shape[2]:
        raise ValueError(f"filter shape {filt.shape} incompatible with input channels {Zb.shape[2]}")
    Cout, I, Cin = filt.shape
    B, D, _ = Zb.shape
    W = _windows(Zb, I).reshape(B * D, I * Cin)
    Y = (W @ filt.transpose(1, 2, 0).reshape(I * Cin, Cout)).reshape(B, D, Cout)
    return Y[0] if single else Y


def pad_input(spec: CnnSpec, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.ambient_dim_D:
        raise ValueError(f"inputs must have D={spec.ambient_dim_D} coordinates")
    Z = np.zeros((X.shape[0], spec.ambient_dim_D, spec.max_channels_J))
    Z[:, :, 0] = X
    return Z


def clamp(y, A: float | None):
    """Two-layer ReLU truncation relu(2A - relu(A - y)) - A, i.e. clip to [-A, A]."""
    if A is None:
        return y
    return np.maximum(2 * A - np.maximum(A - y, 0.0), 0.0) - A


def forward_batch(params: CnnParams, X: np.ndarray, A: float | None = None,
                  keep: bool = False):
    """Raw (or clamped) outputs for every row of X; ``keep`` also returns layer inputs."""
    Z = pad_input(params.spec, X)
    acts = []
    for filt, bias in params.layers():
        acts.append(Z)
        Z = np.maximum(conv_forward(Z, filt) + bias, 0.0)
    out = np.einsum("bdj,dj->b", Z, params.dense_W) + params.dense_b
    if keep:
        acts.append(Z)
        return out, acts
    return clamp(out, A)


def cnn_forward(spec: CnnSpec, params: CnnParams, x: np.ndarray, A: float | None = None) -> float:
    if params.spec != spec:
        raise ValueError("parameters were built for a different spec")
    return float(forward_batch(params, np.asarray(x)[None, :], A)[0])


def backward_batch(params: CnnParams, X: np.ndarray, upstream: np.ndarray,
                   acts: list[np.ndarray] | None = None) -> np.ndarray:
    """Flat gradient of sum_b upstream[b] * f_raw(X[b]) with respect to all parameters."""
    spec = params.spec
    upstream = np.asarray(upstream, dtype=float)
    if acts is None:
        _, acts = forward_batch(params, X, keep=True)
    grad = np.zeros(spec.n_params)
    gview = CnnParams(spec, grad)
    G = acts[-1]
    gview.dense_W[...] = np.einsum("b,bdj->dj", upstream, G)
    grad[-1] = upstream.sum()
    dZ = upstream[:, None, None] * params.dense_W[None]
    I, J, D = spec.filter_size_I, spec.max_channels_J, spec.ambient_dim_D
    layer_ids = [(m, l) for m in range(spec.blocks_M) for l in range(spec.layers_per_block_L)]
    for idx in range(len(layer_ids) - 1, -1, -1):
        m, l = layer_ids[idx]
        out = acts[idx + 1]
        dpre = dZ * (out > 0)
        Zin = acts[idx]
        B = Zin.shape[0]
        gview.bias(m, l)[...] = dpre.sum(axis=0)
        win = _windows(Zin, I).reshape(B * D, I * J)
        dflat = dpre.reshape(B * D, J)
        gview.filter(m, l)[...] = (win.T @ dflat).reshape(I, J, J).transpose(2, 0, 1)
        if idx == 0:
            break
        filt = params.filter(m, l)
        dwin = (dflat @ filt.transpose(1, 2, 0).reshape(I * J, J).T).reshape(B, D, I, J)
        dZp = np.zeros((B, D + I - 1, J))
        for i in range(I):
            dZp[:, i:i + D, :] += dwin[:, :, i, :]
        dZ = dZp[:, :D, :]
    return grad


def backward_gradients(spec: CnnSpec, params: CnnParams, x: np.ndarray, upstream: float = 1.0) -> CnnParams:
    """Reverse-mode gradient of ``upstream * cnn_forward(x)`` (no truncation stage)."""
    if params.spec != spec:
        raise ValueError("parameters were built for a different spec")
    g = backward_batch(params, np.asarray(x)[None, :], np.array([upstream], dtype=float))
    return CnnParams(spec, g)


# --- restriction machinery -------------------------------------------------------

@dataclass(frozen=True)
class RestrictionReport:
    sup_norm: float
    lip_estimate: float
    passed: bool


def check_restriction(spec: CnnSpec, params: CnnParams, restriction: RestrictedClassSpec,
                      values: np.ndarray | None = None) -> RestrictionReport:
    """Sup norm and approximate-Lipschitz constant of the clamped network on the check net."""
    net = restriction.check_net
    if net is None:
        raise ValueError("restriction has no check_net")
    if values is None:
        values = forward_batch(params, net.points, restriction.bound_A)
    sup = float(np.abs(values).max())
    lip = lipschitz_ratio_max(values, net.distance_matrix(), restriction.alpha, restriction.proximity_eps)
    tol_A = 1e-6 * max(1.0, restriction.bound_A)
    tol_L = 1e-6 * max(1.0, restriction.lip_L)
    return RestrictionReport(sup, lip, sup <= restriction.bound_A + tol_A and lip <= restriction.lip_L + tol_L)


def pair_violations(fx: np.ndarray, fy: np.ndarray, dist: np.ndarray, restriction: RestrictedClassSpec) -> np.ndarray:
    return np.maximum(np.abs(fx - fy) - 2 * restriction.proximity_eps - restriction.lip_L * dist ** restriction.alpha, 0.0)


def lipschitz_penalty(params: CnnParams, pairs: np.ndarray, restriction: RestrictedClassSpec,
                      values: np.ndarray | None = None) -> float:
    """Mean squared excess of |f(x)-f(y)| over L d^alpha + 2 eps across net-point pairs."""
    net = restriction.check_net
    pairs = np.atleast_2d(np.asarray(pairs, dtype=int))
    if values is None:
        pts = np.concatenate([net.points[pairs[:, 0]], net.points[pairs[:, 1]]])
        v = forward_batch(params, pts, restriction.bound_A)
        fx, fy = v[:len(pairs)], v[len(pairs):]
    else:
        fx, fy = values[pairs[:, 0]], values[pairs[:, 1]]
    d = net.distance_matrix()[pairs[:, 0], pairs[:, 1]]
    return float(np.mean(pair_violations(fx, fy, d, restriction) ** 2))


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0
    mu_lip: float = 0.0
    lip_pairs: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay: float = 1.0


@dataclass
class TrainResult:
    params: CnnParams
    epoch_loss: list[float]
    best_so_far: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.best_so_far[-1] if self.best_so_far else float("nan")


def _loss_and_upstream(pred_raw: np.ndarray, y: np.ndarray, A: float | None):
    pred = clamp(pred_raw, A)
    r = pred - y
    up = 2.0 * r / r.size
    if A is not None:
        up = up * (np.abs(pred_raw) < A)
    return float(np.mean(r * r)), up


def dataset_loss(params: CnnParams, X: np.ndarray, y: np.ndarray, A: float | None = None,
                 chunk: int = 1024) -> float:
    tot = 0.0
    for i in range(0, len(y), chunk):
        r = forward_batch(params, X[i:i + chunk], A) - y[i:i + chunk]
        tot += float(r @ r)
    return tot / len(y)


def train_erm(spec: CnnSpec, X: np.ndarray, y: np.ndarray, restriction: RestrictedClassSpec | None = None,
              hyper: TrainConfig | None = None, init: CnnParams | None = None) -> TrainResult:
    """Mean-squared-error ERM by mini-batch Adam with projection onto the caps.

    After every step filters/biases are clipped to [-R1, R1] and the dense
    layer to [-R2, R2]. The output passes through the truncation stage at
    ``restriction.bound_A``. The returned parameters are the best epoch
    checkpoint by full training loss.
    """
    hyper = hyper or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(hyper.seed)
    A = None if restriction is None else restriction.bound_A
    params = init.copy() if init is not None else init_params(spec, rng)
    caps = params.cap_vector()
    np.clip(params.flat, -caps, caps, out=params.flat)
    use_pen = (restriction is not None and restriction.check_net is not None and hyper.mu_lip > 0)
    if use_pen:
        net = restriction.check_net
        dist = net.distance_matrix()
    m1 = np.zeros_like(params.flat)
    m2 = np.zeros_like(params.flat)
    t = 0
    best = dataset_loss(params, X, y, A)
    best_params = params.copy()
    epoch_loss, best_so_far = [], []
    n = len(y)
    bs = min(hyper.batch_size, n)
    lr = hyper.lr
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            Xb = X[idx]
            if use_pen:
                pi = rng.integers(0, net.n_points, size=(hyper.lip_pairs, 2))
                Xb = np.concatenate([Xb, net.points[pi[:, 0]], net.points[pi[:, 1]]])
            raw, acts = forward_batch(params, Xb, keep=True)
            nb = len(idx)
            _, up = _loss_and_upstream(raw[:nb], y[idx], A)
            if use_pen:
                P = hyper.lip_pairs
                fx_raw, fy_raw = raw[nb:nb + P], raw[nb + P:]
                fx, fy = clamp(fx_raw, A), clamp(fy_raw, A)
                v = pair_violations(fx, fy, dist[pi[:, 0], pi[:, 1]], restriction)
                g = hyper.mu_lip * 2.0 * v * np.sign(fx - fy) / P
                if A is not None:
                    gx, gy = g * (np.abs(fx_raw) < A), -g * (np.abs(fy_raw) < A)
                else:
                    gx, gy = g, -g
                up = np.concatenate([up, gx, gy])
            grad = backward_batch(params, Xb, up, acts)
            if not np.all(np.isfinite(grad)):
                raise NanLossError(f"non-finite gradient at epoch {epoch}")
            t += 1
            m1 = hyper.beta1 * m1 + (1 - hyper.beta1) * grad
            m2 = hyper.beta2 * m2 + (1 - hyper.beta2) * grad * grad
            mhat = m1 / (1 - hyper.beta1 ** t)
            vhat = m2 / (1 - hyper.beta2 ** t)
            params.flat -= lr * mhat / (np.sqrt(vhat) + 1e-8)
            np.clip(params.flat, -caps, caps, out=params.flat)
        lr *= hyper.lr_decay
        loss = dataset_loss(params, X, y, A)
        if not math.isfinite(loss):
            raise NanLossError(f"training loss became {loss} at epoch {epoch}")
        epoch_loss.append(loss)
        if loss < best:
            best = loss
            best_params = params.copy()
        best_so_far.append(best)
    return TrainResult(best_params, epoch_loss, best_so_far)


# --- sizing ------------------------------------------------------------------------

@dataclass(frozen=True)
class SizingConstants:
    kappa_M: float = 1.0
    kappa_L: float = 0.25
    L_max: int = 6
    kappa_J: float = 0.5
    J_min: int = 8
    kappa_R: float = 10.0
    R1: float = 1.0


def architecture_from_budget(N: int, D: int, d: int, alpha: float = 1.0,
                             k: SizingConstants | None = None) -> CnnSpec:
    """Network sizes from the sample budget: M ~ N^{d/(d+2 alpha)}, L ~ log N + D + log D, J ~ D."""
    if N < 2:
        raise ValueError("need N >= 2")
    k = k or SizingConstants()
    M = max(1, math.ceil(k.kappa_M * N ** (d / (d + 2 * alpha))))
    L = min(k.L_max, max(1, math.ceil(k.kappa_L * (math.log(N) + D + math.log(D)))))
    J = max(k.J_min, math.ceil(k.kappa_J * D))
    if D < 2:
        raise ValueError("the filter size range [2, D] needs D >= 2")
    I = min(3, D)
    return CnnSpec(M, L, J, I, k.R1, k.kappa_R * N, D)


# --- serialization -------------------------------------------------------------------

_INT_FIELDS = ("blocks_M", "layers_per_block_L", "max_channels_J", "filter_size_I", "ambient_dim_D")
_FLOAT_FIELDS = ("weight_cap_R1", "output_cap_R2")


def save_params(params: CnnParams, path, extra: dict | None = None) -> None:
    """Binary: 5 little-endian int32 spec fields, 2 float64 caps, then float64 parameters.

    A ``<path>.manifest`` text file mirrors the header.
    """
    spec = params.spec
    with open(path, "wb") as fh:
        fh.write(struct.pack("<5i", *(getattr(spec, f) for f in _INT_FIELDS)))
        fh.write(struct.pack("<2d", *(getattr(spec, f) for f in _FLOAT_FIELDS)))
        fh.write(params.flat.astype("<f8").tobytes())
    manifest = {**asdict(spec), "n_params": spec.n_params, **(extra or {})}
    with open(f"{path}.manifest", "w") as fh:
        for key, val in manifest.items():
            fh.write(f"{key} = {json.dumps(val)}\n")


def load_params(path) -> CnnParams:
    with open(path, "rb") as fh:
        ints = struct.unpack("<5i", fh.read(20))
        floats = struct.unpack("<2d", fh.read(16))
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    spec = CnnSpec(**dict(zip(_INT_FIELDS, ints)), **dict(zip(_FLOAT_FIELDS, floats)))
    params = CnnParams(spec, flat)
    params.validate()
    return params
