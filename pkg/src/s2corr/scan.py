"""Selective state-space scan with a learnable geometric decay prior.

Recurrence per token (all products elementwise over the d_f channels)::

    A_t   = sigmoid(W_a x_t + b_a)          B_t = sigmoid(W_b x_t + b_b)
    Aeff  = s * A_t + (1 - s) * gamma       s = sigmoid(mix_w), one value per head
    h_t   = Aeff_t * h_{t-1} + B_t * x_t
    y_t   = W_out h_t + U_out x_t

Sequences are arrays of shape ``(T, *batch, d_f)``; the batch axes (classes, positions)
are independent scans that share parameters. Forward passes return a ``ScanTape`` so the
matching backward pass can be exact without recomputation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .numerics import DimensionError, as_tensor, check_finite, logit, matmul, sigmoid

log = logging.getLogger(__name__)

PARAM_NAMES = ("w_a", "b_a", "w_b", "b_b", "w_out", "u_out", "gamma_prior_logits", "mix_w")
DEFAULT_HEADS = 4
DEFAULT_GAMMA = 0.8
DEFAULT_NUM_CHUNKS = 16


@dataclass
class ScanParams:
    w_a: np.ndarray
    b_a: np.ndarray
    w_b: np.ndarray
    b_b: np.ndarray
    w_out: np.ndarray
    u_out: np.ndarray
    gamma_prior_logits: np.ndarray  # (K,); the prior itself is sigmoid of these
    mix_w: np.ndarray  # (K,)

    def __post_init__(self):
        d_f = self.w_a.shape[0]
        for name, shape in self.shapes(d_f, self.heads).items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if d_f % self.heads:
            raise DimensionError(f"heads {self.heads} do not divide d_f {d_f}")

    @staticmethod
    def shapes(d_f: int, heads: int) -> dict[str, tuple[int, ...]]:
        sq = (d_f, d_f)
        return {
            "w_a": sq, "b_a": (d_f,), "w_b": sq, "b_b": (d_f,), "w_out": sq, "u_out": sq,
            "gamma_prior_logits": (heads,), "mix_w": (heads,),
        }

    @property
    def d_f(self) -> int:
        return self.w_a.shape[0]

    @property
    def heads(self) -> int:
        return self.mix_w.shape[0]

    @property
    def gamma_prior(self) -> np.ndarray:
        return sigmoid(self.gamma_prior_logits)

    @property
    def dtype(self):
        return self.w_a.dtype

    def head_of_channel(self) -> np.ndarray:
        return np.arange(self.d_f) * self.heads // self.d_f

    @classmethod
    def init(cls, d_f: int, rng: np.random.Generator, heads: int = DEFAULT_HEADS,
             gamma: float = DEFAULT_GAMMA, dtype=np.float64) -> ScanParams:
        bound = 1.0 / np.sqrt(d_f)

        def mat():
            return rng.uniform(-bound, bound, size=(d_f, d_f)).astype(dtype)

        return cls(
            w_a=mat(), b_a=np.ones(d_f, dtype), w_b=mat(), b_b=np.zeros(d_f, dtype),
            w_out=mat(), u_out=mat(),
            gamma_prior_logits=np.full(heads, logit(gamma), dtype),
            mix_w=np.zeros(heads, dtype),
        )

    @classmethod
    def passthrough(cls, d_f: int, heads: int = 1, dtype=np.float64) -> ScanParams:
        """Parameters for which y_t ~= x_t (A ~ 0, B ~ 1, W_out = I, U_out = 0)."""
        z = np.zeros((d_f, d_f), dtype)
        return cls(
            w_a=z.copy(), b_a=np.full(d_f, -40.0, dtype), w_b=z.copy(), b_b=np.full(d_f, 40.0, dtype),
            w_out=np.eye(d_f, dtype=dtype), u_out=z.copy(),
            gamma_prior_logits=np.full(heads, logit(DEFAULT_GAMMA), dtype),
            mix_w=np.full(heads, 40.0, dtype),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **changes) -> ScanParams:
        values = self.arrays()
        values.update(changes)
        return ScanParams(**values)

    def copy(self) -> ScanParams:
        return ScanParams(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> ScanParams:
        return ScanParams(**{k: v.astype(dtype) for k, v in self.arrays().items()})


@dataclass
class ScanState:
    h: np.ndarray

    @classmethod
    def zeros(cls, d_f: int, dtype=np.float64) -> ScanState:
        return cls(np.zeros(d_f, dtype))


@dataclass
class TapeGradients:
    """Gradients of a scalar loss, one array per ScanParams field plus inputs."""

    w_a: np.ndarray
    b_a: np.ndarray
    w_b: np.ndarray
    b_b: np.ndarray
    w_out: np.ndarray
    u_out: np.ndarray
    gamma_prior_logits: np.ndarray
    mix_w: np.ndarray
    d_input: np.ndarray | None = None
    d_h0: np.ndarray | None = None
    d_eta: float = 0.0

    @classmethod
    def zeros_like(cls, p: ScanParams) -> TapeGradients:
        return cls(**{k: np.zeros_like(v) for k, v in p.arrays().items()})

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def accumulate(self, other: TapeGradients) -> None:
        for name in PARAM_NAMES:
            getattr(self, name).__iadd__(getattr(other, name))
        self.d_eta += other.d_eta


# -- gates -------------------------------------------------------------------------------

def gates(x: np.ndarray, p: ScanParams) -> tuple[np.ndarray, np.ndarray]:
    """Decay gate A and input gate B for one token or a stack of tokens."""
    a = sigmoid(matmul(x, p.w_a.T) + p.b_a)
    b = sigmoid(matmul(x, p.w_b.T) + p.b_b)
    return a, b


def _channel_mix(p: ScanParams) -> tuple[np.ndarray, np.ndarray]:
    head = p.head_of_channel()
    return sigmoid(p.mix_w)[head], p.gamma_prior[head]


def effective_decay(a: np.ndarray, p: ScanParams) -> np.ndarray:
    """Blend the data gate with the per-head geometric prior."""
    s, g = _channel_mix(p)
    return s * a + (1.0 - s) * g


# -- forward / backward core ----------------------------------------------------------------

@dataclass
class ScanTape:
    x: np.ndarray
    a: np.ndarray
    b: np.ndarray
    a_eff: np.ndarray
    h: np.ndarray  # state after each step
    h_prev: np.ndarray  # raw state entering each step, before carry scaling
    carry: np.ndarray  # (T,) scale applied to the incoming state
    cross: np.ndarray  # (T,) bool, steps where carry is the learnable eta
    use_prior: bool
    ys: np.ndarray = field(repr=False, default=None)

    @property
    def h_end(self) -> np.ndarray:
        return self.h[-1]


def _check_seq(xs: np.ndarray, p: ScanParams) -> np.ndarray:
    xs = np.asarray(xs)
    if xs.ndim < 1 or xs.shape[-1] != p.d_f:
        raise DimensionError(f"tokens of shape {xs.shape} do not have d_f={p.d_f} channels")
    return xs


def _run(xs: np.ndarray, h0: np.ndarray, p: ScanParams, use_prior: bool,
         cross: np.ndarray | None = None, eta: float = 1.0, segments=None) -> ScanTape:
    """Run the recurrence over ``xs`` (T, *batch, d_f).

    ``segments`` is an optional list of index ranges (chunks); gates are evaluated per
    segment, and the incoming state is scaled by ``eta`` wherever ``cross`` is set.
    """
    T = xs.shape[0]
    if segments is None:
        segments = [(0, T)]
    if cross is None:
        cross = np.zeros(T, dtype=bool)
    carry = np.where(cross, eta, 1.0)
    a = np.empty_like(xs)
    b = np.empty_like(xs)
    a_eff = np.empty_like(xs)
    hs = np.empty_like(xs)
    h_prev = np.empty_like(xs)
    h = np.broadcast_to(h0, xs.shape[1:]).astype(xs.dtype)
    for start, stop in segments:
        seg = xs[start:stop]
        a_seg, b_seg = gates(seg, p)
        a[start:stop] = a_seg
        b[start:stop] = b_seg
        a_eff[start:stop] = effective_decay(a_seg, p) if use_prior else a_seg
        bx = b_seg * seg
        for t in range(start, stop):
            h_prev[t] = h
            if cross[t]:
                h = carry[t] * h
            h = a_eff[t] * h + bx[t - start]
            hs[t] = h
    tape = ScanTape(xs, a, b, a_eff, hs, h_prev, carry, cross, use_prior)
    tape.ys = check_finite(matmul(hs, p.w_out.T) + matmul(xs, p.u_out.T), "scan")
    return tape


def _outer_sum(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sum over all leading axes of u[..., i] * v[..., j]."""
    d = u.shape[-1]
    return np.tensordot(u.reshape(-1, d), v.reshape(-1, v.shape[-1]), axes=(0, 0))


def _backward(tape: ScanTape, p: ScanParams, dy: np.ndarray | None, dh_end: np.ndarray | None) -> TapeGradients:
    xs = tape.x
    T = xs.shape[0]
    batch_shape = xs.shape[1:]
    if dy is None:
        dy = np.zeros_like(xs)
    dy = np.asarray(dy)
    if dy.shape != xs.shape:
        raise DimensionError(f"upstream gradient {dy.shape} does not match outputs {xs.shape}")
    dh = np.zeros(batch_shape, xs.dtype) if dh_end is None else np.broadcast_to(dh_end, batch_shape).astype(xs.dtype)

    dh_from_y = matmul(dy, p.w_out)
    d_aeff = np.empty_like(xs)
    d_bx = np.empty_like(xs)
    d_eta = 0.0
    for t in range(T - 1, -1, -1):
        g = dh + dh_from_y[t]
        scaled_prev = tape.carry[t] * tape.h_prev[t] if tape.cross[t] else tape.h_prev[t]
        d_aeff[t] = g * scaled_prev
        d_bx[t] = g
        dh = g * tape.a_eff[t]
        if tape.cross[t]:
            d_eta += float(np.sum(dh * tape.h_prev[t]))
            dh = dh * tape.carry[t]
    d_b = d_bx * xs
    dx = d_bx * tape.b + matmul(dy, p.u_out)

    grads = TapeGradients.zeros_like(p)
    if tape.use_prior:
        s, gprior = _channel_mix(p)
        d_a = d_aeff * s
        red = tuple(range(xs.ndim - 1))
        d_s = np.sum(d_aeff * (tape.a - gprior), axis=red) * s * (1.0 - s)
        d_g = np.sum(d_aeff * (1.0 - s), axis=red) * gprior * (1.0 - gprior)
        head = p.head_of_channel()
        np.add.at(grads.mix_w, head, d_s)
        np.add.at(grads.gamma_prior_logits, head, d_g)
    else:
        d_a = d_aeff
    dz_a = d_a * tape.a * (1.0 - tape.a)
    dz_b = d_b * tape.b * (1.0 - tape.b)
    dx += matmul(dz_a, p.w_a) + matmul(dz_b, p.w_b)

    grads.w_a = _outer_sum(dz_a, xs)
    grads.b_a = dz_a.reshape(-1, p.d_f).sum(axis=0)
    grads.w_b = _outer_sum(dz_b, xs)
    grads.b_b = dz_b.reshape(-1, p.d_f).sum(axis=0)
    grads.w_out = _outer_sum(dy, tape.h)
    grads.u_out = _outer_sum(dy, xs)
    grads.d_input = dx
    grads.d_h0 = dh
    grads.d_eta = d_eta
    return grads


# -- public sequential scan ----------------------------------------------------------------

def scan_forward(xs, h0, p: ScanParams, use_decay_prior: bool = True) -> ScanTape:
    xs = _check_seq(xs, p)
    h0 = np.asarray(h0.h if isinstance(h0, ScanState) else h0, dtype=xs.dtype)
    return _run(xs, h0, p, use_decay_prior)


def scan_sequential(xs, h0, p: ScanParams, use_decay_prior: bool = True) -> tuple[np.ndarray, ScanState]:
    """Left-to-right recurrence over ``xs``; returns every output and the final state."""
    xs = np.asarray(xs)
    state = h0 if isinstance(h0, ScanState) else ScanState(np.asarray(h0))
    if xs.shape[0] == 0:
        return xs.copy(), state
    tape = scan_forward(xs, state, p, use_decay_prior)
    return tape.ys, ScanState(tape.h_end)


def scan_backward(xs, h0, p: ScanParams, upstream_ys=None, upstream_h_end=None,
                  use_decay_prior: bool = True, tape: ScanTape | None = None) -> TapeGradients:
    """Exact reverse-mode gradients of ``sum(upstream_ys * ys) + upstream_h_end . h_end``."""
    if tape is None:
        tape = scan_forward(xs, h0, p, use_decay_prior)
    return _backward(tape, p, upstream_ys, upstream_h_end)


def influence(xs, p: ScanParams, t: int, d: int, h0=None, use_decay_prior: bool = True) -> np.ndarray:
    """Diagonal Jacobian dh_t / dh_{t-d}: the product of Aeff over steps t-d+1 .. t (1-indexed)."""
    xs = _check_seq(xs, p)
    T = xs.shape[0]
    if not (1 <= t <= T) or not (1 <= d <= t - 1):
        raise ValueError(f"need 1 <= d <= t-1 and t <= {T}, got t={t}, d={d}")
    a, _ = gates(xs[t - d : t], p)
    a_eff = effective_decay(a, p) if use_decay_prior else a
    out = a_eff[0].copy()
    for k in range(1, d):
        out *= a_eff[k]
    return out


# -- chunk plan --------------------------------------------------------------------------

@dataclass
class ChunkPlan:
    height: int
    width: int
    chunk_len: int
    eta_cross: float = 1.0
    snake: bool = True
    requested_len: int | None = None  # set when chunk_len was clamped

    @property
    def clamped(self) -> bool:
        return self.requested_len is not None and self.requested_len != self.chunk_len

    @property
    def num_tokens(self) -> int:
        return self.height * self.width

    def row_order(self, row: int) -> np.ndarray:
        idx = np.arange(row * self.width, (row + 1) * self.width)
        return idx[::-1] if self.snake and row % 2 == 1 else idx

    def chunks(self) -> list[np.ndarray]:
        """Token indices of every chunk, in traversal order."""
        out = []
        for r in range(self.height):
            idx = self.row_order(r)
            out.extend(idx[k : k + self.chunk_len] for k in range(0, self.width, self.chunk_len))
        return out

    def order(self) -> np.ndarray:
        return np.concatenate([self.row_order(r) for r in range(self.height)])

    def row_starts(self) -> np.ndarray:
        """Boolean mask over traversal steps that begin a new row (excluding the first)."""
        m = np.zeros(self.num_tokens, dtype=bool)
        m[self.width :: self.width] = True
        return m

    def segments(self) -> list[tuple[int, int]]:
        return [(s, s + self.chunk_len) for s in range(0, self.num_tokens, self.chunk_len)]


def largest_divisor_at_most(n: int, limit: int) -> int:
    for k in range(min(n, limit), 0, -1):
        if n % k == 0:
            return k
    return 1


def chunk_len_for_total(height: int, width: int, num_chunks: int) -> int:
    """Chunk length giving ``num_chunks`` chunks over the whole grid (e.g. 32x32, 16 -> 64)."""
    if num_chunks < 1:
        raise ValueError("num_chunks must be positive")
    return max(1, height * width // num_chunks)


def chunk_len_per_row(width: int, chunks_per_row: int) -> int:
    if chunks_per_row < 1:
        raise ValueError("chunks_per_row must be positive")
    return max(1, width // chunks_per_row)


def build_chunk_plan(height: int, width: int, chunk_len: int, eta_cross: float = 1.0,
                     snake: bool = True) -> ChunkPlan:
    """Row-wise chunking; a chunk length that does not divide the row is clamped down."""
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    if height < 1 or width < 1:
        raise DimensionError("grid extents must be positive")
    resolved = largest_divisor_at_most(width, chunk_len)
    plan = ChunkPlan(height, width, resolved, float(eta_cross), bool(snake),
                     requested_len=chunk_len if resolved != chunk_len else None)
    if plan.clamped:
        log.warning("chunk_len %d does not divide row width %d; clamped to %d", chunk_len, width, resolved)
    return plan


# -- chunked scan ------------------------------------------------------------------------

@dataclass
class ChunkedTape:
    plan: ChunkPlan
    tape: ScanTape
    order: np.ndarray
    ys: np.ndarray


def scan_chunked_forward(xs, plan: ChunkPlan, p: ScanParams, h0=None) -> ChunkedTape:
    xs = _check_seq(xs, p)
    if xs.shape[0] != plan.num_tokens:
        raise DimensionError(f"{xs.shape[0]} tokens for a {plan.height}x{plan.width} plan")
    order = plan.order()
    h0 = np.zeros(xs.shape[1:], xs.dtype) if h0 is None else np.asarray(h0, xs.dtype)
    tape = _run(xs[order], h0, p, True, plan.row_starts(), plan.eta_cross, plan.segments())
    ys = np.empty_like(tape.ys)
    ys[order] = tape.ys
    return ChunkedTape(plan, tape, order, ys)


def scan_chunked(xs, plan: ChunkPlan, p: ScanParams) -> np.ndarray:
    """Chunk-wise scan over an H*W slice; outputs come back in grid (row-major) order.

    Each chunk's end state seeds the next chunk in traversal order; the state entering a
    new row is additionally scaled by ``plan.eta_cross``. The first row starts from zero.
    """
    return scan_chunked_forward(xs, plan, p).ys


def scan_chunked_backward(ctape: ChunkedTape, p: ScanParams, dy: np.ndarray) -> TapeGradients:
    """Gradients through ``scan_chunked``; ``d_input`` is in grid order, ``d_eta`` is set."""
    dy = np.asarray(dy)
    grads = _backward(ctape.tape, p, dy[ctape.order], None)
    dx = np.empty_like(grads.d_input)
    dx[ctape.order] = grads.d_input
    grads.d_input = dx
    return grads
