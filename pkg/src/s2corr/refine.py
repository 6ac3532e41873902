"""Correlation refinement pipeline: modulation, chunked spatial scans, class scan, decoder.

Data layout throughout: volumes are ``(HW, N_C, d_f)`` arrays. The spatial scan treats
the HW axis as time and classes as independent batch rows sharing one ScanParams; the
class scan treats N_C as time and positions as the batch.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics
from .correlation import (
    DEFAULT_D_F, CorrelationMap, CorrelationVolume, FeatureGrid, LiftParams, TextEmbeddings,
    initial_correlation, lift, lift_backward,
)
from .numerics import DimensionError, check_finite, matmul
from .scan import (
    DEFAULT_GAMMA, DEFAULT_HEADS, DEFAULT_NUM_CHUNKS, ChunkPlan, ScanParams, TapeGradients,
    build_chunk_plan, chunk_len_for_total, scan_chunked_backward, scan_chunked_forward,
    scan_forward, _backward,
)

IGNORE_INDEX = 255
DEFAULT_BLOCKS = 2


@dataclass
class DomainTexts:
    values: np.ndarray  # (D, d)

    def __post_init__(self):
        self.values = numerics.as_tensor(self.values)
        if self.values.ndim != 2:
            raise DimensionError(f"domain texts must be 2-D, got {self.values.shape}")

    @property
    def count(self) -> int:
        return self.values.shape[0]


@dataclass
class ModulationParams:
    img_proj: np.ndarray  # (2*d_f, d): visual feature -> (gamma, beta)
    txt_proj: np.ndarray  # (2*d_f, d): domain text feature -> (gamma, beta)

    @classmethod
    def init(cls, d_f: int, d: int, rng: np.random.Generator, scale: float = 0.1, dtype=np.float64):
        bound = scale / np.sqrt(d)
        return cls(
            rng.uniform(-bound, bound, size=(2 * d_f, d)).astype(dtype),
            rng.uniform(-bound, bound, size=(2 * d_f, d)).astype(dtype),
        )

    @classmethod
    def zeros(cls, d_f: int, d: int, dtype=np.float64):
        return cls(np.zeros((2 * d_f, d), dtype), np.zeros((2 * d_f, d), dtype))


@dataclass
class PipelineConfig:
    d_f: int = DEFAULT_D_F
    heads: int = DEFAULT_HEADS
    chunk_len: int | None = None
    num_chunks: int | None = DEFAULT_NUM_CHUNKS
    chunks_per_row: int | None = None
    eta_cross: float = 1.0
    snake: bool = True
    gamma: float = DEFAULT_GAMMA
    blocks: int = DEFAULT_BLOCKS
    class_decay_prior: bool = False
    seed: int = 0

    def resolve_chunk_len(self, height: int, width: int) -> int:
        if self.chunk_len is not None:
            return self.chunk_len
        if self.chunks_per_row is not None:
            return max(1, width // self.chunks_per_row)
        return chunk_len_for_total(height, width, self.num_chunks or DEFAULT_NUM_CHUNKS)

    def plan(self, height: int, width: int) -> ChunkPlan:
        return build_chunk_plan(height, width, self.resolve_chunk_len(height, width),
                                self.eta_cross, self.snake)


@dataclass
class PipelineParams:
    lift: LiftParams
    mod: ModulationParams
    spatial_scan: ScanParams
    class_scan: ScanParams
    decoder_w: np.ndarray  # (d_f,)
    decoder_b: np.ndarray  # (1,)
    blocks: int = DEFAULT_BLOCKS
    class_decay_prior: bool = False

    def __post_init__(self):
        d_f = self.lift.P.shape[0]
        if not (self.spatial_scan.d_f == self.class_scan.d_f == d_f == self.decoder_w.shape[0]):
            raise DimensionError("d_f disagrees across lift, scans and decoder")
        if self.mod.img_proj.shape[0] != 2 * d_f or self.mod.txt_proj.shape[0] != 2 * d_f:
            raise DimensionError("modulation projections must have 2*d_f rows")
        if self.blocks < 1:
            raise ValueError("blocks must be positive")

    @property
    def d_f(self) -> int:
        return self.lift.P.shape[0]

    @classmethod
    def init(cls, cfg: PipelineConfig, d: int, num_classes: int, rng: np.random.Generator,
             dtype=np.float64) -> PipelineParams:
        return cls(
            lift=LiftParams.init(cfg.d_f, num_classes, rng, dtype),
            mod=ModulationParams.init(cfg.d_f, d, rng, dtype=dtype),
            spatial_scan=ScanParams.init(cfg.d_f, rng, cfg.heads, cfg.gamma, dtype),
            class_scan=ScanParams.init(cfg.d_f, rng, cfg.heads, cfg.gamma, dtype),
            decoder_w=rng.uniform(-1, 1, size=cfg.d_f).astype(dtype) / np.sqrt(cfg.d_f),
            decoder_b=np.zeros(1, dtype),
            blocks=cfg.blocks,
            class_decay_prior=cfg.class_decay_prior,
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of every learnable array, keyed ``group/name``; arrays are shared, not copied."""
        out = {"lift/P": self.lift.P, "mod/img_proj": self.mod.img_proj,
               "mod/txt_proj": self.mod.txt_proj}
        for group in ("spatial_scan", "class_scan"):
            for k, v in getattr(self, group).arrays().items():
                out[f"{group}/{k}"] = v
        out["decoder/w"] = self.decoder_w
        out["decoder/b"] = self.decoder_b
        return out

    def copy(self) -> PipelineParams:
        return PipelineParams(
            LiftParams(self.lift.P.copy()),
            ModulationParams(self.mod.img_proj.copy(), self.mod.txt_proj.copy()),
            self.spatial_scan.copy(), self.class_scan.copy(),
            self.decoder_w.copy(), self.decoder_b.copy(), self.blocks, self.class_decay_prior,
        )


@dataclass
class PipelineGradients:
    lift_P: np.ndarray
    img_proj: np.ndarray
    txt_proj: np.ndarray
    spatial_scan: TapeGradients
    class_scan: TapeGradients
    decoder_w: np.ndarray
    decoder_b: np.ndarray
    eta_cross: float = 0.0

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"lift/P": self.lift_P, "mod/img_proj": self.img_proj, "mod/txt_proj": self.txt_proj}
        for group in ("spatial_scan", "class_scan"):
            for k, v in getattr(self, group).params().items():
                out[f"{group}/{k}"] = v
        out["decoder/w"] = self.decoder_w
        out["decoder/b"] = self.decoder_b
        return out


# -- stages ------------------------------------------------------------------------------

def _image_mod(fv: FeatureGrid, mp: ModulationParams) -> tuple[np.ndarray, np.ndarray]:
    gb = matmul(fv.values, np.ascontiguousarray(mp.img_proj.T))
    d_f = gb.shape[1] // 2
    return gb[:, :d_f], gb[:, d_f:]


def _text_mod(dt: DomainTexts, mp: ModulationParams) -> tuple[np.ndarray, np.ndarray]:
    gb = matmul(dt.values, np.ascontiguousarray(mp.txt_proj.T)).mean(axis=0)
    d_f = gb.shape[0] // 2
    return gb[:d_f], gb[d_f:]


def modulate_image(e: CorrelationVolume, fv: FeatureGrid, mp: ModulationParams) -> CorrelationVolume:
    """Per-position affine modulation, shared by all classes at that position."""
    if fv.values.shape[0] != e.values.shape[0]:
        raise DimensionError(f"feature grid has {fv.values.shape[0]} tokens, volume {e.values.shape[0]}")
    if mp.img_proj.shape != (2 * e.d_f, fv.dim):
        raise DimensionError(f"img_proj {mp.img_proj.shape} != {(2 * e.d_f, fv.dim)}")
    gamma, beta = _image_mod(fv, mp)
    return CorrelationVolume(e.height, e.width, e.values * (1.0 + gamma[:, None, :]) + beta[:, None, :])


def modulate_text(ctilde: CorrelationVolume, dt: DomainTexts, mp: ModulationParams) -> CorrelationVolume:
    """Affine modulation from the mean of the per-domain (gamma, beta) pairs."""
    if mp.txt_proj.shape != (2 * ctilde.d_f, dt.values.shape[1]):
        raise DimensionError(f"txt_proj {mp.txt_proj.shape} != {(2 * ctilde.d_f, dt.values.shape[1])}")
    gamma, beta = _text_mod(dt, mp)
    return CorrelationVolume(ctilde.height, ctilde.width, ctilde.values * (1.0 + gamma) + beta)


def _scan_classes(values: np.ndarray, plan: ChunkPlan, p: ScanParams, threads: int) -> np.ndarray:
    """scan_chunked over every class slice; class groups may run on separate threads."""
    n = values.shape[1]
    if threads <= 1 or n == 1:
        return scan_chunked_forward(values, plan, p).ys
    groups = np.array_split(np.arange(n), min(threads, n))
    out = np.empty_like(values)
    with ThreadPoolExecutor(max_workers=len(groups)) as pool:
        results = pool.map(lambda g: scan_chunked_forward(values[:, g], plan, p).ys, groups)
        for g, ys in zip(groups, results):
            out[:, g] = ys
    return out


def spatial_aggregate(e: CorrelationVolume, fv: FeatureGrid, params: PipelineParams, plan: ChunkPlan,
                      threads: int = 1) -> CorrelationVolume:
    if (plan.height, plan.width) != (e.height, e.width):
        raise DimensionError(f"plan grid {plan.height}x{plan.width} != volume grid {e.height}x{e.width}")
    cur = e
    for _ in range(params.blocks):
        cur = modulate_image(cur, fv, params.mod)
        cur = CorrelationVolume(e.height, e.width, _scan_classes(cur.values, plan, params.spatial_scan, threads))
    return cur


def class_aggregate(ctilde: CorrelationVolume, dt: DomainTexts, params: PipelineParams) -> CorrelationVolume:
    """Text modulation, then one scan over classes (canonical order) at every position."""
    chat = modulate_text(ctilde, dt, params.mod)
    xs = chat.values.transpose(1, 0, 2)
    tape = scan_forward(xs, np.zeros(xs.shape[1:], xs.dtype), params.class_scan, params.class_decay_prior)
    return CorrelationVolume(ctilde.height, ctilde.width, np.ascontiguousarray(tape.ys.transpose(1, 0, 2)))


def decode(ecls: CorrelationVolume, decoder_w: np.ndarray, decoder_b) -> np.ndarray:
    """Per-(position, class) linear read-out to a logit."""
    w = np.asarray(decoder_w).reshape(-1, 1)
    return matmul(ecls.values, w)[..., 0] + np.asarray(decoder_b).reshape(())


# -- end-to-end -----------------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: np.ndarray
    initial: CorrelationMap
    spatial: CorrelationVolume
    refined: CorrelationVolume

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def forward(fv: FeatureGrid, ft: TextEmbeddings, dt: DomainTexts, params: PipelineParams, plan: ChunkPlan,
            threads: int = 1) -> ForwardResult:
    c = initial_correlation(fv, ft)
    e = lift(c, params.lift)
    spa = spatial_aggregate(e, fv, params, plan, threads)
    cls = class_aggregate(spa, dt, params)
    logits = check_finite(decode(cls, params.decoder_w, params.decoder_b), "decode")
    return ForwardResult(logits, c, spa, cls)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX
                  ) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over non-ignored pixels and its gradient w.r.t. logits."""
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    valid = labels != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every pixel is ignored")
    num_classes = logits.shape[1]
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= num_classes):
        raise ValueError("labels out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(valid)[0]
    loss = float(np.sum(logsumexp[rows] - z[rows, labels[rows]]) / n)
    grad = np.exp(z - logsumexp[:, None])
    grad[rows, labels[rows]] -= 1.0
    grad[~valid] = 0.0
    return loss, grad / n


def forward_backward(fv: FeatureGrid, ft: TextEmbeddings, dt: DomainTexts, params: PipelineParams,
                     plan: ChunkPlan, labels: np.ndarray) -> tuple[float, PipelineGradients]:
    """Cross-entropy loss of ``forward`` and exact gradients for every learnable array."""
    mp = params.mod
    c = initial_correlation(fv, ft)
    e0 = lift(c, params.lift).values
    gamma_i, beta_i = _image_mod(fv, mp)

    block_inputs, block_tapes = [], []
    cur = e0
    for _ in range(params.blocks):
        block_inputs.append(cur)
        mod = cur * (1.0 + gamma_i[:, None, :]) + beta_i[:, None, :]
        ct = scan_chunked_forward(mod, plan, params.spatial_scan)
        block_tapes.append(ct)
        cur = ct.ys
    ctilde = cur

    gamma_t, beta_t = _text_mod(dt, mp)
    chat = ctilde * (1.0 + gamma_t) + beta_t
    xs = chat.transpose(1, 0, 2)
    ctape = scan_forward(xs, np.zeros(xs.shape[1:], xs.dtype), params.class_scan, params.class_decay_prior)
    ecls = ctape.ys.transpose(1, 0, 2)
    logits = decode(CorrelationVolume(fv.height, fv.width, ecls), params.decoder_w, params.decoder_b)

    loss, dlogits = cross_entropy(logits, labels)

    d_dec_w = np.tensordot(dlogits, ecls, axes=([0, 1], [0, 1]))
    d_dec_b = np.array([dlogits.sum()], dtype=logits.dtype)
    d_ecls = dlogits[..., None] * params.decoder_w

    g_cls = _backward(ctape, params.class_scan, d_ecls.transpose(1, 0, 2), None)
    d_chat = g_cls.d_input.transpose(1, 0, 2)

    d_ctilde = d_chat * (1.0 + gamma_t)
    d_gb_t = np.concatenate([np.sum(d_chat * ctilde, axis=(0, 1)), np.sum(d_chat, axis=(0, 1))])
    d_txt = np.outer(d_gb_t, dt.values.mean(axis=0))

    g_spa = TapeGradients.zeros_like(params.spatial_scan)
    d_gamma_i = np.zeros_like(gamma_i)
    d_beta_i = np.zeros_like(beta_i)
    d_cur = d_ctilde
    for inp, ct in zip(reversed(block_inputs), reversed(block_tapes)):
        g = scan_chunked_backward(ct, params.spatial_scan, d_cur)
        g_spa.accumulate(g)
        d_mod = g.d_input
        d_gamma_i += np.sum(d_mod * inp, axis=1)
        d_beta_i += np.sum(d_mod, axis=1)
        d_cur = d_mod * (1.0 + gamma_i[:, None, :])
    d_img = np.tensordot(np.concatenate([d_gamma_i, d_beta_i], axis=1), fv.values, axes=(0, 0))

    _, d_P = lift_backward(c, params.lift, d_cur)
    grads = PipelineGradients(d_P, d_img, d_txt, g_spa, g_cls, d_dec_w, d_dec_b, g_spa.d_eta)
    return loss, grads


# -- persistence ------------------------------------------------------------------------------

def save_scan_params(directory, p: ScanParams, plan: ChunkPlan | None = None) -> None:
    meta = {"d_f": p.d_f, "K": p.heads}
    if plan is not None:
        meta.update(chunk_len=plan.chunk_len, eta_cross=plan.eta_cross, snake=plan.snake)
    numerics.save_bundle(directory, p.arrays(), meta)


def load_scan_params(directory) -> tuple[ScanParams, dict]:
    tensors, meta = numerics.load_bundle(directory)
    missing = [k for k in ScanParams.shapes(1, 1) if k not in tensors]
    if missing:
        raise numerics.FormatError(f"scan params bundle missing {missing}")
    return ScanParams(**{k: tensors[k] for k in ScanParams.shapes(1, 1)}), meta


def save_pipeline_params(directory, params: PipelineParams, cfg: PipelineConfig) -> None:
    directory = Path(directory)
    numerics.save_bundle(directory / "lift", {"P": params.lift.P})
    numerics.save_bundle(directory / "mod", {"img_proj": params.mod.img_proj, "txt_proj": params.mod.txt_proj})
    save_scan_params(directory / "spatial_scan", params.spatial_scan)
    save_scan_params(directory / "class_scan", params.class_scan)
    numerics.save_bundle(directory / "decoder", {"w": params.decoder_w, "b": params.decoder_b})
    config = asdict(cfg)
    config["K"] = config.pop("heads")
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_pipeline_params(directory) -> tuple[PipelineParams, PipelineConfig]:
    directory = Path(directory)
    cpath = directory / "config.json"
    if not cpath.is_file():
        raise numerics.FormatError(f"missing config.json in {directory}")
    config = json.loads(cpath.read_text())
    config["heads"] = config.pop("K")
    cfg = PipelineConfig(**config)
    lift_t, _ = numerics.load_bundle(directory / "lift")
    mod_t, _ = numerics.load_bundle(directory / "mod")
    spa, _ = load_scan_params(directory / "spatial_scan")
    cls, _ = load_scan_params(directory / "class_scan")
    dec, _ = numerics.load_bundle(directory / "decoder")
    params = PipelineParams(LiftParams(lift_t["P"]), ModulationParams(mod_t["img_proj"], mod_t["txt_proj"]),
                            spa, cls, dec["w"], dec["b"], cfg.blocks, cfg.class_decay_prior)
    return params, cfg
