"""Synthetic domain-shift workloads, the denoising trainer, and scaling benchmarks.

Corruption model: labels are Voronoi blobs over the token grid, clean features sit near
their class prototype, and the shifted features add isotropic Gaussian noise plus a few
rectangles pushed toward a wrong class prototype (long-range false activations).
"""

from __future__ import annotations

import logging
import math
import os
import platform
import statistics
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics
from .baseline_attn import AttnParams, class_attention
from .correlation import CorrelationVolume, FeatureGrid, TextEmbeddings, initial_correlation
from .numerics import derive_rng
from .refine import (
    DomainTexts, PipelineConfig, PipelineParams, class_aggregate, cross_entropy, forward,
    forward_backward,
)
from .scan import ScanParams, build_chunk_plan, scan_chunked

log = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    height: int = 16
    width: int = 16
    num_classes: int = 8
    d: int = 16
    d_f: int = 16
    blob_count: int = 2
    noise_sigma: float = 0.8
    spurious_patches: int = 4
    spurious_gain: float = 1.5
    patch_size: int = 5
    jitter: float = 0.05
    domains: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("height", "width", "num_classes", "d", "d_f", "blob_count", "domains"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0 or self.spurious_patches < 0 or self.jitter < 0:
            raise ValueError("noise parameters must be non-negative")


@dataclass
class SynthSample:
    fv: FeatureGrid  # corrupted (domain-shifted) features
    ft: TextEmbeddings
    dt: DomainTexts
    labels: np.ndarray  # (HW,) int
    clean_corr: np.ndarray  # (HW, N_C) correlation of the uncorrupted features


def prototypes(num_classes: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Unit class prototypes; orthonormal when num_classes <= d."""
    g = rng.standard_normal((d, max(num_classes, 1)))
    if num_classes <= d:
        q, _ = np.linalg.qr(g)
        return np.ascontiguousarray(q[:, :num_classes].T)
    return numerics.l2_normalize_rows(g.T)


def paint_blobs(height: int, width: int, num_classes: int, blob_count: int, rng) -> np.ndarray:
    centres = rng.uniform(0, 1, size=(num_classes * blob_count, 2)) * [height, width]
    owner = np.repeat(np.arange(num_classes), blob_count)
    yy, xx = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    dist = (yy[..., None] - centres[:, 0]) ** 2 + (xx[..., None] - centres[:, 1]) ** 2
    return owner[np.argmin(dist, axis=-1)].reshape(-1)


def generate(cfg: SynthConfig, rng: np.random.Generator, protos: np.ndarray | None = None,
             domain_texts: np.ndarray | None = None) -> SynthSample:
    H, W, n, d = cfg.height, cfg.width, cfg.num_classes, cfg.d
    if protos is None:
        protos = prototypes(n, d, rng)
    if domain_texts is None:
        domain_texts = numerics.l2_normalize_rows(rng.standard_normal((cfg.domains, d)))
    labels = paint_blobs(H, W, n, cfg.blob_count, rng)

    clean = protos[labels] + cfg.jitter * rng.standard_normal((H * W, d)) / math.sqrt(d)
    noisy = clean + cfg.noise_sigma * rng.standard_normal((H * W, d)) / math.sqrt(d)
    grid = noisy.reshape(H, W, d)
    lab2 = labels.reshape(H, W)
    for _ in range(cfg.spurious_patches):
        ph = int(rng.integers(2, max(2, min(cfg.patch_size, H)) + 1))
        pw = int(rng.integers(2, max(2, min(cfg.patch_size, W)) + 1))
        y0 = int(rng.integers(0, H - ph + 1)) if H >= ph else 0
        x0 = int(rng.integers(0, W - pw + 1)) if W >= pw else 0
        wrong = int(rng.integers(0, n))
        region = (slice(y0, y0 + ph), slice(x0, x0 + pw))
        mask = lab2[region] != wrong
        grid[region][mask] += cfg.spurious_gain * protos[wrong]

    ft = TextEmbeddings(protos, [f"class_{j}" for j in range(n)])
    clean_corr = initial_correlation(FeatureGrid(H, W, clean), ft).values
    return SynthSample(FeatureGrid(H, W, noisy), ft, DomainTexts(domain_texts), labels, clean_corr)


def pixel_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- optimizer -------------------------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place decoupled-weight-decay Adam update of every array in ``params``."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training ---------------------------------------------------------------------------------

@dataclass
class TrainingReport:
    steps: int
    losses: list[float]
    raw_accuracy: float
    refined_accuracy_initial: float
    refined_accuracy_final: float
    seconds_per_step: float
    max_param_change: float
    failed_at: int | None = None
    config: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failed_at is None

    def to_dict(self) -> dict:
        return asdict(self)


def _evaluate(params: PipelineParams, plan, samples: Sequence[SynthSample]) -> tuple[float, float]:
    raw, refined = [], []
    for s in samples:
        raw.append(pixel_accuracy(initial_correlation(s.fv, s.ft).values, s.labels))
        refined.append(pixel_accuracy(forward(s.fv, s.ft, s.dt, params, plan).logits, s.labels))
    return float(np.mean(raw)), float(np.mean(refined))


def train_denoise(cfg: SynthConfig, steps: int, lr: float = 2e-4, weight_decay: float = 1e-4,
                  pipeline: PipelineConfig | None = None, eval_samples: int = 32) -> TrainingReport:
    """Train the refinement pipeline on freshly generated corrupted samples.

    Prototypes and domain texts are fixed per run (the vocabulary), the label layouts and
    corruptions are redrawn every step. All randomness derives from ``cfg.seed``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    pipeline = pipeline or PipelineConfig(d_f=cfg.d_f, seed=cfg.seed)
    vocab_rng = derive_rng(cfg.seed, "vocab")
    protos = prototypes(cfg.num_classes, cfg.d, vocab_rng)
    dtexts = numerics.l2_normalize_rows(vocab_rng.standard_normal((cfg.domains, cfg.d)))
    params = PipelineParams.init(pipeline, cfg.d, cfg.num_classes, derive_rng(cfg.seed, "params"))
    plan = pipeline.plan(cfg.height, cfg.width)

    eval_rng = derive_rng(cfg.seed, "eval")
    held_out = [generate(cfg, eval_rng, protos, dtexts) for _ in range(eval_samples)]
    raw_acc, refined0 = _evaluate(params, plan, held_out)

    start = {k: v.copy() for k, v in params.named_arrays().items()}
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    data_rng = derive_rng(cfg.seed, "train")
    losses: list[float] = []
    failed_at = None
    t0 = time.perf_counter()
    for step in range(steps):
        s = generate(cfg, data_rng, protos, dtexts)
        loss, grads = forward_backward(s.fv, s.ft, s.dt, params, plan, s.labels)
        if not math.isfinite(loss):
            failed_at = step
            log.error("loss diverged at step %d", step)
            break
        losses.append(loss)
        opt.step(params.named_arrays(), grads.named_arrays())
    elapsed = time.perf_counter() - t0

    _, refined1 = _evaluate(params, plan, held_out)
    change = max(float(np.max(np.abs(v - start[k]))) for k, v in params.named_arrays().items())
    return TrainingReport(
        steps=len(losses), losses=losses, raw_accuracy=raw_acc, refined_accuracy_initial=refined0,
        refined_accuracy_final=refined1, seconds_per_step=elapsed / max(1, len(losses)),
        max_param_change=change, failed_at=failed_at,
        config={"synth": asdict(cfg), "pipeline": asdict(pipeline), "lr": lr, "weight_decay": weight_decay},
    )


# -- benchmarks -------------------------------------------------------------------------------

def machine_fingerprint() -> dict:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {"cpu": cpu, "cpu_count": os.cpu_count(), "python": platform.python_version(),
            "numpy": np.__version__}


@dataclass
class BenchReport:
    kind: str
    rows: list[dict] = field(default_factory=list)  # one per measurement
    slopes: dict[str, float] = field(default_factory=dict)
    inconclusive: list[str] = field(default_factory=list)
    machine: dict = field(default_factory=machine_fingerprint)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_lines(self) -> list[str]:
        if not self.rows:
            return []
        keys = list(self.rows[0])
        lines = [",".join(keys)]
        lines += [",".join(str(r[k]) for k in keys) for r in self.rows]
        return lines


def time_median(fn: Callable[[], object], reps: int = 5, warmup: int = 2,
                min_seconds: float = 2e-3, max_inner: int = 1 << 12) -> tuple[float, int, bool]:
    """Median wall time per call over ``reps`` samples after ``warmup`` discarded calls.

    When a single call is too short to time reliably, calls are batched (doubling up to
    ``max_inner``); the third return value is False if even the cap stays too short.
    """
    reps = max(5, reps)
    for _ in range(warmup):
        fn()
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        if time.perf_counter() - t0 >= min_seconds or inner >= max_inner:
            break
        inner *= 2
    conclusive = time.perf_counter() - t0 >= min_seconds or inner < max_inner
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return statistics.median(samples), inner, conclusive


def loglog_slope(sizes: Sequence[float], times: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)[0])


def vocab_methods(height: int = 16, width: int = 16, d_f: int = 32, seed: int = 0
                  ) -> dict[str, Callable[[int], Callable[[], object]]]:
    """Factories ``N_C -> zero-arg workload`` for class-scan and class-attention aggregation."""
    rng = derive_rng(seed, "bench-vocab")
    cfg = PipelineConfig(d_f=d_f, heads=4 if d_f % 4 == 0 else 1)
    d = 8

    def scan_factory(n: int):
        params = PipelineParams.init(cfg, d, n, rng)
        vol = CorrelationVolume(height, width, rng.standard_normal((height * width, n, d_f)))
        dt = DomainTexts(rng.standard_normal((2, d)))
        return lambda: class_aggregate(vol, dt, params)

    def attn_factory(n: int):
        ap = AttnParams.init(d_f, rng)
        vol = CorrelationVolume(height, width, rng.standard_normal((height * width, n, d_f)))
        return lambda: class_attention(vol, ap)

    return {"class_scan": scan_factory, "class_attention": attn_factory}


def bench_vocab_scaling(sizes: Sequence[int], reps: int = 5,
                        methods: dict[str, Callable[[int], Callable[[], object]]] | None = None,
                        height: int = 16, width: int = 16, d_f: int = 32, seed: int = 0) -> BenchReport:
    """Median runtime per vocabulary size and the fitted log-log slope per method."""
    sizes = list(sizes)
    if len(sizes) < 3:
        raise ValueError("need >= 3 sizes")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    methods = methods or vocab_methods(height, width, d_f, seed)
    report = BenchReport("vocab_scaling", notes={"grid": [height, width], "d_f": d_f, "reps": reps})
    for name, factory in methods.items():
        times = []
        for n in sizes:
            med, inner, ok = time_median(factory(n), reps)
            if not ok and name not in report.inconclusive:
                report.inconclusive.append(name)
            times.append(med)
            report.rows.append({"method": name, "num_classes": n, "median_s": med, "inner_calls": inner})
        report.slopes[name] = loglog_slope(sizes, times)
    return report


def bench_chunk_speed(chunk_lens: Sequence[int], height: int = 16, width: int = 16, num_classes: int = 8,
                      d_f: int = 32, reps: int = 5, threads: int | None = None, seed: int = 0) -> BenchReport:
    """Chunked-scan throughput (tokens/s) per chunk length, single- vs multi-threaded over classes."""
    from .refine import _scan_classes

    threads = threads or os.cpu_count() or 1
    rng = derive_rng(seed, "bench-chunk")
    p = ScanParams.init(d_f, rng, heads=4 if d_f % 4 == 0 else 1)
    xs = rng.standard_normal((height * width, num_classes, d_f))
    tokens = height * width * num_classes
    report = BenchReport("chunk_speed", notes={"grid": [height, width], "num_classes": num_classes,
                                               "d_f": d_f, "threads": threads})
    for L in chunk_lens:
        if width % L:
            raise ValueError(f"chunk length {L} does not divide width {width}")
        plan = build_chunk_plan(height, width, L)
        single = _scan_classes(xs, plan, p, 1)
        multi = _scan_classes(xs, plan, p, threads)
        identical = bool(np.array_equal(single, multi))
        for mode, nthreads in (("single", 1), ("multi", threads)):
            med, inner, ok = time_median(lambda: _scan_classes(xs, plan, p, nthreads), reps)
            report.rows.append({"chunk_len": L, "mode": mode, "threads": nthreads, "median_s": med,
                                "tokens_per_s": tokens / med, "bit_identical": identical})
            if not ok:
                report.inconclusive.append(f"L={L}/{mode}")
    return report


def sequential_throughput(length: int, d_f: int = 32, reps: int = 5, seed: int = 0) -> float:
    """Tokens/s of a plain single-row sequential scan (reference for the chunked numbers)."""
    from .scan import scan_sequential

    rng = derive_rng(seed, "bench-seq")
    p = ScanParams.init(d_f, rng, heads=4 if d_f % 4 == 0 else 1)
    xs = rng.standard_normal((length, d_f))
    med, _, _ = time_median(lambda: scan_sequential(xs, np.zeros(d_f), p), reps)
    return length / med
