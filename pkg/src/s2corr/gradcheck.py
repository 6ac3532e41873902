"""Finite-difference checks of the analytic gradients (scan and full pipeline)."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .correlation import FeatureGrid, LiftParams, TextEmbeddings
from .numerics import derive_rng
from .refine import (
    DomainTexts, ModulationParams, PipelineConfig, PipelineParams, cross_entropy, forward,
    forward_backward,
)
from .scan import ScanParams, build_chunk_plan, scan_backward, scan_chunked_backward, scan_chunked_forward, scan_sequential

FD_STEP = 1e-6
SCAN_TOL = 1e-5
PIPELINE_TOL = 1e-4
F32_TOL = 1e-3
# FD round-off at step 1e-6 on an O(1) loss is ~1e-10; smaller gradients compare absolutely
REL_FLOOR = 1e-5


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class CheckResult:
    suite: str
    max_rel_error: float = 0.0
    worst: str = ""
    tolerance: float = 0.0
    entries: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def record(self, name: str, analytic: float, numeric: float, floor: float = REL_FLOOR) -> None:
        err = rel_error(analytic, numeric, floor)
        self.entries += 1
        if err > self.max_rel_error:
            self.max_rel_error = err
            self.worst = name
        if err > self.tolerance and name.split("[")[0] not in self.failures:
            self.failures.append(name.split("[")[0])


def _fd(loss_fn, arr: np.ndarray, idx, step: float) -> float:
    old = arr[idx]
    arr[idx] = old + step
    lp = loss_fn()
    arr[idx] = old - step
    lm = loss_fn()
    arr[idx] = old
    return (lp - lm) / (2 * step)


def random_scan_params(d_f: int, heads: int, rng: np.random.Generator) -> ScanParams:
    p = ScanParams.init(d_f, rng, heads=heads)
    return p.replace(
        b_a=rng.normal(size=d_f), b_b=rng.normal(size=d_f),
        gamma_prior_logits=rng.normal(size=heads), mix_w=rng.normal(size=heads),
    )


def check_scan(draws: int = 20, seed: int = 0, length: int = 6, d_f: int = 4, heads: int = 2,
               dtype=np.float64, fault: str | None = None) -> CheckResult:
    """scan_backward and the chunked backward (incl. eta) against central differences."""
    tol = SCAN_TOL if dtype == np.float64 else F32_TOL
    floor = REL_FLOOR if dtype == np.float64 else 1e-3
    res = CheckResult("scan", tolerance=tol)
    rng = derive_rng(seed, "gradcheck-scan")
    for draw in range(draws):
        p = random_scan_params(d_f, heads, rng)
        xs = rng.normal(size=(length, d_f))
        h0 = rng.normal(size=d_f)
        dy = rng.normal(size=xs.shape)
        dh = rng.normal(size=d_f)

        def loss():
            ys, hend = scan_sequential(xs, h0, p)
            return float(np.sum(ys * dy) + np.sum(hend.h * dh))

        pa = p.astype(dtype)
        g = scan_backward(xs.astype(dtype), h0.astype(dtype), pa, dy.astype(dtype), dh.astype(dtype))
        analytic = dict(g.params(), input=g.d_input, h0=g.d_h0)
        if fault == "sign":
            analytic["w_out"] = -analytic["w_out"]
        targets = dict(p.arrays(), input=xs, h0=h0)
        for name, arr in targets.items():
            for idx in np.ndindex(arr.shape):
                res.record(f"{name}[{idx}]", float(analytic[name][idx]), _fd(loss, arr, idx, FD_STEP), floor)

        # chunked scan on a 2x3 grid with snake order and a non-unit eta
        plan = build_chunk_plan(2, 3, 3, eta_cross=float(rng.uniform(0.3, 1.2)), snake=True)
        xg = rng.normal(size=(6, d_f))
        dyg = rng.normal(size=xg.shape)
        ct = scan_chunked_forward(xg.astype(dtype), plan, pa)
        gc = scan_chunked_backward(ct, pa, dyg.astype(dtype))

        def loss_eta():
            return float(np.sum(scan_chunked_forward(xg, plan, p).ys * dyg))

        box = np.array([plan.eta_cross])

        def loss_box():
            pl = copy.copy(plan)
            pl.eta_cross = float(box[0])
            return float(np.sum(scan_chunked_forward(xg, pl, p).ys * dyg))

        res.record("eta_cross", gc.d_eta, _fd(loss_box, box, (0,), FD_STEP), floor)
        for idx in np.ndindex(xg.shape):
            res.record(f"chunked_input[{idx}]", float(gc.d_input[idx]), _fd(loss_eta, xg, idx, FD_STEP), floor)
    return res


def tiny_problem(seed: int, height: int = 4, width: int = 4, d: int = 8, d_f: int = 6, num_classes: int = 3,
                 heads: int = 2, domains: int = 2, dtype=np.float64):
    """Random tiny pipeline instance: (fv, ft, dt, params, plan, labels)."""
    rng = derive_rng(seed, "tiny-problem")
    cfg = PipelineConfig(d_f=d_f, heads=heads, chunk_len=2, eta_cross=0.9, class_decay_prior=True, seed=seed)
    fv = FeatureGrid(height, width, rng.normal(size=(height * width, d)).astype(dtype))
    ft = TextEmbeddings(rng.normal(size=(num_classes, d)).astype(dtype))
    dt = DomainTexts(rng.normal(size=(domains, d)).astype(dtype))
    params = PipelineParams.init(cfg, d, num_classes, rng)
    params.mod = ModulationParams.init(d_f, d, rng, scale=1.0)
    for scan in (params.spatial_scan, params.class_scan):
        scan.b_a[:] = rng.normal(size=d_f)
        scan.mix_w[:] = rng.normal(size=heads)
    labels = rng.integers(0, num_classes, size=height * width)
    labels[0] = 255
    return fv, ft, dt, params, cfg.plan(height, width), labels


def cast_params(params: PipelineParams, dtype) -> PipelineParams:
    return PipelineParams(
        LiftParams(params.lift.P.astype(dtype)),
        ModulationParams(params.mod.img_proj.astype(dtype), params.mod.txt_proj.astype(dtype)),
        params.spatial_scan.astype(dtype), params.class_scan.astype(dtype),
        params.decoder_w.astype(dtype), params.decoder_b.astype(dtype), params.blocks, params.class_decay_prior,
    )


def check_pipeline(draws: int = 5, seed: int = 0, dtype=np.float64, fault: str | None = None) -> CheckResult:
    """forward_backward against central differences of the cross-entropy loss."""
    tol = PIPELINE_TOL if dtype == np.float64 else F32_TOL
    floor = REL_FLOOR if dtype == np.float64 else 1e-3
    res = CheckResult("pipeline", tolerance=tol)
    for draw in range(draws):
        fv, ft, dt, params, plan, labels = tiny_problem(seed * 1000 + draw)
        if dtype == np.float64:
            _, grads = forward_backward(fv, ft, dt, params, plan, labels)
        else:
            _, grads = forward_backward(
                FeatureGrid(fv.height, fv.width, fv.values.astype(dtype)),
                TextEmbeddings(ft.values.astype(dtype)), DomainTexts(dt.values.astype(dtype)),
                cast_params(params, dtype), plan, labels)
        analytic = grads.named_arrays()
        if fault == "sign":
            analytic = dict(analytic, **{"decoder/w": -analytic["decoder/w"]})

        def loss():
            return cross_entropy(forward(fv, ft, dt, params, plan).logits, labels)[0]

        for name, arr in params.named_arrays().items():
            for idx in np.ndindex(arr.shape):
                res.record(f"{name}[{idx}]", float(analytic[name][idx]), _fd(loss, arr, idx, FD_STEP), floor)
    return res
