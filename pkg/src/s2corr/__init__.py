"""Selective state-space refinement of text-image correlation maps."""

from .correlation import (
    CorrelationMap, CorrelationVolume, FeatureGrid, LiftParams, TextEmbeddings, initial_correlation, lift,
)
from .refine import DomainTexts, PipelineConfig, PipelineParams, forward, forward_backward
from .scan import (
    ChunkPlan, ScanParams, ScanState, TapeGradients, build_chunk_plan, influence, scan_backward,
    scan_chunked, scan_sequential,
)

__version__ = "0.1.0"
