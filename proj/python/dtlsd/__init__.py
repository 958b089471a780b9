"""Line segment detection: deformable-transformer core with contrastive
denoising, plus the synthetic-scene harness, metrics, and train/eval drivers.

The heavy lifting lives in the compiled extension ``_dtlsd``; this package
re-exports its surface.
"""

from _dtlsd import (
    __version__,
    canonicalize,
    checkpoint_meta,
    complexity_slopes,
    default_config,
    denoising_batch,
    evaluate,
    evaluate_checkpoint,
    focal_loss,
    hungarian,
    infer,
    line_l1,
    min_sq_endpoint_dist,
    structural_ap,
    synth_generate,
    toy_config,
    train,
    wireframe_parse,
    write_dataset,
)

__all__ = [
    "__version__",
    "canonicalize",
    "checkpoint_meta",
    "complexity_slopes",
    "default_config",
    "denoising_batch",
    "evaluate",
    "evaluate_checkpoint",
    "focal_loss",
    "hungarian",
    "infer",
    "line_l1",
    "min_sq_endpoint_dist",
    "structural_ap",
    "synth_generate",
    "toy_config",
    "train",
    "wireframe_parse",
    "write_dataset",
]
