"""Desk-scale 3D conditional diffusion for MRI image quality transfer."""

from ._iqt3d import (  # noqa: F401
    alpha_sigma,
    cubic_baseline,
    decimate,
    default_config_json,
    enhance,
    fit,
    generate_phantom,
    gradient_check_max_err,
    load_volume,
    mssim,
    normalize,
    param_count,
    posterior_params,
    psnr,
    save_volume,
    seam_score,
)

__all__ = [
    "alpha_sigma",
    "cubic_baseline",
    "decimate",
    "default_config_json",
    "enhance",
    "fit",
    "generate_phantom",
    "gradient_check_max_err",
    "load_volume",
    "mssim",
    "normalize",
    "param_count",
    "posterior_params",
    "psnr",
    "save_volume",
    "seam_score",
]
