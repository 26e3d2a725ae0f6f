"""Diffusion-based audio-visual saliency prediction."""

from ._core import (
    Config,
    ShapeError,
    auc_judd,
    cc,
    cosine_alpha_bar,
    evaluate,
    generate,
    kl_div,
    log_mel_slices,
    nss,
    q_sample,
    read_pgm,
    sample,
    sim,
    synth,
    train,
)

__all__ = [
    "Config",
    "ShapeError",
    "auc_judd",
    "cc",
    "cosine_alpha_bar",
    "evaluate",
    "generate",
    "kl_div",
    "log_mel_slices",
    "nss",
    "q_sample",
    "read_pgm",
    "sample",
    "sim",
    "synth",
    "train",
]
