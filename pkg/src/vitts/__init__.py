"""Visual-text-to-speech with diffusion decoders, on synthetic room scenes.

Modules:
    diffusion    noise schedule, forward/posterior math, ancestral sampling
    denoiser     adaLN-Zero diffusion transformer
    encoder      visual-text encoder with relative self-attention and cross-attention
    variance     duration/pitch predictors and length regulator
    pretraining  masked phoneme LM and span-masked denoiser pretraining
    control      zero-bridge fine-tuning of a frozen denoiser
    audio        mel features, Griffin-Lim, RT60/RTE, MCD
    scenes       synthetic rooms, images, utterances and manifests
    cli          ``vitts`` command line
"""

__version__ = "0.1.0"
