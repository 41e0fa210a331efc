"""PET image reconstruction: ML-EM, TV and NLM baselines, deep image prior,
DeepRED and DeepRED with Langevin posterior sampling."""

__version__ = "0.1.0"
