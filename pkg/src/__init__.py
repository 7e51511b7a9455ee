"""
SplatFuse
Feed-forward Gaussian splatting reconstruction from posed multi-view images
"""

__version__ = "0.1.0"

from src.config import PipelineConfig, load_config
from src.gaussian_map import GaussianPrimitives
from src.pipeline import ReconstructionEngine
from src.renderer import render

__all__ = ['PipelineConfig', 'load_config', 'GaussianPrimitives', 'ReconstructionEngine', 'render']
