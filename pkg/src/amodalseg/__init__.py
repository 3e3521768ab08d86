"""Amodal instance segmentation with shape priors from diffusion attention maps."""
from .config import TrainConfig
from .model import AISModel
from .scenes import SceneConfig, generate_scene, read_dataset, write_dataset

__all__ = ["AISModel", "SceneConfig", "TrainConfig", "generate_scene", "read_dataset", "write_dataset"]
__version__ = "0.1.0"
