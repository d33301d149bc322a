from .autograd import Var, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .params import ParamStore, adam_step
from .unet import UNetConfig, UNetPredictor, init_unet, time_embedding, unet_forward

__all__ = [
    "Var", "backward", "no_grad",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "ParamStore", "adam_step",
    "UNetConfig", "UNetPredictor", "init_unet", "time_embedding", "unet_forward",
]
