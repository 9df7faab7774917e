from .params import (Checkpoint, CheckpointPair, ModelParams, ema_update, ema_update_model, get_params,
                     load_checkpoint, save_checkpoint, set_params)
from .translation import (DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, PatchSampleMLP,
                          ResnetGenerator, build_discriminator, build_generator, build_patch_mlp)
from .unet import UNet3D, UNetConfig, build_unet3d, softmax_outputs

__all__ = [
    "Checkpoint", "CheckpointPair", "ModelParams", "ema_update", "ema_update_model", "get_params",
    "load_checkpoint", "save_checkpoint", "set_params",
    "DiscriminatorConfig", "GeneratorConfig", "PatchDiscriminator", "PatchSampleMLP", "ResnetGenerator",
    "build_discriminator", "build_generator", "build_patch_mlp",
    "UNet3D", "UNetConfig", "build_unet3d", "softmax_outputs",
]
