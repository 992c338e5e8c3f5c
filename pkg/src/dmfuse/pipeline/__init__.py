"""Training runs, inference, evaluation and ablations behind the ``dmfuse`` CLI."""
from ..config import FusionConfig
from .ablation import MODES, run_ablation, variants_for
from .checkpoint import CheckpointError, load_checkpoint, read_info, save_checkpoint
from .commands import (cmd_eval, cmd_fuse, cmd_phantom, cmd_train_fusion, cmd_train_recon, fuse_pair,
                       load_fusion, load_reconstructor)
from .manifest import RunManifest, read_run_manifest

cmd_ablate = run_ablation

__all__ = [
    "CheckpointError", "FusionConfig", "MODES", "RunManifest", "cmd_ablate", "cmd_eval", "cmd_fuse",
    "cmd_phantom", "cmd_train_fusion", "cmd_train_recon", "fuse_pair", "load_checkpoint", "load_fusion",
    "load_reconstructor", "read_info", "read_run_manifest", "run_ablation", "save_checkpoint",
    "variants_for",
]
