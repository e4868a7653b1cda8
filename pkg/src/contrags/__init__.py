"""Codebook-compressed Gaussian splatting trained by MCMC sampling.

The scene is a set of 3-D Gaussians whose color (SH) and shape (scale +
rotation) parameters live in two shared codebooks. Training samples a
posterior over both the continuous parameters and the discrete
Gaussian-to-row mappings: gradient (Langevin) updates, row splits and
lineage merges, each with a closed-form acceptance probability.
"""

from .camera import Camera, look_at, ring_cameras
from .metrics import LossTerms, psnr, recon_loss, recon_loss_grad, ssim, total_loss
from .model import (Codebook, GaussianArrays, ModelState, densify,
                    init_one_to_one, lookup, model_bytes, remap_gaussian,
                    sh_dim, validate_state)
from .modelio import (SceneManifest, ViewSpec, load_manifest, load_model,
                      load_png, load_scene, save_manifest, save_model,
                      save_png, serialize_model, synth_scene, write_metrics_csv,
                      write_scene)
from .render import (GradientSet, ProjectedSplat, RenderArtifacts,
                     build_covariance, project_gaussian, rasterize_backward,
                     rasterize_forward)
from .sampler import (MergeProposal, SamplerConfig, SplitProposal,
                      TransitionRecord, accept_merge, accept_split,
                      acceptance_probability, apply_merge, apply_split,
                      choose_transition, propose_merge, propose_split, q_sm,
                      sgld_update, train, train_step)
from .sh import eval_sh

__version__ = "0.1.0"
