"""Prototypical networks with rotational division fine-tuning (RDFT),
trained episodically inside MAML or Meta-Curvature."""

from .episodes import Episode, FewShotDataset, rdft_divide, rdft_rotations, sample_episode
from .meta import (CurvatureSet, MetaConfig, evaluate, finetune_sweep, mc_transform,
                   meta_train, meta_train_step, rdft_adapt, train_protonet_baseline)
from .models import EncoderParams, clone_params, encode, init_encoder

__version__ = "0.1.0"
