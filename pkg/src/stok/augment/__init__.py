from .geometry import GeoParams, affine_params, crop_params, hflip_params, mixup
from .pipeline import Pipeline, compose, seit_baseline, seitpp_default
from .pixel import CORRUPTIONS, corrupt, pixel_aug, sample_geometry
from .spec import AugSpec
from .tokenops import (channel_stats, color_adapt, emb_noise, token_cutmix, token_eda_swap,
                    token_rrc)
