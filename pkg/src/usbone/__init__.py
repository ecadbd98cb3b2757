"""Ultrasound bone keypoints: TGA, local-phase bone maps and a keypoint transporter."""

from .bonemap import BoneMapConfig, GaborConfig, bone_probability_map, build_scale_stack
from .phantom import PhantomConfig, PhantomTruth, generate, truth_roi
from .tga import TgaConfig, apply_tga, tga_mask
from .usgrid import RectROI, ScaleStack, VideoSequence, frame_pairs, load_frame, save_frame

__version__ = "0.1.0"
