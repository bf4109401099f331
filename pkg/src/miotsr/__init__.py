"""Edge-side image compression with server-side residual dense restoration."""

from .codec import decode, encode
from .imageio import Image, read_ppm, write_ppm
from .metrics import psnr, ssim

__all__ = ["Image", "decode", "encode", "psnr", "read_ppm", "ssim", "write_ppm"]
__version__ = "0.1.0"
