from .network import Architecture, Denoiser, NetworkDenoiser, PointDenoiser, build_network
from .sampler import SampleResult, SamplerConfig, decode, encode, guided_sample, inpaint, sample
from .schedule import NoiseSchedule

__all__ = [
    "Architecture", "Denoiser", "NetworkDenoiser", "PointDenoiser", "build_network",
    "SampleResult", "SamplerConfig", "decode", "encode", "guided_sample", "inpaint", "sample",
    "NoiseSchedule",
]
