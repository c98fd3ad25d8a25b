"""Modality-exchange encoding: the parameter-free fixed exchange (FEM) that
rewrites the T1w branch from SimAM energies, and the learnable adaptive
exchange (AEM) that rewrites the FA branch via channel (ECA) plus spatial
attention. Both produce complementary coefficient maps that sum to one and
blend the two modalities elementwise.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_LAMBDA = 1e-4
SPATIAL_KERNEL_SIZE = 7


@dataclass
class FeaturePair:
    """Same-shape feature maps for the two modalities."""
    t1w: Tensor
    fa: Tensor

    def __post_init__(self):
        if self.t1w.shape != self.fa.shape:
            raise T.ShapeError(f"modality shapes differ: {self.t1w.shape} vs {self.fa.shape}")


@dataclass
class EnergyField:
    """Per-position minimal energies with the channel stats behind them."""
    e: Tensor
    lam: float
    mu_hat: Tensor
    sigma_hat_sq: Tensor
    count: int


@dataclass
class CoefficientMap:
    """Complementary exchange weights: f_t1w + f_fa == 1 elementwise."""
    f_t1w: Tensor
    f_fa: Tensor


@dataclass
class AemParams:
    """Learnable pieces of the adaptive exchange: a bias-free 1D channel
    kernel (odd k) and a 2-to-1 channel spatial conv (odd s) with bias."""
    eca_kernel: Tensor
    spatial_kernel: Tensor
    spatial_bias: Tensor

    def __post_init__(self):
        if self.eca_kernel.shape[2] % 2 == 0 or self.spatial_kernel.shape[2] % 2 == 0:
            raise ValueError("AEM kernel sizes must be odd")


@dataclass
class AemState:
    """Intermediates of the adaptive exchange: channel weights and the
    2-channel avg/max pooled map."""
    x_c: Tensor
    x_f: Tensor

    def __post_init__(self):
        if self.x_f.shape[0] != 2:
            raise T.ShapeError("pooled map must have exactly 2 channels")


def overlay(pair: FeaturePair) -> Tensor:
    """Sum of the two modality maps; the shared input to both exchanges."""
    return pair.t1w + pair.fa


def simam_energy(x: Tensor, lam: float = DEFAULT_LAMBDA) -> EnergyField:
    """Closed-form minimal neuron energy per position.

    Stats are per channel over all M = H*W positions (biased variance);
    e = 4*(var + lam) / ((x - mean)^2 + 2*var + 2*lam). Lower energy marks
    a position as more distinct within its channel.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    c, h, w = x.shape
    if h * w < 2:
        raise T.ShapeError("energy needs at least 2 positions per channel")
    mu = T.tmean(x, axis=(1, 2), keepdims=True)
    centered = x - mu
    var = T.tmean(centered * centered, axis=(1, 2), keepdims=True)
    e = (4.0 * (var + lam)) / (centered * centered + 2.0 * var + 2.0 * lam)
    return EnergyField(e=e, lam=lam, mu_hat=mu, sigma_hat_sq=var, count=h * w)


def fem_coefficients(energy: EnergyField) -> CoefficientMap:
    """T1w keeps sigmoid(1/e) of itself; FA fills the complement.

    Since 1/e is positive, every f_t1w lies strictly in (0.5, 1).
    """
    if np.any(energy.e.data <= 0):
        raise ValueError("energies must be positive")
    f_t1w = T.sigmoid(1.0 / energy.e)
    return CoefficientMap(f_t1w=f_t1w, f_fa=1.0 - f_t1w)


def fem_exchange(pair: FeaturePair, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Parameter-free exchanged T1w branch: f_t1w*t1w + f_fa*fa.

    Blended as fa + f_t1w*(t1w - fa) so equal modalities pass through
    bit-exactly.
    """
    coeff = fem_coefficients(simam_energy(overlay(pair), lam))
    return pair.fa + coeff.f_t1w * (pair.t1w - pair.fa)


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive odd kernel size for channel attention; never below 3."""
    t = int(abs(math.log2(channels) / gamma + b / gamma))
    k = t if t % 2 else t + 1
    return max(3, k)


def eca_weights(x_input: Tensor, params: AemParams) -> Tensor:
    """Per-channel gate in (0, 1): sigmoid of a 1D conv over the pooled means."""
    c = x_input.shape[0]
    gap = T.pool(x_input, "gap")
    row = T.reshape(gap, (1, c))
    return T.reshape(T.sigmoid(T.conv1d(row, params.eca_kernel)), (c, 1, 1))


def aem_attention(x_input: Tensor, params: AemParams) -> AemState:
    """Channel gating followed by channel-axis avg/max pooling."""
    x_c = eca_weights(x_input, params)
    recal = x_c * x_input
    x_f = T.concat([T.pool(recal, "channel_avg"), T.pool(recal, "channel_max")], axis=0)
    return AemState(x_c=x_c, x_f=x_f)


def aem_coefficients(x_input: Tensor, params: AemParams) -> CoefficientMap:
    """Learned exchange weights: a spatial conv compresses the pooled pair
    to one channel, sigmoid yields f_fa (broadcast over channels)."""
    state = aem_attention(x_input, params)
    s = params.spatial_kernel.shape[2]
    f_fa = T.sigmoid(T.conv2d(state.x_f, params.spatial_kernel, params.spatial_bias,
                              stride=1, padding=(s - 1) // 2))
    return CoefficientMap(f_t1w=1.0 - f_fa, f_fa=f_fa)


def aem_exchange(pair: FeaturePair, params: AemParams) -> Tensor:
    """Learned exchanged FA branch: f_fa*fa + f_t1w*t1w, identity-preserving
    on equal modalities."""
    coeff = aem_coefficients(overlay(pair), params)
    return pair.t1w + coeff.f_fa * (pair.fa - pair.t1w)


def exchange_stage(pair: FeaturePair, lam, aem: AemParams,
                   conv_t1w, conv_fa) -> FeaturePair:
    """One encoder stage: both exchanges read the original pair, then each
    branch runs its own conv block."""
    return FeaturePair(t1w=conv_t1w(fem_exchange(pair, lam)),
                       fa=conv_fa(aem_exchange(pair, params=aem)))
