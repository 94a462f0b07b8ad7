import numpy as np
from opt_einsum import contract
from scipy.special import softmax
from cmscan.numerics.tensor import DimensionError
from cmscan.numerics.rng import Rng
from cmscan.numerics.layers import Module, Linear

MAX_ATTENTION_PIXELS = 2 ** 14

class AttentionSizeError(ValueError):
    """Raised when naive cross-attention is requested on more pixels than the guard allows"""
    pass

def _tokens(feature : np.ndarray):
    # [B, C, H, W] -> [B, HW, C]
    batch, channels = feature.shape[:2]
    return feature.reshape(batch, channels, -1).transpose(0, 2, 1)

def naive_cross_attention(feature_rgb : np.ndarray, feature_thermal : np.ndarray, w_query : np.ndarray, w_key : np.ndarray, w_value : np.ndarray):
    """Dense cross-attention of RGB queries over thermal keys and values, forward only:
    softmax(Q_R K_T^T / sqrt(C)) V_T. Quadratic in the number of pixels
    ----------

    Parameters
    ----------
    feature_rgb, feature_thermal : np.ndarray
        [C, H, W] or [B, C, H, W], same shape
    w_query, w_key, w_value : np.ndarray
        [C, C] linear maps (no bias)

    Raises
    -------
    AttentionSizeError
        When H*W exceeds MAX_ATTENTION_PIXELS

    Returns
    -------
    attended : np.ndarray
        Same shape as the inputs
    """
    if feature_rgb.shape != feature_thermal.shape:
        raise DimensionError('Attention inputs differ: ' + str(feature_rgb.shape) + ' and ' + str(feature_thermal.shape))
    squeeze = (feature_rgb.ndim == 3)
    if squeeze: feature_rgb, feature_thermal = feature_rgb[None], feature_thermal[None]
    batch, channels, height, width = feature_rgb.shape
    if height * width > MAX_ATTENTION_PIXELS:
        raise AttentionSizeError('Naive cross-attention refuses ' + str(height * width) + ' pixels, limit is ' + str(MAX_ATTENTION_PIXELS))
    tokens_rgb, tokens_thermal = _tokens(feature_rgb), _tokens(feature_thermal)
    query = tokens_rgb @ w_query.T
    key = tokens_thermal @ w_key.T
    value = tokens_thermal @ w_value.T
    scores = contract('bqc,bkc->bqk', query, key) / np.sqrt(channels)
    attended = softmax(scores, axis=-1) @ value
    attended = attended.transpose(0, 2, 1).reshape(batch, channels, height, width).astype(feature_rgb.dtype)
    return attended[0] if squeeze else attended

class CrossAttention(Module):
    """
    Cross-attention baseline holding its query, key and value maps
    ...
    """

    def __init__(self, name : str, channels : int, rng : Rng):
        super().__init__(name)
        self.query = Linear(name + '.query', channels, channels, rng.split(0), bias=False)
        self.key = Linear(name + '.key', channels, channels, rng.split(1), bias=False)
        self.value = Linear(name + '.value', channels, channels, rng.split(2), bias=False)

    def forward(self, feature_rgb : np.ndarray, feature_thermal : np.ndarray):
        return naive_cross_attention(feature_rgb, feature_thermal, self.query.weight.value, self.key.weight.value, self.value.weight.value)
