import numpy as np
from cmscan.numerics.tensor import DimensionError, ConfigurationError

DIRECTIONS = ('RowFwd', 'ColFwd', 'RowRev', 'ColRev')

class DirectionalLayout(object):
    """
    A DirectionalLayout is the pixel visiting order of one scan direction over an H x W grid
    ...

    Attributes
    ----------
    direction : str
        One of RowFwd, ColFwd, RowRev, ColRev
    height, width : int
        Grid size
    pixel_order : np.ndarray
        pixel_order[k] is the row-major index of the k-th visited pixel
    inverse_order : np.ndarray
        inverse_order[pixel] is the visiting rank of pixel

    Public Methods
    -------
    get_direction(), get_pixel_order(), get_inverse_order()
        Getters
    """

    def __init__(self, direction : str, height : int, width : int):
        if direction not in DIRECTIONS: raise ConfigurationError('Unknown scan direction ' + str(direction))
        if height < 1 or width < 1: raise DimensionError('Grid size must be >= 1, got ' + str((height, width)))
        self.direction = direction
        self.height, self.width = height, width
        row_major = np.arange(height * width)
        col_major = row_major.reshape(height, width).T.ravel()
        self.pixel_order = {'RowFwd': row_major, 'ColFwd': col_major,\
            'RowRev': row_major[::-1], 'ColRev': col_major[::-1]}[direction].copy()
        self.inverse_order = np.argsort(self.pixel_order)

    def get_direction(self):
        return self.direction

    def get_pixel_order(self):
        return self.pixel_order

    def get_inverse_order(self):
        return self.inverse_order

    def __str__(self):
        return self.direction + '(' + str(self.height) + 'x' + str(self.width) + ')'

def build_layouts(height : int, width : int):
    return [DirectionalLayout(direction, height, width) for direction in DIRECTIONS]

class InterleavedSequence(object):
    """
    Cross-modal token sequences of every scan direction. Along the token axis, even indices are
    RGB tokens and odd indices thermal tokens of the same pixel
    ...

    Attributes
    ----------
    tokens : np.ndarray
        [B, 4, J=2HW, C]
    layouts : list
        DirectionalLayout of each direction, in token order

    Public Methods
    -------
    get_tokens()
        Interleaved tokens
    get_pairs()
        Tokens viewed per pixel as [B, 4, HW, 2, C], lane 0 being RGB
    get_rgb(), get_thermal()
        Per-modality tokens [B, 4, HW, C]
    """

    def __init__(self, tokens : np.ndarray, layouts : list):
        if tokens.ndim != 4 or tokens.shape[1] != len(layouts) or tokens.shape[2] % 2 != 0:
            raise DimensionError('Interleaved tokens must be [B, directions, 2HW, C], got ' + str(tokens.shape))
        self.tokens = tokens
        self.layouts = layouts

    def get_tokens(self):
        return self.tokens

    def get_layouts(self):
        return self.layouts

    def get_pairs(self):
        batch, directions, length, channels = self.tokens.shape
        return self.tokens.reshape(batch, directions, length // 2, 2, channels)

    def get_rgb(self):
        return self.tokens[:, :, 0::2]

    def get_thermal(self):
        return self.tokens[:, :, 1::2]

def _as_batched(feature : np.ndarray):
    if feature.ndim == 3: return feature[None]
    if feature.ndim == 4: return feature
    raise DimensionError('Feature map must be [C, H, W] or [B, C, H, W], got ' + str(feature.shape))

def build_directional_sequences(feature_rgb : np.ndarray, feature_thermal : np.ndarray, layouts : list = None):
    """Interleave both modalities per pixel, RGB first, in each direction's pixel order
    ----------

    Parameters
    ----------
    feature_rgb, feature_thermal : np.ndarray
        [C, H, W] or [B, C, H, W], same shape
    layouts : list (optional)
        DirectionalLayout list, default to the four directions

    Returns
    -------
    sequence : InterleavedSequence
        Tokens [B, 4, 2HW, C]
    """
    if feature_rgb.shape != feature_thermal.shape:
        raise DimensionError('RGB features ' + str(feature_rgb.shape) + ' and thermal features ' + str(feature_thermal.shape) + ' differ')
    rgb, thermal = _as_batched(feature_rgb), _as_batched(feature_thermal)
    batch, channels, height, width = rgb.shape
    if layouts is None: layouts = build_layouts(height, width)
    rgb_pixels = rgb.reshape(batch, channels, height * width).transpose(0, 2, 1)
    thermal_pixels = thermal.reshape(batch, channels, height * width).transpose(0, 2, 1)
    tokens = np.empty((batch, len(layouts), 2 * height * width, channels), dtype=rgb.dtype)
    for index, layout in enumerate(layouts):
        order = layout.get_pixel_order()
        tokens[:, index, 0::2] = rgb_pixels[:, order]
        tokens[:, index, 1::2] = thermal_pixels[:, order]
    return InterleavedSequence(tokens, layouts)

def merge_scans(outputs_rgb : np.ndarray, outputs_thermal : np.ndarray, layouts : list, height : int, width : int):
    """Un-permute every direction's outputs back to row-major pixel order and sum them
    ----------

    Parameters
    ----------
    outputs_rgb, outputs_thermal : np.ndarray
        Per-direction outputs [B, 4, HW, C] in visiting order
    layouts : list
        DirectionalLayout of each direction
    height, width : int
        Grid size

    Returns
    -------
    merged_rgb, merged_thermal : np.ndarray
        [B, C, H, W]
    """
    if outputs_rgb.shape != outputs_thermal.shape or outputs_rgb.shape[2] != height * width:
        raise DimensionError('Scan outputs ' + str(outputs_rgb.shape) + ' and ' + str(outputs_thermal.shape) + ' do not match a ' + str((height, width)) + ' grid')
    batch, _, _, channels = outputs_rgb.shape
    merged_rgb = np.zeros((batch, height * width, channels), dtype=outputs_rgb.dtype)
    merged_thermal = np.zeros_like(merged_rgb)
    for index, layout in enumerate(layouts):
        inverse = layout.get_inverse_order()
        merged_rgb += outputs_rgb[:, index, inverse]
        merged_thermal += outputs_thermal[:, index, inverse]
    to_map = lambda merged: np.ascontiguousarray(merged.transpose(0, 2, 1).reshape(batch, channels, height, width))
    return to_map(merged_rgb), to_map(merged_thermal)

def scatter_tokens(grad_tokens : np.ndarray, layouts : list, height : int, width : int):
    """Adjoint of build_directional_sequences: sum token adjoints back onto both feature maps
    ----------

    Returns
    -------
    grad_rgb, grad_thermal : np.ndarray
        [B, C, H, W]
    """
    batch, _, _, channels = grad_tokens.shape
    grad_rgb = np.zeros((batch, height * width, channels), dtype=grad_tokens.dtype)
    grad_thermal = np.zeros_like(grad_rgb)
    for index, layout in enumerate(layouts):
        inverse = layout.get_inverse_order()
        grad_rgb += grad_tokens[:, index, 0::2][:, inverse]
        grad_thermal += grad_tokens[:, index, 1::2][:, inverse]
    to_map = lambda grad: np.ascontiguousarray(grad.transpose(0, 2, 1).reshape(batch, channels, height, width))
    return to_map(grad_rgb), to_map(grad_thermal)
