import numpy as np
from scipy.ndimage import zoom
from cmscan.numerics.tensor import ConfigurationError
from cmscan.numerics.rng import Rng
from cmscan.runtime.configsection import ConfigSection
from cmscan.dataendpoint.scene import SamplePair

class AugmentPolicy(ConfigSection):
    """
    Geometric training augmentation: random resize, random crop, horizontal flip
    ...

    Attributes
    ----------
    scale_range : list
        [min, max] resize factor, drawn uniformly
    crop_size : list
        [h, w] crop, None for the input size
    hflip : float
        Flip probability
    """

    section = 'augment'
    defaults = {'scale_range': [1.0, 1.0], 'crop_size': None, 'hflip': 0.5}

    def validate(self):
        if len(self.scale_range) != 2 or not (0 < self.scale_range[0] <= self.scale_range[1]):
            self.fail('scale_range must be [min, max] with 0 < min <= max, got ' + repr(self.scale_range))
        if self.crop_size is not None and (len(self.crop_size) != 2 or min(self.crop_size) < 1):
            self.fail('crop_size must be [h, w] with positive entries, got ' + repr(self.crop_size))
        if not (0 <= self.hflip <= 1): self.fail('hflip must be in [0, 1], got ' + repr(self.hflip))

def augment(sample : SamplePair, rng : Rng, policy : AugmentPolicy):
    """Apply one random geometric transform to the three maps of a sample. Images are resampled
    bilinearly, labels with nearest neighbor
    ----------

    Parameters
    ----------
    sample : SamplePair
        Input sample
    rng : Rng
        Stream consumed by this sample only
    policy : AugmentPolicy
        Transform ranges

    Returns
    -------
    sample : SamplePair
        Transformed sample, crop_size large
    """
    height, width = sample.get_size()
    scale = rng.uniform(policy.scale_range[0], policy.scale_range[1])
    resized_h, resized_w = int(round(height * scale)), int(round(width * scale))
    crop_h, crop_w = policy.crop_size if policy.crop_size is not None else (height, width)
    if crop_h > resized_h or crop_w > resized_w:
        raise ConfigurationError('Crop ' + str((crop_h, crop_w)) + ' exceeds the resized size ' + str((resized_h, resized_w)))
    top = int(rng.integers(0, resized_h - crop_h + 1))
    left = int(rng.integers(0, resized_w - crop_w + 1))
    flip = bool(rng.uniform() < policy.hflip)

    rgb, thermal, labels = sample.rgb, sample.thermal, sample.labels
    if (resized_h, resized_w) != (height, width):
        factors = (resized_h / height, resized_w / width)
        rgb = np.clip(zoom(rgb, (1,) + factors, order=1), 0.0, 1.0).astype(sample.rgb.dtype)
        thermal = np.clip(zoom(thermal, (1,) + factors, order=1), 0.0, 1.0).astype(sample.thermal.dtype)
        labels = zoom(labels, factors, order=0)
    window = (slice(top, top + crop_h), slice(left, left + crop_w))
    rgb, thermal, labels = rgb[(slice(None),) + window], thermal[(slice(None),) + window], labels[window]
    if flip: rgb, thermal, labels = rgb[..., ::-1], thermal[..., ::-1], labels[..., ::-1]
    return SamplePair(np.ascontiguousarray(rgb), np.ascontiguousarray(thermal), np.ascontiguousarray(labels), sample.name)
