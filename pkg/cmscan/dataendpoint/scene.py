import numpy as np
from PIL import Image, ImageDraw
from scipy.spatial.distance import cdist
from matplotlib.colors import hsv_to_rgb
from cmscan.numerics.tensor import DimensionError, COMPUTE_DTYPE
from cmscan.numerics.rng import Rng
from cmscan.runtime.configsection import ConfigSection

MIN_THERMAL_GAP = 0.3

class SamplePair(object):
    """
    An aligned RGB-thermal image pair with its label map
    ...

    Attributes
    ----------
    rgb : np.ndarray
        [3, H, W] in [0, 1]
    thermal : np.ndarray
        [3, H, W] in [0, 1], single-channel source replicated
    labels : np.ndarray
        [H, W] uint8 class ids, 255 ignored
    name : str
        Sample identifier

    Public Methods
    -------
    get_size()
        (H, W)
    with_zero_thermal()
        Same sample with a zeroed thermal image
    """

    def __init__(self, rgb : np.ndarray, thermal : np.ndarray, labels : np.ndarray, name : str = None):
        if rgb.ndim != 3 or rgb.shape != thermal.shape or rgb.shape[1:] != labels.shape:
            raise DimensionError('Sample ' + str(name) + ': rgb ' + str(rgb.shape) + ', thermal ' + str(thermal.shape) + ' and labels ' + str(labels.shape) + ' are not aligned')
        self.rgb = rgb
        self.thermal = thermal
        self.labels = labels
        self.name = name

    def get_size(self):
        return self.labels.shape

    def with_zero_thermal(self):
        return SamplePair(self.rgb, np.zeros_like(self.thermal), self.labels, self.name)

class SceneSpec(ConfigSection):
    """
    Synthetic RGB-thermal scene recipe. Ambiguous class pairs share one RGB color and differ only
    by their thermal level
    ...

    Attributes
    ----------
    num_classes : int
        K, class 0 is the background
    canvas : int
        Square image side, divisible by 32
    min_shapes, max_shapes : int
        Range of the number of shapes per scene
    rgb_colors : list
        K RGB triplets in [0, 1], None for the default palette
    thermal_levels : list
        K levels in [0, 1], None for the default levels
    ambiguous_pairs : list
        Class pairs sharing their RGB color
    rgb_noise, thermal_noise : float
        Gaussian noise sigma
    """

    section = 'scene'
    defaults = {'num_classes': 6, 'canvas': 64, 'min_shapes': 2, 'max_shapes': 6, 'rgb_colors': None,\
        'thermal_levels': None, 'ambiguous_pairs': [[1, 2], [3, 4]], 'rgb_noise': 0.05, 'thermal_noise': 0.05}

    def validate(self):
        self.check_positive('num_classes')
        self.check_positive('canvas')
        if self.canvas % 32 != 0: self.fail('canvas must be divisible by 32, got ' + str(self.canvas))
        self.check_positive('min_shapes', allow_zero=True)
        if self.max_shapes < self.min_shapes: self.fail('max_shapes must be >= min_shapes')
        self.check_positive('rgb_noise', allow_zero=True)
        self.check_positive('thermal_noise', allow_zero=True)
        for pair in self.ambiguous_pairs:
            if len(pair) != 2 or pair[0] == pair[1] or not all(0 < c < self.num_classes for c in pair):
                self.fail('ambiguous pair ' + repr(pair) + ' must hold two distinct foreground classes')
        default_colors, default_levels = default_palette(self.num_classes, self.ambiguous_pairs)
        if self.rgb_colors is None: self.rgb_colors = default_colors
        if self.thermal_levels is None: self.thermal_levels = default_levels
        if np.shape(self.rgb_colors) != (self.num_classes, 3) or np.shape(self.thermal_levels) != (self.num_classes,):
            self.fail('rgb_colors must be ' + str(self.num_classes) + ' triplets and thermal_levels ' + str(self.num_classes) + ' values')
        for first, second in self.ambiguous_pairs:
            if list(self.rgb_colors[first]) != list(self.rgb_colors[second]):
                self.fail('ambiguous classes ' + str(first) + ' and ' + str(second) + ' must share their rgb color')
            if abs(self.thermal_levels[first] - self.thermal_levels[second]) < MIN_THERMAL_GAP:
                self.fail('ambiguous classes ' + str(first) + ' and ' + str(second) + ' need thermal levels at least ' + str(MIN_THERMAL_GAP) + ' apart')

    def get_colors(self):
        return np.asarray(self.rgb_colors, dtype=np.float64)

    def get_levels(self):
        return np.asarray(self.thermal_levels, dtype=np.float64)

def default_palette(num_classes : int, ambiguous_pairs : list):
    """Evenly spaced hues and graded thermal levels; the second class of each ambiguous pair copies
    the color of the first one, and the pair takes opposite thermal levels
    ----------
    """
    hues = np.arange(num_classes) / num_classes
    colors = hsv_to_rgb(np.stack([hues, np.full(num_classes, 0.6), np.full(num_classes, 0.8)], axis=1))
    colors[0] = (0.5, 0.5, 0.5)
    levels = 0.3 + 0.4 * np.arange(num_classes) / max(1, num_classes - 1)
    for first, second in ambiguous_pairs:
        colors[second] = colors[first]
        levels[first], levels[second] = 0.15, 0.85
    return np.round(colors, 4).tolist(), np.round(levels, 4).tolist()

def generate_scene(spec : SceneSpec, rng : Rng, name : str = None):
    """Draw a random scene of rectangles and ellipses over the background. Later shapes occlude
    earlier ones; images get Gaussian noise, labels stay exact
    ----------

    Parameters
    ----------
    spec : SceneSpec
        Scene recipe
    rng : Rng
        Stream consumed by this scene only

    Returns
    -------
    sample : SamplePair
        Images of size canvas x canvas
    """
    canvas = spec.canvas
    label_image = Image.new('L', (canvas, canvas), 0)
    draw = ImageDraw.Draw(label_image)
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(count):
        class_id = int(rng.integers(1, spec.num_classes)) if spec.num_classes > 1 else 0
        ellipse = bool(rng.integers(0, 2))
        width, height = (int(side) for side in rng.integers(canvas // 8, canvas // 2 + 1, size=2))
        left = int(rng.integers(0, canvas - width + 1))
        top = int(rng.integers(0, canvas - height + 1))
        box = (left, top, left + width - 1, top + height - 1)
        if ellipse: draw.ellipse(box, fill=class_id)
        else: draw.rectangle(box, fill=class_id)
    labels = np.array(label_image, dtype=np.uint8)

    rgb = spec.get_colors()[labels].transpose(2, 0, 1) + rng.normal(0.0, spec.rgb_noise, size=(3, canvas, canvas))
    thermal = spec.get_levels()[labels] + rng.normal(0.0, spec.thermal_noise, size=(canvas, canvas))
    rgb = np.clip(rgb, 0.0, 1.0).astype(COMPUTE_DTYPE)
    thermal = np.repeat(np.clip(thermal, 0.0, 1.0)[None], 3, axis=0).astype(COMPUTE_DTYPE)
    return SamplePair(rgb, thermal, labels, name)

def nearest_palette_labels(spec : SceneSpec, rgb : np.ndarray, thermal : np.ndarray = None):
    """Label every pixel with the class of its closest palette entry, from the RGB image alone or
    from RGB and thermal together. Ties go to the lowest class id
    ----------

    Parameters
    ----------
    spec : SceneSpec
        Palette of the scenes
    rgb : np.ndarray
        [3, H, W]
    thermal : np.ndarray (optional)
        [3, H, W], channel 0 is read

    Returns
    -------
    labels : np.ndarray
        [H, W] uint8
    """
    palette, pixels = spec.get_colors(), rgb.reshape(3, -1).T
    if thermal is not None:
        if thermal.shape != rgb.shape: raise DimensionError('rgb ' + str(rgb.shape) + ' and thermal ' + str(thermal.shape) + ' are not aligned')
        palette = np.concatenate([palette, spec.get_levels()[:, None]], axis=1)
        pixels = np.concatenate([pixels, thermal[0].reshape(-1, 1)], axis=1)
    return np.argmin(cdist(pixels, palette, 'sqeuclidean'), axis=1).astype(np.uint8).reshape(rgb.shape[1:])
