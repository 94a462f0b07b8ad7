import os, json, logging
import numpy as np
from PIL import Image
from cmscan.numerics.tensor import COMPUTE_DTYPE
from cmscan.dataendpoint.scene import SamplePair

logger = logging.getLogger(__name__)

MODALITIES = ('rgb', 'thermal', 'labels')
EXTENSION = '.png'
PROVENANCE_FILE = 'spec.json'

class DatasetError(IOError):
    """Raised when a dataset directory cannot be read"""
    pass

class DatasetListingError(DatasetError):
    """Raised when a sample misses one of its three files"""
    pass

class DatasetSizeError(DatasetError):
    """Raised when the three images of a sample differ in size"""
    pass

class SampleRef(object):
    """
    Paths of the three files of one sample
    ...
    """

    def __init__(self, stem : str, rgb : str, thermal : str, labels : str):
        self.stem = stem
        self.rgb, self.thermal, self.labels = rgb, thermal, labels

    def get_stem(self):
        return self.stem

class DatasetIndex(object):
    """
    Sorted list of the samples of one split
    ...

    Public Methods
    -------
    get_stems()
        Sample names
    """

    def __init__(self, root_dir : str, split : str, refs : list):
        self.root_dir, self.split = root_dir, split
        self.refs = refs

    def __len__(self):
        return len(self.refs)

    def __getitem__(self, index : int):
        return self.refs[index]

    def get_stems(self):
        return [ref.get_stem() for ref in self.refs]

def load_dataset(root_dir : str, split : str):
    """Index root_dir/split/{rgb,thermal,labels}/NAME.png triples, checking that every stem has its
    three files of equal size
    ----------

    Parameters
    ----------
    root_dir : str
        Dataset root
    split : str
        Split name (train, val, test...)

    Returns
    -------
    index : DatasetIndex
        Possibly empty
    """
    split_dir = os.path.join(root_dir, split)
    if not os.path.isdir(split_dir): raise DatasetError('Missing split directory ' + split_dir)
    stems = dict()
    for modality in MODALITIES:
        modality_dir = os.path.join(split_dir, modality)
        names = sorted(os.listdir(modality_dir)) if os.path.isdir(modality_dir) else list()
        stems[modality] = {name[:-len(EXTENSION)] for name in names if name.endswith(EXTENSION)}
    all_stems = sorted(set().union(*stems.values()))
    refs = list()
    for stem in all_stems:
        missing = [modality for modality in MODALITIES if stem not in stems[modality]]
        if missing: raise DatasetListingError('Sample ' + repr(stem) + ' in ' + split_dir + ' misses its ' + ', '.join(missing) + ' file')
        paths = [os.path.join(split_dir, modality, stem + EXTENSION) for modality in MODALITIES]
        sizes = list()
        for path in paths:
            with Image.open(path) as image: sizes.append(image.size)
        if len(set(sizes)) != 1: raise DatasetSizeError('Sample ' + repr(stem) + ' has mismatched sizes ' + str(dict(zip(MODALITIES, sizes))))
        refs.append(SampleRef(stem, *paths))
    if not refs: logger.warning('Split %s of %s is empty', split, root_dir)
    return DatasetIndex(root_dir, split, refs)

def load_sample(ref : SampleRef):
    """Decode the 8-bit PNGs of a sample. Grayscale thermal images are replicated to 3 channels
    ----------
    """
    with Image.open(ref.rgb) as image: rgb = np.asarray(image.convert('RGB'), dtype=COMPUTE_DTYPE) / 255.0
    with Image.open(ref.thermal) as image: thermal = np.asarray(image.convert('RGB'), dtype=COMPUTE_DTYPE) / 255.0
    with Image.open(ref.labels) as image:
        if image.mode not in ('L', 'P'): raise DatasetError('Label map ' + ref.labels + ' must be grayscale or palette, got mode ' + image.mode)
        labels = np.array(image, dtype=np.uint8)
    return SamplePair(rgb.transpose(2, 0, 1).astype(COMPUTE_DTYPE), thermal.transpose(2, 0, 1).astype(COMPUTE_DTYPE), labels, ref.get_stem())

def save_sample(sample : SamplePair, root_dir : str, split : str, name : str):
    """Write a sample in the dataset layout: RGB PNG, grayscale thermal PNG, grayscale label PNG
    ----------
    """
    for modality in MODALITIES: os.makedirs(os.path.join(root_dir, split, modality), exist_ok=True)
    to_bytes = lambda image: np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(to_bytes(sample.rgb.transpose(1, 2, 0)), mode='RGB').save(os.path.join(root_dir, split, 'rgb', name + EXTENSION))
    Image.fromarray(to_bytes(sample.thermal[0]), mode='L').save(os.path.join(root_dir, split, 'thermal', name + EXTENSION))
    Image.fromarray(sample.labels, mode='L').save(os.path.join(root_dir, split, 'labels', name + EXTENSION))

def write_provenance(root_dir : str, provenance : dict, encoder=None):
    os.makedirs(root_dir, exist_ok=True)
    with open(os.path.join(root_dir, PROVENANCE_FILE), 'w') as f:
        f.write(json.dumps(provenance, indent=2, sort_keys=True, cls=encoder))
