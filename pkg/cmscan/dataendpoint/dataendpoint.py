import os, json
from cmscan.numerics.rng import Rng, STREAM_DATA
from cmscan.dataendpoint.scene import SceneSpec, generate_scene
from cmscan.dataendpoint.loader import load_dataset, load_sample, DatasetError

SPLITS = ('train', 'val', 'test')

def split_indices(count : int, ratios : list, split : str):
    """Deterministic assignment of sample indices to splits: index i goes to the split owning
    position i mod sum(ratios) (6:1:1 puts 0-5 in train, 6 in val, 7 in test)
    ----------
    """
    if split not in SPLITS: raise DatasetError('Unknown split ' + repr(split) + ', expected one of ' + str(SPLITS))
    owner = list()
    for name, ratio in zip(SPLITS, ratios): owner.extend([name] * int(ratio))
    return [index for index in range(count) if owner[index % len(owner)] == split]

def sample_name(index : int):
    return '{:05d}'.format(index)

class DataEndpoint(object):
    """
    An Endpoint is a class charged to provide or store samples and records
    Abstract class
    ...

    Public Methods
    -------
    load_sample()
        Sample at a position of the endpoint. Must be reimplemented
    get_size()
        Number of samples. Must be reimplemented
    store()
        Persist a record, for saving endpoints
    """

    def load_sample(self, position : int):
        """Return the SamplePair at position. Must be reimplemented
        ----------
        """
        raise NotImplementedError()

    def get_size(self):
        """Return the number of samples. Must be reimplemented
        ----------
        """
        raise NotImplementedError()

    def get_label_maps(self):
        for position in range(self.get_size()): yield self.load_sample(position).labels

    def store(self, record : dict):
        raise NotImplementedError()

    def is_synthetic(self):
        return False

    @staticmethod
    def record(step : int, rec : str, **values):
        """Return a metrics record as structured dict
        ----------

        Parameters
        ----------
        step : int
            Optimizer step of the record
        rec : str
            Type of record: train, eval or checkpoint
        values : dict
            Record fields (lr, loss, miou, per-class iou...)

        Return
        ----------
        data : dict
            Data as dict
        """
        data = {'step': int(step), 'rec': rec}
        data.update({key: value for key, value in values.items() if value is not None})
        return data

class DataEndpointSynthetic(DataEndpoint):
    """
    Synthetic samples of one split, generated on request from their own split of the data stream
    ...

    Attributes
    ----------
    scene : SceneSpec
        Scene recipe
    seed : int
        Run seed
    count : int
        Samples over all splits
    split : str
        Split served
    """

    def __init__(self, **kwargs):
        req_attributes = ['scene', 'seed', 'count', 'split']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.split_ratios = kwargs.get('split_ratios', [6, 1, 1])
        self.indices = split_indices(self.count, self.split_ratios, self.split)
        self.cache = dict()

    def load_sample(self, position : int):
        index = self.indices[position]
        if index not in self.cache:
            self.cache[index] = generate_scene(self.scene, Rng(self.seed).split(STREAM_DATA, index), name=sample_name(index))
        return self.cache[index]

    def get_size(self):
        return len(self.indices)

    def is_synthetic(self):
        return True

class DataEndpointDirectory(DataEndpoint):
    """
    Samples of one split of an on-disk dataset (root/split/{rgb,thermal,labels}/NAME.png)
    ...
    """

    def __init__(self, **kwargs):
        req_attributes = ['root', 'split']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.index = load_dataset(self.root, self.split)

    def load_sample(self, position : int):
        return load_sample(self.index[position])

    def get_size(self):
        return len(self.index)

class DataEndpointJsonLines(DataEndpoint):
    """
    Records stored as one JSON object per line
    ...
    """

    def __init__(self, **kwargs):
        req_attributes = ['output_file']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.encoder = kwargs.get('encoder', None)
        if kwargs.get('truncate', False) and os.path.exists(self.output_file): os.remove(self.output_file)

    def store(self, record : dict):
        with open(self.output_file, 'a') as f:
            f.write(json.dumps(record, sort_keys=True, cls=self.encoder) + '\n')

    def load_records(self):
        if not os.path.exists(self.output_file): return list()
        with open(self.output_file, 'r') as f:
            return [json.loads(line) for line in f if line.strip()]

    def get_size(self):
        return len(self.load_records())
