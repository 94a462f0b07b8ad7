import numpy as np
from joblib import Parallel, delayed
from cmscan.numerics.rng import Rng
from cmscan.dataendpoint.dataendpoint import DataEndpoint
from cmscan.dataendpoint.augment import AugmentPolicy, augment

class DataEndpointPool(object):
    """
    An EndpointPool is a class composed of a loading endpoint and a saving endpoint
    ...

    Attributes
    ----------
    loader : DataEndpoint
        Sample provider
    saver : DataEndpoint
        Record sink, may be None
    zero_thermal : bool
        Serve zeroed thermal images
    n_jobs : int
        Prefetch workers (joblib threads)

    Public Methods
    -------
    load_batch()
        Stacked (rgb, thermal, labels) of sample positions, optionally augmented
    sample_positions()
        Positions of the batch of a training step
    iterate_batches()
        Ordered, non-augmented batches covering the loader
    store()
        Persist a record to the saver if it is defined
    """

    def __init__(self, **kwargs):
        req_attributes = ['loader','saver']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.zero_thermal = kwargs.get('zero_thermal', False)
        self.n_jobs = kwargs.get('n_jobs', 1)

    def get_size(self):
        return self.loader.get_size()

    def __prepare(self, position : int, rng : Rng, policy : AugmentPolicy):
        sample = self.loader.load_sample(position)
        if rng is not None: sample = augment(sample, rng, policy)
        if self.zero_thermal: sample = sample.with_zero_thermal()
        return sample

    def load_batch(self, positions : list, rng : Rng = None, policy : AugmentPolicy = None):
        """Load, optionally augment, and stack samples
        ----------

        Parameters
        ----------
        positions : list
            Sample positions in the loader
        rng : Rng (optional)
            Augmentation stream of the batch, sample i uses rng.split(i). None disables augmentation
        policy : AugmentPolicy (optional)
            Augmentation ranges

        Return
        ----------
        batch : tuple
            rgb [B, 3, H, W], thermal [B, 3, H, W], labels [B, H, W]
        """
        streams = [None if rng is None else rng.split(rank) for rank in range(len(positions))]
        policy = AugmentPolicy() if policy is None else policy
        if self.n_jobs == 1:
            samples = [self.__prepare(position, stream, policy) for position, stream in zip(positions, streams)]
        else:
            samples = Parallel(n_jobs=self.n_jobs, prefer='threads')(delayed(self.__prepare)(position, stream, policy)\
                for position, stream in zip(positions, streams))
        return np.stack([s.rgb for s in samples]), np.stack([s.thermal for s in samples]), np.stack([s.labels for s in samples])

    def sample_positions(self, step : int, batch_size : int, rng : Rng):
        """Positions of the batch of a step: consecutive slices of one permutation per epoch, so that
        a run resumed at any step draws the same batches
        ----------
        """
        size = self.get_size()
        positions = list()
        for offset in range(step * batch_size, (step + 1) * batch_size):
            epoch, rank = divmod(offset, size)
            positions.append(int(rng.split(epoch).permutation(size)[rank]))
        return positions

    def iterate_batches(self, batch_size : int):
        for start in range(0, self.get_size(), batch_size):
            yield self.load_batch(list(range(start, min(start + batch_size, self.get_size()))))

    def get_label_maps(self):
        return self.loader.get_label_maps()

    def store(self, record : dict):
        if self.saver is not None: self.saver.store(record)

    def is_synthetic(self):
        return self.loader.is_synthetic()
