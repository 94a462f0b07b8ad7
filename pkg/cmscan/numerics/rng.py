import numpy as np

class Rng(object):
    """
    Counter-based, splittable random stream (Philox keyed by a seed and a split path)
    ...

    Attributes
    ----------
    seed : int
        Root seed of the stream family
    path : tuple
        Split tags leading to this stream

    Public Methods
    -------
    split()
        Derive an independent child stream
    get_counter()
        Current Philox counter
    uniform(), normal(), integers(), permutation()
        Draws, numpy Generator semantics
    """

    def __init__(self, seed : int, path : tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(tag) for tag in path)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.bit_generator = np.random.Philox(sequence)
        self.generator = np.random.Generator(self.bit_generator)

    def split(self, *tags):
        """Derive a child stream. Draws from a child never affect its parent or siblings
        ----------

        Parameters
        ----------
        tags : int
            Non-negative integers identifying the child

        Returns
        -------
        rng : Rng
            Child stream
        """
        return Rng(self.seed, self.path + tuple(tags))

    def get_counter(self):
        return int(self.bit_generator.state['state']['counter'][0])

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n : int):
        return self.generator.permutation(n)

# Stream tags of a run, children of Rng(seed)
STREAM_INIT, STREAM_BATCH, STREAM_AUGMENT, STREAM_DATA = 0, 1, 2, 3
