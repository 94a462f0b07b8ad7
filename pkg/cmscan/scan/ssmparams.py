import numpy as np
from cmscan.numerics.tensor import Parameter, DimensionError, ConfigurationError, COMPUTE_DTYPE
from cmscan.numerics.rng import Rng
from cmscan.numerics.layers import Module, kaiming_uniform

DELTA_MIN, DELTA_MAX, DELTA_FLOOR = 1e-3, 1e-1, 1e-4

def inverse_softplus(value : np.ndarray):
    return value + np.log(-np.expm1(-value))

class SsmDirectionParams(object):
    """
    State-space parameters of a single scan direction
    ...

    Attributes
    ----------
    A_log : np.ndarray
        [C, N], A = -exp(A_log)
    D : np.ndarray
        [C] skip gain
    W_B, W_C : np.ndarray
        [N, C] token projections
    W_down : np.ndarray
        [R, C] low-rank step projection
    W_up : np.ndarray
        [C, R]
    delta_bias : np.ndarray
        [C]

    Public Methods
    -------
    get_A()
        Strictly negative state matrix diagonal [C, N]
    """

    FIELDS = ('A_log', 'D', 'W_B', 'W_C', 'W_down', 'W_up', 'delta_bias')

    def __init__(self, **kwargs):
        for req_attribute in SsmDirectionParams.FIELDS:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', SsmDirectionParams.FIELDS)
            setattr(self, req_attribute, np.asarray(kwargs[req_attribute]))
        channels, state_dim = self.A_log.shape
        rank = self.W_down.shape[0]
        expected = {'D': (channels,), 'W_B': (state_dim, channels), 'W_C': (state_dim, channels),\
            'W_down': (rank, channels), 'W_up': (channels, rank), 'delta_bias': (channels,)}
        for field, shape in expected.items():
            if getattr(self, field).shape != shape:
                raise DimensionError(field + ': expected shape ' + str(shape) + ', got ' + str(getattr(self, field).shape))

    def get_A(self):
        return -np.exp(self.A_log)

class SsmParams(Module):
    """
    The four direction parameter sets, stacked on a leading direction axis so that every
    direction runs in the same time loop. Directions stay independent
    ...

    Attributes
    ----------
    channels : int
        Token width C
    state_dim : int
        Hidden state size N
    rank : int
        Low-rank step projection size
    A_log, D, W_B, W_C, W_down, W_up, delta_bias : Parameter
        Stacked direction parameters, leading axis of size 4

    Public Methods
    -------
    get_A()
        Stacked state matrices [4, C, N]
    get_direction()
        SsmDirectionParams of one direction
    from_directions()
        Build from four SsmDirectionParams
    """

    def __init__(self, name : str, channels : int, state_dim : int, rank : int, rng : Rng = None,\
            directions : int = 4, delta_softplus : bool = True, dtype=COMPUTE_DTYPE):
        super().__init__(name)
        if channels < 1 or state_dim < 1 or rank < 1: raise ConfigurationError('SSM sizes must be >= 1, got C=' + str(channels) + ' N=' + str(state_dim) + ' R=' + str(rank))
        self.channels, self.state_dim, self.rank, self.directions = channels, state_dim, rank, directions
        rng = Rng(0) if rng is None else rng
        a_log = np.log(np.arange(1, state_dim + 1, dtype=np.float64))
        self.A_log = Parameter(np.broadcast_to(a_log, (directions, channels, state_dim)).astype(dtype), name + '.A_log')
        self.D = Parameter(np.ones((directions, channels), dtype=dtype), name + '.D')
        self.W_B = Parameter(kaiming_uniform(rng.split(0), (directions, state_dim, channels), channels, 'linear', dtype), name + '.W_B')
        self.W_C = Parameter(kaiming_uniform(rng.split(1), (directions, state_dim, channels), channels, 'linear', dtype), name + '.W_C')
        self.W_down = Parameter(kaiming_uniform(rng.split(2), (directions, rank, channels), channels, 'linear', dtype), name + '.W_down')
        self.W_up = Parameter(kaiming_uniform(rng.split(3), (directions, channels, rank), rank, 'linear', dtype), name + '.W_up')
        # Step sizes start log-uniform in [DELTA_MIN, DELTA_MAX]
        log_delta = rng.split(4).uniform(np.log(DELTA_MIN), np.log(DELTA_MAX), size=(directions, channels))
        delta = np.maximum(np.exp(log_delta), DELTA_FLOOR)
        self.delta_bias = Parameter((inverse_softplus(delta) if delta_softplus else delta).astype(dtype), name + '.delta_bias')

    def get_A(self):
        return -np.exp(self.A_log.value)

    def get_direction(self, index : int):
        return SsmDirectionParams(**{field: getattr(self, field).value[index] for field in SsmDirectionParams.FIELDS})

    @staticmethod
    def from_directions(name : str, directions : list):
        """Stack direction parameter sets into an SsmParams
        ----------
        """
        first = directions[0]
        channels, state_dim = first.A_log.shape
        params = SsmParams(name, channels, state_dim, first.W_down.shape[0], directions=len(directions), dtype=first.A_log.dtype)
        for field in SsmDirectionParams.FIELDS:
            getattr(params, field).value = np.stack([np.asarray(getattr(direction, field), dtype=first.A_log.dtype) for direction in directions])
            getattr(params, field).zero_grad()
        return params

    def get_param_dict(self):
        return {field: getattr(self, field) for field in SsmDirectionParams.FIELDS}
