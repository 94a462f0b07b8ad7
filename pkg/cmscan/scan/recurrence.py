import math
import numpy as np
from cmscan.numerics.tensor import ConfigurationError, DimensionError, NumericError, ContractError, check_finite

MODES = ('swapped', 'strict', 'intra')
STRAIGHT, SWAPPED = 0, 1

def discretize(A : np.ndarray, B : np.ndarray, delta : np.ndarray):
    """Zero-order-hold style discretization Abar = exp(delta A), Bbar = delta B
    ----------

    Parameters
    ----------
    A : np.ndarray
        [..., C, N], strictly negative
    B : np.ndarray
        [..., N]
    delta : np.ndarray
        [..., C], strictly positive

    Returns
    -------
    A_bar, B_bar : np.ndarray
        [..., C, N]
    """
    if A.shape[-1] != B.shape[-1] or A.shape[-2] != delta.shape[-1]:
        raise DimensionError('discretize: A ' + str(A.shape) + ', B ' + str(B.shape) + ' and delta ' + str(delta.shape) + ' are incompatible')
    if not np.all(delta > 0): raise NumericError('discretize: step sizes must be strictly positive, min ' + str(np.min(delta)))
    with np.errstate(over='ignore'):
        A_bar = np.exp(delta[..., :, None] * A)
    if not np.all(np.isfinite(A_bar)): raise NumericError('discretize: exp(delta A) overflowed')
    B_bar = delta[..., :, None] * B[..., None, :]
    return A_bar, B_bar

def checkpoint_stride(length : int):
    return max(1, math.ceil(math.sqrt(length)))

class RecurrenceInputs(object):
    """
    Per-pixel inputs of the cross-modal recurrence of every (batch, direction) pair. Lane 0 of the
    pair axis is the RGB token of a pixel, lane 1 its thermal token
    ...

    Attributes
    ----------
    x : np.ndarray
        Tokens [B, 4, HW, 2, C]
    delta : np.ndarray
        Step sizes [B, 4, HW, 2, C]
    B, C : np.ndarray
        Input and output projections [B, 4, HW, 2, N]
    A : np.ndarray
        State matrices [4, C, N], strictly negative
    D : np.ndarray
        Skip gains [4, C]
    """

    def __init__(self, **kwargs):
        req_attributes = ['x', 'delta', 'B', 'C', 'A', 'D']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        batch, directions, pixels, lanes, channels = self.x.shape
        state_dim = self.A.shape[-1]
        if lanes != 2: raise DimensionError('Recurrence tokens must come in (RGB, thermal) pairs, got ' + str(self.x.shape))
        if self.delta.shape != self.x.shape: raise DimensionError('delta ' + str(self.delta.shape) + ' and tokens ' + str(self.x.shape) + ' differ')
        for name in ('B', 'C'):
            if getattr(self, name).shape != (batch, directions, pixels, 2, state_dim):
                raise DimensionError(name + ' ' + str(getattr(self, name).shape) + ' incompatible with tokens ' + str(self.x.shape) + ' and A ' + str(self.A.shape))
        if self.A.shape != (directions, channels, state_dim) or self.D.shape != (directions, channels):
            raise DimensionError('A ' + str(self.A.shape) + ' or D ' + str(self.D.shape) + ' incompatible with tokens ' + str(self.x.shape))

    def get_length(self):
        return self.x.shape[2]

    def step(self, k : int):
        """Discretized transition and input of pixel k, [B, 4, 2, C, N] each
        ----------
        """
        A_bar, B_bar = discretize(self.A[None, :, None], self.B[:, :, k], self.delta[:, :, k])
        return A_bar, B_bar * self.x[:, :, k, :, :, None]

    def read_out(self, k : int, state : np.ndarray):
        return (state * self.C[:, :, k, :, None, :]).sum(axis=-1) + self.D[None, :, None, :] * self.x[:, :, k]

    def zero_state(self):
        batch, directions, _, _, channels = self.x.shape
        return np.zeros((batch, directions, 2, channels, self.A.shape[-1]), dtype=self.x.dtype)

def advance(mode : str, state : np.ndarray, transition : np.ndarray, drive : np.ndarray):
    """One pixel of the recurrence on the joint (RGB, thermal) state [..., 2, C, N] (lane axis 2)
    ----------

    swapped : each lane reads the other lane's previous state
    strict  : RGB reads the previous thermal state, thermal reads the current RGB state
    intra   : each lane reads its own previous state
    """
    if mode == 'swapped':
        return transition * state[:, :, ::-1] + drive
    if mode == 'intra':
        return transition * state + drive
    if mode == 'strict':
        state_rgb = transition[:, :, 0] * state[:, :, 1] + drive[:, :, 0]
        state_thermal = transition[:, :, 1] * state_rgb + drive[:, :, 1]
        return np.stack((state_rgb, state_thermal), axis=2)
    raise ConfigurationError('Unknown recurrence mode ' + str(mode) + ', expected one of ' + str(MODES))

def recurrence_sequential(inputs : RecurrenceInputs, mode : str = 'swapped', stride : int = None):
    """Sequential reference of the cross-modal recurrence, zero initial state
    ----------

    Parameters
    ----------
    inputs : RecurrenceInputs
        Tokens and projected parameters
    mode : str
        swapped, strict or intra
    stride : int (optional)
        Checkpoint interval in pixels, default to ceil(sqrt(HW))

    Returns
    -------
    outputs : np.ndarray
        [B, 4, HW, 2, C], lane 0 RGB outputs, lane 1 thermal outputs
    checkpoints : list
        Joint state entering pixel s*stride, for every segment s
    """
    if mode not in MODES: raise ConfigurationError('Unknown recurrence mode ' + str(mode) + ', expected one of ' + str(MODES))
    length = inputs.get_length()
    stride = checkpoint_stride(length) if stride is None else stride
    outputs = np.empty_like(inputs.x)
    checkpoints = list()
    state = inputs.zero_state()
    for k in range(length):
        if k % stride == 0: checkpoints.append(state)
        transition, drive = inputs.step(k)
        state = advance(mode, state, transition, drive)
        outputs[:, :, k] = inputs.read_out(k, state)
    check_finite('recurrence outputs', outputs)
    return outputs, checkpoints

class AffinePairElement(object):
    """
    A batch of L affine maps on the joint state, h -> scale * pi(h) + offset, where pi swaps the
    two lanes (Swapped parity) or keeps them (Straight parity). The lane axis is axis 1
    ...

    Attributes
    ----------
    parity : np.ndarray
        [L] of STRAIGHT or SWAPPED
    scale, offset : np.ndarray
        [L, lanes, ...]

    Public Methods
    -------
    compose()
        Map applying a first map then a second one
    identity()
        Neutral element
    apply()
        Apply the maps to states
    """

    def __init__(self, parity : np.ndarray, scale : np.ndarray, offset : np.ndarray):
        if scale.shape != offset.shape or parity.shape != scale.shape[:1]:
            raise DimensionError('Affine element parity ' + str(parity.shape) + ', scale ' + str(scale.shape) + ' and offset ' + str(offset.shape) + ' disagree')
        self.parity = parity
        self.scale = scale
        self.offset = offset

    def __len__(self):
        return self.scale.shape[0]

    def __getitem__(self, index):
        if isinstance(index, int): index = slice(index, index + 1)
        return AffinePairElement(self.parity[index], self.scale[index], self.offset[index])

    @staticmethod
    def permute(parity : np.ndarray, value : np.ndarray):
        swapped = parity.reshape((-1,) + (1,) * (value.ndim - 1)) == SWAPPED
        return np.where(swapped, value[:, ::-1], value)

    @staticmethod
    def compose(first, second):
        """second o first: scale = s2 * pi2(s1), offset = s2 * pi2(o1) + o2, parity = p1 xor p2
        ----------
        """
        return AffinePairElement(first.parity ^ second.parity,\
            second.scale * AffinePairElement.permute(second.parity, first.scale),\
            second.scale * AffinePairElement.permute(second.parity, first.offset) + second.offset)

    @staticmethod
    def identity(shape : tuple, dtype=np.float64):
        return AffinePairElement(np.zeros(1, dtype=np.int8), np.ones((1,) + tuple(shape), dtype=dtype), np.zeros((1,) + tuple(shape), dtype=dtype))

    def apply(self, state : np.ndarray):
        return self.scale * AffinePairElement.permute(self.parity, state) + self.offset

def associative_scan(elements : AffinePairElement):
    """Work-efficient inclusive prefix composition: out[k] = elements[k] o ... o elements[0]
    ----------

    Adjacent pairs are combined, the half-length problem is solved recursively and the even
    positions are completed from the odd prefixes (O(L) compositions, O(log L) depth).
    """
    length = len(elements)
    if length == 1: return elements
    pairs = AffinePairElement.compose(elements[0:length - 1:2], elements[1::2])
    reduced = associative_scan(pairs)
    parity = np.empty_like(elements.parity)
    scale, offset = np.empty_like(elements.scale), np.empty_like(elements.offset)
    parity[1::2], scale[1::2], offset[1::2] = reduced.parity, reduced.scale, reduced.offset
    parity[0], scale[0], offset[0] = elements.parity[0], elements.scale[0], elements.offset[0]
    if length > 2:
        completed = AffinePairElement.compose(reduced[:(length - 1) // 2], elements[2::2])
        parity[2::2], scale[2::2], offset[2::2] = completed.parity, completed.scale, completed.offset
    return AffinePairElement(parity, scale, offset)

def recurrence_parallel(inputs : RecurrenceInputs, mode : str = 'swapped', stride : int = None):
    """Associative-scan evaluation of the cross-modal recurrence. Same contract as recurrence_sequential
    ----------

    swapped and intra compose per-pixel elements over the (RGB, thermal) lane pair; strict composes
    single-lane elements over the 2HW interleaved tokens.
    """
    if mode not in MODES: raise ConfigurationError('Unknown recurrence mode ' + str(mode) + ', expected one of ' + str(MODES))
    batch, directions, length, _, channels = inputs.x.shape
    stride = checkpoint_stride(length) if stride is None else stride
    transition, drive = discretize(inputs.A[None, :, None, None], inputs.B, inputs.delta)
    drive = drive * inputs.x[..., None]
    if mode == 'strict':
        # [J, 1, B, 4, C, N]: one chain over the interleaved tokens
        to_elements = lambda value: value.reshape(batch, directions, 2 * length, channels, -1).transpose(2, 0, 1, 3, 4)[:, None]
        parity = np.full(2 * length, STRAIGHT, dtype=np.int8)
        prefix = associative_scan(AffinePairElement(parity, to_elements(transition), to_elements(drive)))
        states = prefix.offset[:, 0].transpose(1, 2, 0, 3, 4).reshape(batch, directions, length, 2, channels, -1)
    else:
        # [HW, 2, B, 4, C, N]: lanes on axis 1
        to_elements = lambda value: value.transpose(2, 3, 0, 1, 4, 5)
        parity = np.full(length, SWAPPED if mode == 'swapped' else STRAIGHT, dtype=np.int8)
        prefix = associative_scan(AffinePairElement(parity, to_elements(transition), to_elements(drive)))
        states = prefix.offset.transpose(2, 3, 0, 1, 4, 5)
    outputs = (states * inputs.C[:, :, :, :, None, :]).sum(axis=-1) + inputs.D[None, :, None, None, :] * inputs.x
    check_finite('recurrence outputs', outputs)
    checkpoints = [inputs.zero_state() if start == 0 else np.ascontiguousarray(states[:, :, start - 1])\
        for start in range(0, length, stride)]
    return outputs, checkpoints

class RecurrenceGrads(object):
    """
    Adjoints of RecurrenceInputs
    ...

    Attributes
    ----------
    x, delta, B, C : np.ndarray
        Same shapes as the inputs
    A : np.ndarray
        [4, C, N]
    D : np.ndarray
        [4, C]
    """

    def __init__(self, inputs : RecurrenceInputs):
        self.x = np.zeros_like(inputs.x)
        self.delta = np.zeros_like(inputs.delta)
        self.B = np.zeros_like(inputs.B)
        self.C = np.zeros_like(inputs.C)
        self.A = np.zeros(inputs.A.shape, dtype=inputs.x.dtype)
        self.D = np.zeros(inputs.D.shape, dtype=inputs.x.dtype)

def recurrence_backward(inputs : RecurrenceInputs, checkpoints : list, grad_outputs : np.ndarray, mode : str = 'swapped', stride : int = None):
    """Reverse-time adjoint of the recurrence. Hidden states are recomputed segment by segment
    from the forward checkpoints
    ----------

    Parameters
    ----------
    inputs : RecurrenceInputs
        Forward inputs
    checkpoints : list
        Joint states returned by the forward pass
    grad_outputs : np.ndarray
        Upstream adjoint [B, 4, HW, 2, C]
    mode : str
        Recurrence mode of the forward pass
    stride : int (optional)
        Checkpoint interval used by the forward pass

    Returns
    -------
    grads : RecurrenceGrads
        Adjoints of every input
    """
    if mode not in MODES: raise ConfigurationError('Unknown recurrence mode ' + str(mode) + ', expected one of ' + str(MODES))
    length = inputs.get_length()
    stride = checkpoint_stride(length) if stride is None else stride
    if not checkpoints or len(checkpoints) != math.ceil(length / stride):
        raise ContractError('Recurrence adjoint requires the forward checkpoints, got ' + str(len(checkpoints) if checkpoints else 0))
    if grad_outputs.shape != inputs.x.shape:
        raise DimensionError('Upstream adjoint ' + str(grad_outputs.shape) + ' differs from outputs ' + str(inputs.x.shape))
    grads = RecurrenceGrads(inputs)
    A_stacked = inputs.A[None, :, None]
    carry = np.zeros_like(checkpoints[0]) if mode != 'strict' else np.zeros_like(checkpoints[0][:, :, 1])

    for segment in reversed(range(len(checkpoints))):
        start, stop = segment * stride, min((segment + 1) * stride, length)
        states = [checkpoints[segment]]
        for k in range(start, stop):
            transition, drive = inputs.step(k)
            states.append(advance(mode, states[-1], transition, drive))

        for k in reversed(range(start, stop)):
            previous, current = states[k - start], states[k - start + 1]
            transition, _ = inputs.step(k)
            grad_y = grad_outputs[:, :, k]
            grads.C[:, :, k] = (grad_y[..., None] * current).sum(axis=3)
            from_output = grad_y[..., None] * inputs.C[:, :, k, :, None, :]
            if mode == 'strict':
                grad_thermal = from_output[:, :, 1] + carry
                grad_rgb = from_output[:, :, 0] + transition[:, :, 1] * grad_thermal
                grad_state = np.stack((grad_rgb, grad_thermal), axis=2)
                grad_transition = np.stack((grad_rgb * previous[:, :, 1], grad_thermal * current[:, :, 0]), axis=2)
                carry = transition[:, :, 0] * grad_rgb
            else:
                grad_state = from_output + carry
                read = previous[:, :, ::-1] if mode == 'swapped' else previous
                grad_transition = grad_state * read
                carry = (transition * grad_state)[:, :, ::-1] if mode == 'swapped' else transition * grad_state

            delta_k, x_k, B_k = inputs.delta[:, :, k], inputs.x[:, :, k], inputs.B[:, :, k]
            grad_exponent = grad_transition * transition
            drive_sum = (grad_state * B_k[:, :, :, None, :]).sum(axis=-1)
            grads.delta[:, :, k] = (grad_exponent * A_stacked).sum(axis=-1) + drive_sum * x_k
            grads.A += (grad_exponent * delta_k[..., None]).sum(axis=(0, 2))
            grads.B[:, :, k] = (grad_state * (delta_k * x_k)[..., None]).sum(axis=3)
            grads.x[:, :, k] = drive_sum * delta_k + inputs.D[None, :, None, :] * grad_y
    grads.D = (grad_outputs * inputs.x).sum(axis=(0, 2, 3))
    return grads
