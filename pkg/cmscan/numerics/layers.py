import numpy as np
from cmscan.numerics.tensor import Parameter, Variable, Tape, COMPUTE_DTYPE
from cmscan.numerics.rng import Rng
from cmscan.numerics import primitives

GAINS = {'linear': 1.0, 'relu': np.sqrt(2.0), 'silu': np.sqrt(2.0)}

def kaiming_uniform(rng : Rng, shape : tuple, fan_in : int, nonlinearity : str = 'relu', dtype=COMPUTE_DTYPE):
    """Draw a Kaiming-uniform initialization U(-b, b) with b = gain * sqrt(3/fan_in)
    ----------

    Parameters
    ----------
    rng : Rng
        Stream to draw from
    shape : tuple
        Shape of the returned tensor
    fan_in : int
        Inputs per output unit
    nonlinearity : str
        Nonlinearity following the layer, selects the gain

    Returns
    -------
    tensor : np.ndarray
        Initialized values
    """
    bound = GAINS[nonlinearity] * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)

class Module(object):
    """
    A Module groups named Parameters and child Modules. Parameters, buffers and children are
    discovered from instance attributes, in declaration order
    ...

    Attributes
    ----------
    name : str
        Prefix of every parameter name held

    Public Methods
    -------
    parameters()
        Ordered list of Parameters, children included
    modules()
        Self and every descendant Module
    buffers()
        Non-learnable state (e.g. running statistics) keyed by full name
    set_buffer()
        Overwrite a buffer by full name
    astype()
        Cast every parameter and buffer
    """

    buffer_names = ()

    def __init__(self, name : str):
        self.name = name

    def children(self):
        found = list()
        for value in vars(self).values():
            if isinstance(value, Module): found.append(value)
            elif isinstance(value, (list, tuple)): found.extend(item for item in value if isinstance(item, Module))
        return found

    def modules(self):
        found = [self]
        for child in self.children(): found.extend(child.modules())
        return found

    def parameters(self):
        params = list()
        for value in vars(self).values():
            if isinstance(value, Parameter): params.append(value)
            elif isinstance(value, Module): params.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module): params.extend(item.parameters())
        return params

    def buffers(self):
        return {module.name + '.' + buffer_name: getattr(module, buffer_name)\
            for module in self.modules() for buffer_name in module.buffer_names}

    def set_buffer(self, full_name : str, value : np.ndarray):
        for module in self.modules():
            for buffer_name in module.buffer_names:
                if module.name + '.' + buffer_name == full_name:
                    setattr(module, buffer_name, np.array(value, dtype=getattr(module, buffer_name).dtype))
                    return
        raise KeyError('Unknown buffer ' + full_name)

    def astype(self, dtype):
        for param in self.parameters():
            param.value = param.value.astype(dtype)
            param.zero_grad()
        for module in self.modules():
            for buffer_name in module.buffer_names: setattr(module, buffer_name, getattr(module, buffer_name).astype(dtype))
        return self

    def zero_grad(self):
        for param in self.parameters(): param.zero_grad()

class Linear(Module):
    """
    Per-token affine map on the last axis
    ...

    Attributes
    ----------
    weight : Parameter
        [out_features, in_features]
    bias : Parameter
        [out_features] or None
    """

    def __init__(self, name : str, in_features : int, out_features : int, rng : Rng, bias : bool = True, nonlinearity : str = 'linear'):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features, nonlinearity), name + '.weight')
        self.bias = Parameter(np.zeros(out_features, dtype=COMPUTE_DTYPE), name + '.bias') if bias else None

    def forward(self, tape : Tape, x : Variable):
        return primitives.linear(tape, x, self.weight, self.bias)

    def forward_map(self, tape : Tape, x : Variable):
        """Apply on every pixel of a [B, C, H, W] feature map
        ----------
        """
        channels_last = primitives.permute(tape, x, (0, 2, 3, 1))
        return primitives.permute(tape, self.forward(tape, channels_last), (0, 3, 1, 2))

class Conv2d(Module):
    """
    Square-kernel convolution layer
    ...

    Attributes
    ----------
    kernel : Parameter
        [out_channels, in_channels/groups, k, k]
    bias : Parameter
        [out_channels] or None
    """

    def __init__(self, name : str, in_channels : int, out_channels : int, kernel_size : int, rng : Rng,\
            stride : int = 1, groups : int = 1, bias : bool = True, nonlinearity : str = 'relu'):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.groups = kernel_size, stride, groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.kernel = Parameter(kaiming_uniform(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in, nonlinearity), name + '.kernel')
        self.bias = Parameter(np.zeros(out_channels, dtype=COMPUTE_DTYPE), name + '.bias') if bias else None

    def forward(self, tape : Tape, x : Variable):
        return primitives.conv2d(tape, x, self.kernel, self.bias, stride=self.stride, groups=self.groups)

class BatchNorm2d(Module):
    """
    Batch normalization with running statistics kept as buffers
    ...

    Attributes
    ----------
    gamma, beta : Parameter
        Affine parameters [C]
    running_mean, running_var : np.ndarray
        Running statistics [C]
    """

    buffer_names = ('running_mean', 'running_var')

    def __init__(self, name : str, channels : int, momentum : float = 0.1, eps : float = 1e-5):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=COMPUTE_DTYPE), name + '.gamma')
        self.beta = Parameter(np.zeros(channels, dtype=COMPUTE_DTYPE), name + '.beta')
        self.running_mean = np.zeros(channels, dtype=COMPUTE_DTYPE)
        self.running_var = np.ones(channels, dtype=COMPUTE_DTYPE)

    def forward(self, tape : Tape, x : Variable, train : bool):
        return primitives.batchnorm2d(tape, x, self.gamma, self.beta, self.running_mean, self.running_var,\
            train=train, momentum=self.momentum, eps=self.eps)

class LayerNorm(Module):

    def __init__(self, name : str, channels : int, eps : float = 1e-5):
        super().__init__(name)
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=COMPUTE_DTYPE), name + '.gamma')
        self.beta = Parameter(np.zeros(channels, dtype=COMPUTE_DTYPE), name + '.beta')

    def forward(self, tape : Tape, x : Variable):
        return primitives.layernorm(tape, x, self.gamma, self.beta, eps=self.eps)

class ConvBnRelu(Module):
    """
    Convolution (no bias) followed by batch normalization and ReLU
    ...
    """

    def __init__(self, name : str, in_channels : int, out_channels : int, kernel_size : int, rng : Rng, stride : int = 1):
        super().__init__(name)
        self.conv = Conv2d(name + '.conv', in_channels, out_channels, kernel_size, rng, stride=stride, bias=False)
        self.norm = BatchNorm2d(name + '.bn', out_channels)

    def forward(self, tape : Tape, x : Variable, train : bool):
        return primitives.activation(tape, self.norm.forward(tape, self.conv.forward(tape, x), train), 'relu')
