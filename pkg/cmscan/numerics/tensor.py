import numpy as np

COMPUTE_DTYPE = np.float32
CHECK_DTYPE   = np.float64
ALLOWED_DTYPES = (np.float32, np.float64)

class DimensionError(ValueError):
    """Raised when two tensors do not have compatible shapes"""
    pass

class ConfigurationError(ValueError):
    """Raised when an operation or a run is configured with invalid values"""
    pass

class NumericError(ArithmeticError):
    """Raised when a non-finite value is produced. Optionally carries the training step"""
    def __init__(self, message : str, step : int = None):
        if step is not None: message = message + ' (step ' + str(step) + ')'
        super().__init__(message)
        self.step = step

class ContractError(RuntimeError):
    """Raised when an adjoint is requested without the forward state it relies on"""
    pass

class GradCheckError(AssertionError):
    """Raised when analytic and numeric gradients disagree or are not finite"""
    pass

def as_tensor(data, dtype=None):
    """Convert data to a dense row-major ndarray with a supported float dtype
    ----------

    Parameters
    ----------
    data : array_like
        Values to convert
    dtype : numpy dtype (optional)
        f32 or f64, default to the compute dtype

    Returns
    -------
    tensor : np.ndarray
        C-contiguous array
    """
    dtype = COMPUTE_DTYPE if dtype is None else np.dtype(dtype).type
    if dtype not in ALLOWED_DTYPES: raise ConfigurationError('Unsupported dtype', dtype)
    tensor = np.ascontiguousarray(data, dtype=dtype)
    if any(dim < 1 for dim in tensor.shape): raise DimensionError('Tensor shape entries must be >= 1, got ' + str(tensor.shape))
    return tensor

def check_shape(name : str, value : np.ndarray, expected : tuple):
    """Raise a DimensionError if value.shape differs from expected (None entries are wildcards)
    ----------
    """
    if len(value.shape) != len(expected) or\
        any((exp is not None) and (got != exp) for got, exp in zip(value.shape, expected)):
        raise DimensionError(name + ': expected shape ' + str(tuple(expected)) + ', got ' + str(value.shape))

def check_finite(name : str, value : np.ndarray, step : int = None):
    """Raise a NumericError if value holds NaN or infinity
    ----------
    """
    if not np.all(np.isfinite(value)):
        raise NumericError('Non-finite values in ' + name, step=step)

class Variable(object):
    """
    A Variable is a value tracked by a Tape: it receives an adjoint during backward
    ...

    Attributes
    ----------
    value : np.ndarray
        Current value
    grad : np.ndarray
        Accumulated adjoint, None until something flows into it
    name : str
        Optional identifier
    requires_grad : bool
        If False, producers skip computing its adjoint

    Public Methods
    -------
    accumulate()
        Add an adjoint contribution
    zero_grad()
        Reset the adjoint
    """

    def __init__(self, value, name : str = None, requires_grad : bool = False):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None

    def accumulate(self, grad : np.ndarray):
        """Add an adjoint contribution
        ----------

        Parameters
        ----------
        grad : np.ndarray
            Contribution, same shape as value
        """
        if grad.shape != self.value.shape:
            raise DimensionError('Adjoint of ' + str(self.name) + ' has shape ' + str(grad.shape) + ', value has ' + str(self.value.shape))
        if self.grad is None: self.grad = np.array(grad, dtype=self.value.dtype, copy=True)
        else: self.grad += grad

    def zero_grad(self):
        self.grad = None

    def get_shape(self):
        return self.value.shape

    def __repr__(self):
        return 'Variable(' + str(self.name) + ', shape=' + str(self.value.shape) + ')'

class Parameter(Variable):
    """
    A Parameter is a named learnable Variable. Its grad always exists and matches its value shape
    ...

    Public Methods
    -------
    zero_grad()
        Reset adjoint to zeros
    size()
        Number of scalars held
    """

    def __init__(self, value, name : str):
        if not name: raise ValueError('A parameter requires a name')
        super().__init__(value=value, name=name, requires_grad=True)
        self.zero_grad()

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def size(self):
        return int(self.value.size)

class Tape(object):
    """
    A Tape records adjoint closures in evaluation order and replays them in reverse
    ...

    Public Methods
    -------
    record()
        Append the adjoint closure of an operation
    backward()
        Seed an output adjoint and run every recorded closure in reverse order
    """

    def __init__(self):
        self.records = list()

    def record(self, adjoint):
        self.records.append(adjoint)

    def backward(self, output : Variable, seed : np.ndarray = None):
        """Propagate adjoints from output down to every tracked input
        ----------

        Parameters
        ----------
        output : Variable
            Variable to differentiate
        seed : np.ndarray (optional)
            Upstream adjoint of output, default to ones
        """
        output.grad = np.ones_like(output.value) if seed is None else np.array(seed, dtype=output.value.dtype)
        for adjoint in reversed(self.records): adjoint()
        self.records = list()

def tracked(tape : Tape, *variables):
    """Return True if an operation over variables must record its adjoint
    ----------
    """
    return (tape is not None) and any(variable.requires_grad for variable in variables if variable is not None)
