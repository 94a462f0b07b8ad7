import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from opt_einsum import contract
from scipy.special import expit, softmax as scipy_softmax
from cmscan.numerics.tensor import Variable, Tape, DimensionError, ConfigurationError, tracked

ACTIVATIONS = ('silu', 'relu', 'softplus')
UPSAMPLE_FACTORS = (2, 4, 8, 16, 32)

class DegenerateBatchError(ConfigurationError):
    """Raised when batch statistics are requested over a single value per channel"""
    pass

def _output(tape : Tape, value : np.ndarray, *inputs):
    return Variable(value, requires_grad=tracked(tape, *inputs))

def linear(tape : Tape, x : Variable, weight : Variable, bias : Variable = None):
    """Affine map over the last axis: y[..., o] = sum_i W[o, i] x[..., i] + b[o]
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    x : Variable
        Input [..., Cin]
    weight : Variable
        Weight [Cout, Cin]
    bias : Variable (optional)
        Bias [Cout]

    Returns
    -------
    y : Variable
        Output [..., Cout]
    """
    x_val, w_val = x.value, weight.value
    if (w_val.ndim != 2) or (x_val.shape[-1] != w_val.shape[1]):
        raise DimensionError('linear: input shape ' + str(x_val.shape) + ' incompatible with weight shape ' + str(w_val.shape))
    if (bias is not None) and (bias.value.shape != (w_val.shape[0],)):
        raise DimensionError('linear: bias shape ' + str(bias.value.shape) + ' incompatible with weight shape ' + str(w_val.shape))
    y_val = x_val @ w_val.T
    if bias is not None: y_val = y_val + bias.value
    out = _output(tape, y_val, x, weight, bias)

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            grad = out.grad
            flat_grad = grad.reshape(-1, grad.shape[-1])
            if x.requires_grad: x.accumulate(grad @ w_val)
            if weight.requires_grad: weight.accumulate(flat_grad.T @ x_val.reshape(-1, x_val.shape[-1]))
            if (bias is not None) and bias.requires_grad: bias.accumulate(flat_grad.sum(axis=0))
        tape.record(adjoint)
    return out

def conv2d(tape : Tape, x : Variable, kernel : Variable, bias : Variable = None, stride : int = 1, pad : int = None, groups : int = 1):
    """Cross-correlation with zero padding over [B, Cin, H, W] (or [Cin, H, W]) inputs
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    x : Variable
        Input feature map
    kernel : Variable
        Kernel [Cout, Cin/groups, k, k], k in {1, 3}
    bias : Variable (optional)
        Bias [Cout]
    stride : int
        1 or 2
    pad : int (optional)
        Zero padding, default to k//2
    groups : int
        Channel groups, groups == Cin gives a depth-wise convolution

    Returns
    -------
    y : Variable
        Output [B, Cout, H', W'] with H' = floor((H + 2 pad - k)/stride) + 1
    """
    k_val = kernel.value
    if k_val.ndim != 4 or k_val.shape[2] != k_val.shape[3]: raise DimensionError('conv2d: kernel shape ' + str(k_val.shape) + ' is not [Cout, Cin/groups, k, k]')
    k = k_val.shape[2]
    if k not in (1, 3): raise ConfigurationError('conv2d: kernel size must be 1 or 3, got ' + str(k))
    if stride not in (1, 2): raise ConfigurationError('conv2d: stride must be 1 or 2, got ' + str(stride))
    pad = k // 2 if pad is None else pad
    squeeze = (x.value.ndim == 3)
    x_val = x.value[None] if squeeze else x.value
    if x_val.ndim != 4: raise DimensionError('conv2d: input shape ' + str(x.value.shape) + ' is not [B, Cin, H, W]')
    batch, c_in, height, width = x_val.shape
    c_out = k_val.shape[0]
    if (groups < 1) or (c_in % groups != 0) or (c_out % groups != 0):
        raise ConfigurationError('conv2d: ' + str(c_in) + ' input and ' + str(c_out) + ' output channels are not divisible by ' + str(groups) + ' groups')
    if k_val.shape[1] != c_in // groups:
        raise DimensionError('conv2d: input shape ' + str(x.value.shape) + ' incompatible with kernel shape ' + str(k_val.shape))
    if (bias is not None) and (bias.value.shape != (c_out,)):
        raise DimensionError('conv2d: bias shape ' + str(bias.value.shape) + ' incompatible with kernel shape ' + str(k_val.shape))

    h_out = (height + 2*pad - k)//stride + 1
    w_out = (width + 2*pad - k)//stride + 1
    c_group, o_group = c_in // groups, c_out // groups
    padded = np.pad(x_val, ((0,0), (0,0), (pad,pad), (pad,pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows.reshape(batch, groups, c_group, h_out, w_out, k, k)
    grouped_kernel = k_val.reshape(groups, o_group, c_group, k, k)
    y_val = contract('bgchwij,gocij->bgohw', windows, grouped_kernel).reshape(batch, c_out, h_out, w_out)
    if bias is not None: y_val = y_val + bias.value[None, :, None, None]
    if squeeze: y_val = y_val[0]
    out = _output(tape, y_val, x, kernel, bias)

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            grad = out.grad[None] if squeeze else out.grad
            grouped_grad = grad.reshape(batch, groups, o_group, h_out, w_out)
            if kernel.requires_grad:
                kernel.accumulate(contract('bgchwij,bgohw->gocij', windows, grouped_grad).reshape(k_val.shape))
            if (bias is not None) and bias.requires_grad: bias.accumulate(grad.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                grad_windows = contract('gocij,bgohw->bgchwij', grouped_kernel, grouped_grad).reshape(batch, c_in, h_out, w_out, k, k)
                grad_padded = np.zeros_like(padded)
                for i in range(k):
                    for j in range(k):
                        grad_padded[:, :, i:i + stride*(h_out-1) + 1:stride, j:j + stride*(w_out-1) + 1:stride] += grad_windows[..., i, j]
                grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width]
                x.accumulate(grad_x[0] if squeeze else grad_x)
        tape.record(adjoint)
    return out

def batchnorm2d(tape : Tape, x : Variable, gamma : Variable, beta : Variable, running_mean : np.ndarray, running_var : np.ndarray,\
        train : bool, momentum : float = 0.1, eps : float = 1e-5):
    """Per-channel normalization of [B, C, H, W]. Train mode uses batch statistics and updates the running ones in place
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    x : Variable
        Input [B, C, H, W]
    gamma, beta : Variable
        Affine parameters [C]
    running_mean, running_var : np.ndarray
        Running statistics [C], updated in train mode
    train : bool
        Train or eval mode
    momentum : float
        Running statistics update rate
    eps : float
        Variance floor, > 0

    Returns
    -------
    y : Variable
        Normalized output
    """
    x_val = x.value
    if x_val.ndim != 4: raise DimensionError('batchnorm2d: input shape ' + str(x_val.shape) + ' is not [B, C, H, W]')
    channels = x_val.shape[1]
    for name, stat in (('gamma', gamma.value), ('beta', beta.value), ('running_mean', running_mean), ('running_var', running_var)):
        if stat.shape != (channels,): raise DimensionError('batchnorm2d: ' + name + ' shape ' + str(stat.shape) + ' incompatible with input shape ' + str(x_val.shape))
    if eps <= 0: raise ConfigurationError('batchnorm2d: eps must be > 0')
    axes = (0, 2, 3)
    count = x_val.shape[0] * x_val.shape[2] * x_val.shape[3]
    if train:
        if count == 1: raise DegenerateBatchError('batchnorm2d: train mode needs more than one value per channel, got input shape ' + str(x_val.shape))
        mean = x_val.mean(axis=axes)
        var = x_val.var(axis=axes)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        running_var *= (1 - momentum)
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean.astype(x_val.dtype)
        var = running_var.astype(x_val.dtype)
    inv_std = (1.0 / np.sqrt(var + eps))[None, :, None, None]
    x_hat = (x_val - mean[None, :, None, None]) * inv_std
    y_val = gamma.value[None, :, None, None] * x_hat + beta.value[None, :, None, None]
    out = _output(tape, y_val, x, gamma, beta)

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            grad = out.grad
            if gamma.requires_grad: gamma.accumulate((grad * x_hat).sum(axis=axes))
            if beta.requires_grad: beta.accumulate(grad.sum(axis=axes))
            if x.requires_grad:
                grad_hat = grad * gamma.value[None, :, None, None]
                if train:
                    grad_x = (inv_std / count) * (count * grad_hat - grad_hat.sum(axis=axes, keepdims=True)\
                        - x_hat * (grad_hat * x_hat).sum(axis=axes, keepdims=True))
                else:
                    grad_x = grad_hat * inv_std
                x.accumulate(grad_x)
        tape.record(adjoint)
    return out

def layernorm(tape : Tape, x : Variable, gamma : Variable, beta : Variable, eps : float = 1e-5):
    """Zero-mean unit-variance normalization over the last axis, followed by an affine map
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    x : Variable
        Input [..., C]
    gamma, beta : Variable
        Affine parameters [C]
    eps : float
        Variance floor, > 0

    Returns
    -------
    y : Variable
        Normalized output
    """
    x_val = x.value
    channels = x_val.shape[-1]
    if gamma.value.shape != (channels,) or beta.value.shape != (channels,):
        raise DimensionError('layernorm: affine shape ' + str(gamma.value.shape) + ' incompatible with input shape ' + str(x_val.shape))
    if eps <= 0: raise ConfigurationError('layernorm: eps must be > 0')
    mean = x_val.mean(axis=-1, keepdims=True)
    var = x_val.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x_val - mean) * inv_std
    y_val = x_hat * gamma.value + beta.value
    out = _output(tape, y_val, x, gamma, beta)

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            grad = out.grad
            if gamma.requires_grad: gamma.accumulate((grad * x_hat).reshape(-1, channels).sum(axis=0))
            if beta.requires_grad: beta.accumulate(grad.reshape(-1, channels).sum(axis=0))
            if x.requires_grad:
                grad_hat = grad * gamma.value
                x.accumulate((inv_std / channels) * (channels * grad_hat - grad_hat.sum(axis=-1, keepdims=True)\
                    - x_hat * (grad_hat * x_hat).sum(axis=-1, keepdims=True)))
        tape.record(adjoint)
    return out

def activation(tape : Tape, x : Variable, kind : str):
    """Elementwise nonlinearity: silu(x) = x sigmoid(x), relu, softplus(x) = ln(1 + e^x)
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    x : Variable
        Input
    kind : str
        One of silu, relu, softplus

    Returns
    -------
    y : Variable
        Output, same shape
    """
    x_val = x.value
    if kind == 'silu':
        sig = expit(x_val)
        y_val = x_val * sig
        derivative = lambda: sig * (1 + x_val * (1 - sig))
    elif kind == 'relu':
        y_val = np.maximum(x_val, 0)
        derivative = lambda: (x_val > 0).astype(x_val.dtype)
    elif kind == 'softplus':
        y_val = np.logaddexp(0, x_val).astype(x_val.dtype)
        derivative = lambda: expit(x_val)
    else:
        raise ConfigurationError('Unknown activation ' + str(kind) + ', expected one of ' + str(ACTIVATIONS))
    out = _output(tape, y_val, x)

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            x.accumulate(out.grad * derivative())
        tape.record(adjoint)
    return out

def interpolation_matrix(size : int, factor : int, dtype=np.float32):
    """Half-pixel-center linear interpolation matrix [factor*size, size], edge-clamped
    ----------

    src = (dst + 0.5)/factor - 0.5, clamped to [0, size-1]
    """
    dst = np.arange(size * factor)
    src = np.clip((dst + 0.5) / factor - 0.5, 0, size - 1)
    low = np.floor(src).astype(np.int64)
    high = np.minimum(low + 1, size - 1)
    weight_high = src - low
    matrix = np.zeros((size * factor, size), dtype=np.float64)
    np.add.at(matrix, (dst, low), 1 - weight_high)
    np.add.at(matrix, (dst, high), weight_high)
    return matrix.astype(dtype)

def bilinear_upsample(tape : Tape, x : Variable, factor : int):
    """Bilinear upsampling of the two trailing axes by an integer factor
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    x : Variable
        Input [..., H, W]
    factor : int
        One of 2, 4, 8, 16, 32

    Returns
    -------
    y : Variable
        Output [..., factor*H, factor*W]
    """
    if factor not in UPSAMPLE_FACTORS: raise ConfigurationError('bilinear_upsample: factor must be one of ' + str(UPSAMPLE_FACTORS) + ', got ' + str(factor))
    x_val = x.value
    rows = interpolation_matrix(x_val.shape[-2], factor, x_val.dtype)
    cols = interpolation_matrix(x_val.shape[-1], factor, x_val.dtype)
    y_val = np.matmul(np.matmul(rows, x_val), cols.T)
    out = _output(tape, y_val, x)

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            x.accumulate(np.matmul(np.matmul(rows.T, out.grad), cols))
        tape.record(adjoint)
    return out

def add(tape : Tape, a : Variable, b : Variable):
    """Elementwise sum of two same-shape variables
    ----------
    """
    if a.value.shape != b.value.shape: raise DimensionError('add: shapes ' + str(a.value.shape) + ' and ' + str(b.value.shape) + ' differ')
    out = _output(tape, a.value + b.value, a, b)
    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            if a.requires_grad: a.accumulate(out.grad)
            if b.requires_grad: b.accumulate(out.grad)
        tape.record(adjoint)
    return out

def mul(tape : Tape, a : Variable, b : Variable):
    """Elementwise product of two same-shape variables
    ----------
    """
    if a.value.shape != b.value.shape: raise DimensionError('mul: shapes ' + str(a.value.shape) + ' and ' + str(b.value.shape) + ' differ')
    a_val, b_val = a.value, b.value
    out = _output(tape, a_val * b_val, a, b)
    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            if a.requires_grad: a.accumulate(out.grad * b_val)
            if b.requires_grad: b.accumulate(out.grad * a_val)
        tape.record(adjoint)
    return out

def concat(tape : Tape, variables : list, axis : int = 1):
    """Concatenate variables along axis
    ----------
    """
    sizes = [variable.value.shape[axis] for variable in variables]
    out = _output(tape, np.concatenate([variable.value for variable in variables], axis=axis), *variables)
    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
            for variable, piece in zip(variables, pieces):
                if variable.requires_grad: variable.accumulate(piece)
        tape.record(adjoint)
    return out

def permute(tape : Tape, x : Variable, axes : tuple):
    """Axis permutation, output is made contiguous
    ----------
    """
    inverse = tuple(np.argsort(axes))
    out = _output(tape, np.ascontiguousarray(np.transpose(x.value, axes)), x)
    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            x.accumulate(np.transpose(out.grad, inverse))
        tape.record(adjoint)
    return out

def softmax(tape : Tape, x : Variable, axis : int = 1):
    """Softmax along axis
    ----------
    """
    probs = scipy_softmax(x.value, axis=axis).astype(x.value.dtype)
    out = _output(tape, probs, x)
    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            grad = out.grad
            x.accumulate(probs * (grad - (grad * probs).sum(axis=axis, keepdims=True)))
        tape.record(adjoint)
    return out
