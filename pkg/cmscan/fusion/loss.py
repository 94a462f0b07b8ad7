import numpy as np
from scipy.special import log_softmax
from cmscan.numerics.tensor import Variable, Tape, DimensionError, NumericError, tracked
from cmscan.numerics import primitives

IGNORE_INDEX = 255

class UndefinedLossError(NumericError):
    """Raised when every pixel of a batch is ignored"""
    pass

def _batched(logits : np.ndarray, labels : np.ndarray):
    if logits.ndim == 3: logits, labels = logits[None], labels[None]
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError('Logits ' + str(logits.shape) + ' and labels ' + str(labels.shape) + ' are incompatible')
    return logits, labels

def _scored(labels : np.ndarray, num_classes : int, ignore_index : int):
    mask = (labels != ignore_index)
    if np.any(labels[mask] >= num_classes):
        raise DimensionError('Labels hold class ids >= ' + str(num_classes))
    return mask, np.where(mask, labels, 0).astype(np.int64)

def weighted_cross_entropy(tape : Tape, logits : Variable, labels : np.ndarray, weights : np.ndarray, ignore_index : int = IGNORE_INDEX):
    """Class-weighted cross-entropy: sum over scored pixels of w[g] (-log softmax(logits)[g]),
    normalized by the sum of w[g] over the same pixels
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    logits : Variable
        [B, K, H, W] or [K, H, W]
    labels : np.ndarray
        [B, H, W] or [H, W] class ids, ignore_index excluded
    weights : np.ndarray
        [K] positive class weights
    ignore_index : int
        Label value excluded from the loss

    Returns
    -------
    loss : Variable
        Scalar
    """
    values, labels = _batched(logits.value, np.asarray(labels))
    num_classes = values.shape[1]
    weights = np.asarray(weights, dtype=values.dtype)
    if weights.shape != (num_classes,): raise DimensionError('Class weights ' + str(weights.shape) + ' do not match ' + str(num_classes) + ' classes')
    mask, targets = _scored(labels, num_classes, ignore_index)
    if not np.any(mask): raise UndefinedLossError('Cross-entropy is undefined: every pixel is ignored')
    log_probs = log_softmax(values, axis=1)
    pixel_weights = weights[targets] * mask
    total_weight = pixel_weights.sum()
    nll = -np.take_along_axis(log_probs, targets[:, None], axis=1)[:, 0]
    out = Variable(np.asarray((pixel_weights * nll).sum() / total_weight, dtype=values.dtype), requires_grad=tracked(tape, logits))

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            grad = np.exp(log_probs)
            np.put_along_axis(grad, targets[:, None], np.take_along_axis(grad, targets[:, None], axis=1) - 1, axis=1)
            grad = grad * (pixel_weights / total_weight)[:, None] * out.grad
            logits.accumulate(grad.reshape(logits.value.shape))
        tape.record(adjoint)
    return out

def dice_loss(tape : Tape, probs : Variable, labels : np.ndarray, ignore_index : int = IGNORE_INDEX, eps : float = 1.0):
    """Soft dice loss 1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps), ignored pixels excluded
    ----------

    Parameters
    ----------
    tape : Tape
        Tape recording adjoints, None for inference
    probs : Variable
        Softmax outputs [B, K, H, W] or [K, H, W]
    labels : np.ndarray
        Class ids
    ignore_index : int
        Label value excluded from the sums
    eps : float
        Smoothing, keeps empty classes at dice 1

    Returns
    -------
    loss : Variable
        Scalar
    """
    values, labels = _batched(probs.value, np.asarray(labels))
    num_classes = values.shape[1]
    mask, targets = _scored(labels, num_classes, ignore_index)
    mask = mask[:, None].astype(values.dtype)
    onehot = (targets[:, None] == np.arange(num_classes)[None, :, None, None]).astype(values.dtype) * mask
    axes = (0, 2, 3)
    intersection = (values * onehot).sum(axis=axes)
    denominator = (values * mask).sum(axis=axes) + onehot.sum(axis=axes) + eps
    dice = (2 * intersection + eps) / denominator
    out = Variable(np.asarray(1 - dice.mean(), dtype=values.dtype), requires_grad=tracked(tape, probs))

    if out.requires_grad:
        def adjoint():
            if out.grad is None: return
            shape = (1, num_classes, 1, 1)
            ddice = mask * (2 * onehot * denominator.reshape(shape) - (2 * intersection + eps).reshape(shape)) / (denominator ** 2).reshape(shape)
            probs.accumulate((-ddice / num_classes * out.grad).reshape(probs.value.shape))
        tape.record(adjoint)
    return out

def total_loss(tape : Tape, logits : Variable, labels : np.ndarray, weights : np.ndarray, ignore_index : int = IGNORE_INDEX):
    """Weighted cross-entropy plus dice on the softmax probabilities, unit coefficients
    ----------
    """
    cross_entropy = weighted_cross_entropy(tape, logits, labels, weights, ignore_index)
    dice = dice_loss(tape, primitives.softmax(tape, logits, axis=-3), labels, ignore_index)
    return primitives.add(tape, cross_entropy, dice)
