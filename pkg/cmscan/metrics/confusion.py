import numpy as np
from cmscan.numerics.tensor import DimensionError

IGNORE_INDEX = 255

class LabelRangeError(ValueError):
    """Raised when a prediction holds a class id outside [0, K)"""
    pass

class EmptyConfusionError(ValueError):
    """Raised when no class has a defined IoU"""
    pass

class ConfusionMatrix(object):
    """
    K x K pixel counts, rows are ground truth classes and columns predicted classes
    ...

    Attributes
    ----------
    num_classes : int
        K
    counts : np.ndarray
        [K, K] int64

    Public Methods
    -------
    update()
        Accumulate a (prediction, ground truth) pair
    iou()
        Per-class IoU and mIoU
    pixel_accuracy()
        Fraction of scored pixels predicted correctly
    total()
        Number of scored pixels
    """

    def __init__(self, num_classes : int):
        if num_classes < 1: raise ValueError('A confusion matrix needs at least one class')
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred : np.ndarray, gt : np.ndarray, ignore_index : int = IGNORE_INDEX):
        """Count every pixel whose ground truth is not ignored
        ----------

        Parameters
        ----------
        pred : np.ndarray
            Predicted class ids
        gt : np.ndarray
            Ground truth class ids, same shape, ignore_index excluded

        Returns
        -------
        self : ConfusionMatrix
        """
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape: raise DimensionError('Prediction ' + str(pred.shape) + ' and ground truth ' + str(gt.shape) + ' differ')
        if np.any(pred.astype(np.int64) >= self.num_classes) or np.any(pred.astype(np.int64) < 0):
            raise LabelRangeError('Prediction holds class ids outside [0, ' + str(self.num_classes) + ')')
        scored = (gt != ignore_index)
        gt_ids, pred_ids = gt[scored].astype(np.int64), pred[scored].astype(np.int64)
        if np.any(gt_ids >= self.num_classes): raise LabelRangeError('Ground truth holds class ids >= ' + str(self.num_classes))
        self.counts += np.bincount(self.num_classes * gt_ids + pred_ids, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        return self

    def iou(self):
        """IoU_c = TP / (TP + FP + FN). Classes with a zero denominator are NaN and excluded from the mean
        ----------

        Returns
        -------
        per_class : np.ndarray
            [K]
        miou : float
        """
        true_positive = np.diag(self.counts).astype(np.float64)
        denominator = self.counts.sum(axis=0) + self.counts.sum(axis=1) - true_positive
        defined = denominator > 0
        if not np.any(defined): raise EmptyConfusionError('IoU is undefined for every class')
        per_class = np.full(self.num_classes, np.nan)
        per_class[defined] = true_positive[defined] / denominator[defined]
        return per_class, float(per_class[defined].mean())

    def pixel_accuracy(self):
        total = self.total()
        return float(np.trace(self.counts) / total) if total > 0 else float('nan')

    def total(self):
        return int(self.counts.sum())

    def merge(self, other):
        self.counts += other.counts
        return self

def cm_update(cm : ConfusionMatrix, pred : np.ndarray, gt : np.ndarray):
    return cm.update(pred, gt)

def iou_from_cm(cm : ConfusionMatrix):
    return cm.iou()
