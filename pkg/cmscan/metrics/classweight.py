import numpy as np
from cmscan.metrics.confusion import IGNORE_INDEX

def class_weights(freqs : np.ndarray, offset : float = 1.02):
    """Inverse-log frequency weights w_c = 1 / ln(offset + p_c), bounded for absent classes
    ----------

    Parameters
    ----------
    freqs : np.ndarray
        [K] pixel frequencies, non-negative, summing to 1

    Returns
    -------
    weights : np.ndarray
        [K]
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    if np.any(freqs < 0): raise ValueError('Class frequencies must be >= 0')
    return 1.0 / np.log(offset + freqs)

def pixel_frequencies(label_maps, num_classes : int, ignore_index : int = IGNORE_INDEX):
    """Fraction of scored pixels per class over an iterable of label maps. Uniform if nothing is scored
    ----------
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_maps:
        labels = np.asarray(labels)
        counts += np.bincount(labels[labels != ignore_index].astype(np.int64), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0: return np.full(num_classes, 1.0 / num_classes)
    return counts / total
