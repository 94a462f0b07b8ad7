import math
import numpy as np
from json import JSONEncoder
from cmscan.runtime.configsection import ConfigSection

class ConfusionMatrixEncoder(JSONEncoder):
    """
    Class to specify how to convert a ConfusionMatrix to JSON
    ...

    Public Methods
    -------
    default()
        json conversion
    """

    def default(self, o):
        """Implements Conversion strategy
        ----------

        Parameters
        ----------
        o : object
            object to convert
        """
        from cmscan.metrics.confusion import ConfusionMatrix, EmptyConfusionError
        if type(o) is not ConfusionMatrix:
            return
        as_dict = {'num_classes': o.num_classes, 'counts': o.counts.tolist(), 'pixel_accuracy': o.pixel_accuracy()}
        try:
            per_class, miou = o.iou()
            as_dict['iou'] = [None if math.isnan(value) else float(value) for value in per_class]
            as_dict['miou'] = miou
        except EmptyConfusionError:
            as_dict['iou'], as_dict['miou'] = None, None
        return as_dict

class GlobalEncoder(JSONEncoder):
    """
    Class to specify how to convert run objects (config sections, reports, confusion matrices,
    numpy values) to JSON
    ...

    Public Methods
    -------
    default()
        json conversion
    """

    def default(self, o, *args, **kwargs):
        """Implements Conversion strategy
        ----------

        Parameters
        ----------
        o : object
            object to convert
        """
        from cmscan.metrics.confusion import ConfusionMatrix # avoid circular import
        if isinstance(o, ConfigSection):
            return o.to_dict()
        elif type(o) is ConfusionMatrix:
            return ConfusionMatrixEncoder(*args, **kwargs).default(o)
        elif isinstance(o, np.ndarray):
            return [None if (isinstance(value, float) and math.isnan(value)) else value for value in o.tolist()] if o.ndim == 1 else o.tolist()
        elif isinstance(o, np.integer):
            return int(o)
        elif isinstance(o, np.floating):
            return None if np.isnan(o) else float(o)
        elif isinstance(o, np.bool_):
            return bool(o)
        elif hasattr(o, 'to_dict'):
            return o.to_dict()
        else:
            raise TypeError(f'Object of type {o.__class__.__name__} is not JSON serializable')
