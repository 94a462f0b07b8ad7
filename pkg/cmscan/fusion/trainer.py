import logging
import numpy as np
from cmscan.numerics.tensor import Variable, Tape, ConfigurationError, as_tensor, check_finite
from cmscan.fusion.model import SegmentationModel
from cmscan.fusion.loss import total_loss
from cmscan.fusion.optimizer import Optimizer, poly_lr
from cmscan.metrics.confusion import ConfusionMatrix

logger = logging.getLogger(__name__)

class EmptyEvaluationError(ConfigurationError):
    """Raised when a model is evaluated on an empty dataset"""
    pass

class TrainState(object):
    """
    Progress of a training run
    ...

    Attributes
    ----------
    step : int
        Optimizer steps applied, 0 <= step <= max_iter
    max_iter : int
        Total steps of the schedule
    base_lr : float
        Learning rate at step 0
    power : float
        Polynomial decay power
    """

    def __init__(self, **kwargs):
        req_attributes = ['max_iter', 'base_lr']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.step = kwargs.get('step', 0)
        self.power = kwargs.get('power', 0.9)
        if not (0 <= self.step <= self.max_iter): raise ConfigurationError('Train state step ' + str(self.step) + ' outside [0, ' + str(self.max_iter) + ']')

    def get_lr(self):
        return poly_lr(self.step, self.max_iter, self.base_lr, self.power)

    def is_done(self):
        return self.step >= self.max_iter

class Trainer(object):
    """
    Forward, loss, backward and update of a SegmentationModel
    ...

    Public Methods
    -------
    train_step()
        One optimizer step on a batch
    evaluate()
        Confusion matrix of the model over batches
    """

    def __init__(self, **kwargs):
        req_attributes = ['model', 'optimizer', 'class_weights', 'state']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.params = self.model.parameters()

    def train_step(self, rgb : np.ndarray, thermal : np.ndarray, labels : np.ndarray):
        """Apply one optimizer step with lr = poly_lr(step)
        ----------

        Parameters
        ----------
        rgb, thermal : np.ndarray
            [B, 3, H, W]
        labels : np.ndarray
            [B, H, W]

        Returns
        -------
        loss : float
            Loss before the update
        lr : float
            Learning rate applied
        """
        if self.state.is_done(): raise ConfigurationError('Training already reached max_iter ' + str(self.state.max_iter))
        dtype = self.params[0].value.dtype
        tape = Tape()
        self.model.zero_grad()
        logits = self.model.forward(tape, Variable(as_tensor(rgb, dtype)), Variable(as_tensor(thermal, dtype)), train=True)
        loss = total_loss(tape, logits, labels, self.class_weights)
        check_finite('loss', loss.value, step=self.state.step)
        tape.backward(loss)
        lr = self.state.get_lr()
        self.optimizer.step(self.params, lr, step_index=self.state.step)
        self.state.step += 1
        return float(loss.value), lr

    def evaluate(self, batches):
        return evaluate_model(self.model, batches)

def evaluate_model(model : SegmentationModel, batches):
    """Accumulate the eval-mode predictions of model into a confusion matrix
    ----------

    Parameters
    ----------
    model : SegmentationModel
        Model to evaluate
    batches : iterable
        (rgb, thermal, labels) batches

    Returns
    -------
    cm : ConfusionMatrix
        Accumulated counts, cm.iou() gives per-class IoU and mIoU
    """
    cm = ConfusionMatrix(model.config.num_classes)
    seen = 0
    for rgb, thermal, labels in batches:
        cm.update(model.predict(rgb, thermal), labels)
        seen += len(labels)
    if seen == 0: raise EmptyEvaluationError('Cannot evaluate on an empty dataset')
    logger.debug('Evaluated %d samples, %d scored pixels', seen, cm.total())
    return cm
