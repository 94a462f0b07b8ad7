import os, time, logging
from cmscan.numerics.tensor import ConfigurationError
from cmscan.numerics.rng import Rng, STREAM_INIT, STREAM_BATCH, STREAM_AUGMENT
from cmscan.fusion.model import SegmentationModel
from cmscan.fusion.optimizer import build_optimizer
from cmscan.fusion.trainer import Trainer, TrainState, evaluate_model
from cmscan.fusion.modelconfig import STAGE_STRIDES
from cmscan.metrics.classweight import class_weights, pixel_frequencies
from cmscan.runtime.runconfig import RunConfig, write_config
from cmscan.runtime.checkpoint import capture, restore, save_checkpoint, load_checkpoint
from cmscan.dataendpoint.dataendpoint import DataEndpoint

logger = logging.getLogger(__name__)

LAST_CHECKPOINT = 'last.ckpt'
BEST_CHECKPOINT = 'best.ckpt'
METRICS_FILE = 'metrics.jsonl'
LOG_EVERY = 10

def check_batch_statistics(config : RunConfig, height : int, width : int):
    """Training batch norm needs more than one value per channel at the coarsest stage
    ----------
    """
    coarsest = (height // STAGE_STRIDES[-1]) * (width // STAGE_STRIDES[-1])
    if config.train.batch_size * coarsest < 2:
        raise ConfigurationError('batch_size ' + str(config.train.batch_size) + ' at ' + str((height, width)) +\
            ' leaves a single value per channel at stride ' + str(STAGE_STRIDES[-1]) + ' for batch statistics')

def build_model(config : RunConfig):
    return SegmentationModel(config.model, Rng(config.seed).split(STREAM_INIT))

def miou_record(cm):
    per_class, miou = cm.iou()
    return {'miou': miou, 'iou': per_class, 'pixel_accuracy': cm.pixel_accuracy()}

class CmScanTrainer(object):
    """
    Main class of the training program: draws batches, steps the optimizer on the poly schedule,
    evaluates and checkpoints
    ...

    Attributes
    ----------
    config : RunConfig
        Resolved run configuration
    endpoint_pool : DataEndpointPool
        Training samples and metrics sink
    val_pool : DataEndpointPool
        Validation samples, may be None or empty

    Public Methods
    -------
    run()
        Train until max_iter and return the final evaluation
    """

    def __init__(self, **kwargs):
        req_attributes = ['config', 'endpoint_pool']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.val_pool = kwargs.get('val_pool', None)
        resume = kwargs.get('resume', None)

        train_size = self.endpoint_pool.get_size()
        if train_size == 0: raise ConfigurationError('The training split is empty')
        height, width = self.endpoint_pool.loader.load_sample(0).get_size()
        self.config.model.check_input_size(height, width)
        check_batch_statistics(self.config, height, width)
        self.config.train.resolve_max_iter(train_size)

        train = self.config.train
        self.model = build_model(self.config)
        self.optimizer = build_optimizer(train.optimizer, train.weight_decay, k=train.lookahead_k, alpha=train.lookahead_alpha)
        frequencies = pixel_frequencies(self.endpoint_pool.get_label_maps(), self.config.model.num_classes)
        self.state = TrainState(max_iter=train.max_iter, base_lr=train.base_lr, power=train.power)
        self.trainer = Trainer(model=self.model, optimizer=self.optimizer, class_weights=class_weights(frequencies), state=self.state)
        self.rng = Rng(self.config.seed)
        self.best_miou = kwargs.get('best_miou', None)
        if resume is not None: self.__resume(resume)

    def __resume(self, path : str):
        checkpoint = load_checkpoint(path)
        if checkpoint.step > self.state.max_iter:
            raise ConfigurationError('Checkpoint step ' + str(checkpoint.step) + ' exceeds max_iter ' + str(self.state.max_iter))
        restore(checkpoint, self.model, self.optimizer)
        self.state.step = checkpoint.step
        self.best_miou = checkpoint.extra.get('best_miou', None)
        logger.warning('Resuming from %s at step %d (lr %.3g)', path, self.state.step, self.state.get_lr() if not self.state.is_done() else 0.0)

    def run(self):
        """Run training
        ----------

        Returns
        -------
        summary : dict
            Final step, loss and train/val mIoU
        """
        write_config(self.config)
        launch_at = time.time_ns()
        loss = None
        while not self.state.is_done():
            loss = self.__iteration()
        summary = self.__evaluate_and_save()
        summary['loss'] = loss
        summary['seconds'] = (time.time_ns() - launch_at) / 10**9
        logger.info('Training done in %.1f s: train mIoU %.4f', summary['seconds'], summary['train']['miou'])
        return summary

    def __iteration(self):
        """Execute all actions related to one optimizer step
        ----------
        """
        step, train = self.state.step, self.config.train
        positions = self.endpoint_pool.sample_positions(step, train.batch_size, self.rng.split(STREAM_BATCH))
        rgb, thermal, labels = self.endpoint_pool.load_batch(positions, rng=self.rng.split(STREAM_AUGMENT, step), policy=train.augment)
        loss, lr = self.trainer.train_step(rgb, thermal, labels)
        self.endpoint_pool.store(DataEndpoint.record(step + 1, 'train', lr=lr, loss=loss))
        if (step + 1) % LOG_EVERY == 0 or step == 0: logger.info('step %d/%d loss %.4f lr %.3g', step + 1, self.state.max_iter, loss, lr)
        else: logger.debug('step %d/%d loss %.4f lr %.3g', step + 1, self.state.max_iter, loss, lr)
        if self.state.is_done(): return loss
        if train.eval_every and self.state.step % train.eval_every == 0: self.__evaluate_val()
        if train.checkpoint_every and self.state.step % train.checkpoint_every == 0: self.__save(LAST_CHECKPOINT)
        return loss

    def __has_val(self):
        return (self.val_pool is not None) and (self.val_pool.get_size() > 0)

    def __evaluate_val(self):
        """Evaluate on the validation split, keeping best.ckpt on the highest mIoU
        ----------
        """
        if not self.__has_val(): return None
        record = miou_record(evaluate_model(self.model, self.val_pool.iterate_batches(self.config.train.batch_size)))
        self.endpoint_pool.store(DataEndpoint.record(self.state.step, 'eval', split='val', **record))
        logger.info('step %d val mIoU %.4f', self.state.step, record['miou'])
        if (self.best_miou is None) or (record['miou'] > self.best_miou):
            self.best_miou = record['miou']
            self.__save(BEST_CHECKPOINT, extra={'val_miou': record['miou']})
        return record

    def __evaluate_and_save(self):
        summary = {'step': self.state.step}
        summary['val'] = self.__evaluate_val()
        train_record = miou_record(evaluate_model(self.model, self.endpoint_pool.iterate_batches(self.config.train.batch_size)))
        self.endpoint_pool.store(DataEndpoint.record(self.state.step, 'eval', split='train', **train_record))
        summary['train'] = train_record
        summary['checkpoint'] = self.__save(LAST_CHECKPOINT, extra={'train_miou': train_record['miou']})
        return summary

    def __save(self, name : str, extra : dict = None):
        extra = dict() if extra is None else dict(extra)
        if self.best_miou is not None: extra['best_miou'] = self.best_miou
        checkpoint = capture(self.model, self.state.step, self.config.to_dict(), optimizer=self.optimizer, extra=extra)
        path = save_checkpoint(checkpoint, self.config.get_path(name))
        self.endpoint_pool.store(DataEndpoint.record(self.state.step, 'checkpoint', path=os.path.basename(path)))
        return path
