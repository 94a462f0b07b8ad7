import os, json, math, logging
from cmscan.runtime.configsection import ConfigSection, ConfigError
from cmscan.fusion.modelconfig import ModelConfig
from cmscan.dataendpoint.scene import SceneSpec
from cmscan.dataendpoint.augment import AugmentPolicy
from cmscan.bench.scaling import MIN_SIZES, MIN_REPS

logger = logging.getLogger(__name__)

CONFIG_FILE = 'config.json'
OPTIMIZERS = ('adam', 'adam+lookahead')
SOURCES = ('synthetic', 'directory')
DEFAULT_OUTPUT = 'runs'

class TrainConfig(ConfigSection):
    """
    Training schedule. When set, epochs override max_iter: they are translated to
    max_iter once the training split size is known
    ...

    Attributes
    ----------
    batch_size : int
        Pairs per step
    max_iter, epochs : int
        Schedule length
    base_lr, power : float
        Poly schedule
    weight_decay : float
        Decoupled decay of every parameter
    optimizer : str
        adam or adam+lookahead
    eval_every, checkpoint_every : int
        Period in steps, 0 to run only at the end
    """

    section = 'train'
    defaults = {'batch_size': 2, 'max_iter': 300, 'epochs': None, 'base_lr': 1e-4, 'power': 0.9, 'weight_decay': 5e-4,\
        'optimizer': 'adam+lookahead', 'lookahead_k': 5, 'lookahead_alpha': 0.5, 'eval_every': 0, 'checkpoint_every': 0}
    nested = {'augment': AugmentPolicy}

    def validate(self):
        self.check_positive('batch_size')
        self.check_positive('max_iter')
        if self.epochs is not None: self.check_positive('epochs')
        self.check_positive('base_lr')
        self.check_positive('power', allow_zero=True)
        self.check_positive('weight_decay', allow_zero=True)
        self.check_choice('optimizer', OPTIMIZERS)
        self.check_positive('lookahead_k')
        self.check_positive('lookahead_alpha')
        self.check_positive('eval_every', allow_zero=True)
        self.check_positive('checkpoint_every', allow_zero=True)

    def resolve_max_iter(self, train_size : int):
        """Translate epochs into optimizer steps over a training split of train_size pairs
        ----------
        """
        if self.epochs is not None:
            self.max_iter = max(1, math.ceil(self.epochs * train_size / self.batch_size))
            self.epochs = None
        return self.max_iter

class DataConfig(ConfigSection):
    """
    Where samples come from: synthetic scenes or a dataset directory
    ...
    """

    section = 'data'
    defaults = {'source': 'synthetic', 'root': None, 'count': 16, 'split_ratios': [6, 1, 1], 'zero_thermal': False}
    nested = {'scene': SceneSpec}

    def validate(self):
        self.check_choice('source', SOURCES)
        if self.source == 'directory' and self.root is None: self.fail('a directory source needs a root')
        self.check_positive('count', allow_zero=True)
        if len(self.split_ratios) != 3 or any(isinstance(r, bool) or not isinstance(r, int) or r < 0 for r in self.split_ratios) or sum(self.split_ratios) < 1:
            self.fail('split_ratios must be 3 non-negative integers with a positive sum, got ' + repr(self.split_ratios))
        if self.root is not None: self.root = os.path.abspath(self.root)

class BenchConfig(ConfigSection):
    """
    Runtime-scaling grids (square input sides) and timing settings
    ...
    """

    section = 'bench'
    defaults = {'scan_sizes': [32, 64, 128, 256], 'attention_sizes': [24, 32, 48, 64], 'reps': 5, 'warmup': 1,\
        'channels': 16, 'state_dim': 16, 'parallel': False, 'plot': True}

    def validate(self):
        for key in ('scan_sizes', 'attention_sizes'):
            sizes = getattr(self, key)
            if len(sizes) < MIN_SIZES or any(b <= a for a, b in zip(sizes, sizes[1:])):
                self.fail(key + ' must hold at least ' + str(MIN_SIZES) + ' strictly increasing sides, got ' + repr(sizes))
        if self.reps < MIN_REPS: self.fail('reps must be >= ' + str(MIN_REPS) + ', got ' + repr(self.reps))
        self.check_positive('warmup', allow_zero=True)
        self.check_positive('channels')
        self.check_positive('state_dim')

class RunConfig(ConfigSection):
    """
    Fully resolved configuration of one run
    ...

    Attributes
    ----------
    seed : int
        Root of every random stream
    output_dir : str
        Absolute directory receiving checkpoints, metrics and reports
    """

    section = 'run'
    defaults = {'seed': 0, 'output_dir': None}
    nested = {'model': ModelConfig, 'train': TrainConfig, 'data': DataConfig, 'bench': BenchConfig}

    def validate(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0: self.fail('seed must be a non-negative integer, got ' + repr(self.seed))
        if self.output_dir is None: self.output_dir = os.path.join(os.getenv('CMSCAN_OUTPUT') or DEFAULT_OUTPUT, 'seed' + str(self.seed))
        self.output_dir = os.path.abspath(self.output_dir)
        if self.data.scene.num_classes != self.model.num_classes and self.data.source == 'synthetic':
            self.fail('data.scene.num_classes (' + str(self.data.scene.num_classes) + ') differs from model.num_classes (' + str(self.model.num_classes) + ')')

    def get_path(self, name : str):
        return os.path.join(self.output_dir, name)

def load_config(path : str = None, seed : int = None, output_dir : str = None):
    """Parse a JSON run configuration, applying command-line overrides
    ----------

    Parameters
    ----------
    path : str (optional)
        JSON file, None for the defaults
    seed : int (optional)
        Overrides the configured seed
    output_dir : str (optional)
        Overrides the configured output directory

    Raises
    -------
    ConfigError
        Malformed JSON, unknown keys or invalid values
    OSError
        Unreadable file

    Returns
    -------
    config : RunConfig
        Validated configuration, paths absolute
    """
    data = dict()
    if path is not None:
        with open(path, 'r') as f:
            try:
                data = json.load(f)
            except ValueError as err:
                raise ConfigError('Config ' + path + ' is not valid JSON: ' + str(err))
        if not isinstance(data, dict): raise ConfigError('Config ' + path + ' must hold a JSON object')
    if seed is not None: data['seed'] = seed
    if output_dir is not None: data['output_dir'] = output_dir
    return RunConfig.from_dict(data)

def write_config(config : RunConfig, directory : str = None):
    """Write the resolved config as config.json, re-running from it reproduces the run
    ----------
    """
    directory = config.output_dir if directory is None else directory
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, CONFIG_FILE)
    with open(path, 'w') as f: f.write(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    logger.debug('Resolved config written to %s', path)
    return path
