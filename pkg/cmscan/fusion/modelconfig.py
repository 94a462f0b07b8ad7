from cmscan.numerics.tensor import ConfigurationError
from cmscan.runtime.configsection import ConfigSection

STAGE_STRIDES = (4, 8, 16, 32)
FUSIONS = ('cmssa', 'no_scan', 'addition', 'intra_scan')
GATE_MODES = ('mul', 'add')
FUSE_INPUTS = ('gated', 'raw')

class SsmConfig(ConfigSection):
    """
    Settings of the cross-modal selective scan inside each fusion block
    ...

    Attributes
    ----------
    state_dim : int
        Hidden state size N
    d_rank : int
        Low-rank step projection size, None for max(1, C/16)
    expand_factor : int
        Scan width C_e = expand_factor * C
    delta_softplus : bool
        Apply a softplus on the step size
    strict_interleave : bool
        Single chain over the interleaved tokens instead of two swapped chains
    parallel : bool
        Evaluate the recurrence with the associative scan
    """

    section = 'ssm'
    defaults = {'state_dim': 16, 'd_rank': None, 'expand_factor': 1, 'delta_softplus': True,\
        'strict_interleave': False, 'parallel': False}

    def validate(self):
        self.check_positive('state_dim')
        self.check_positive('expand_factor')
        if self.d_rank is not None: self.check_positive('d_rank')
        for key in ('delta_softplus', 'strict_interleave', 'parallel'):
            if not isinstance(getattr(self, key), bool): self.fail(key + ' must be a boolean')

    def get_rank(self, channels : int):
        return self.d_rank if self.d_rank is not None else max(1, channels // 16)

class ModelConfig(ConfigSection):
    """
    Segmenter architecture: two stride-matched encoders, one fusion block per stage, MLP decoder
    ...

    Attributes
    ----------
    stage_channels : list
        Width of the four stages (strides 4/8/16/32)
    num_classes : int
        K
    decoder_hidden : int
        Width of the decoder hidden layer
    fusion : str
        cmssa, no_scan, addition or intra_scan
    gate_mode : str
        mul or add, combination of the scan branch with its gate
    fuse_inputs : str
        gated (Cat(G_R, G_T, L)) or raw (Cat(R, T, L))
    ssm : SsmConfig
        Scan settings
    """

    section = 'model'
    defaults = {'stage_channels': [16, 32, 64, 128], 'num_classes': 6, 'decoder_hidden': 128, 'in_channels': 3,\
        'fusion': 'cmssa', 'gate_mode': 'mul', 'fuse_inputs': 'gated'}
    nested = {'ssm': SsmConfig}

    def validate(self):
        if len(self.stage_channels) != 4 or any(isinstance(c, bool) or not isinstance(c, int) or c < 1 for c in self.stage_channels):
            self.fail('stage_channels must be 4 positive integers, got ' + repr(self.stage_channels))
        self.stage_channels = list(self.stage_channels)
        if isinstance(self.num_classes, bool) or not isinstance(self.num_classes, int) or not (1 <= self.num_classes <= 255):
            self.fail('num_classes must be in [1, 255], got ' + repr(self.num_classes))
        self.check_positive('decoder_hidden')
        self.check_positive('in_channels')
        self.check_choice('fusion', FUSIONS)
        self.check_choice('gate_mode', GATE_MODES)
        self.check_choice('fuse_inputs', FUSE_INPUTS)

    def get_scan_mode(self):
        """Recurrence mode of the fusion blocks
        ----------
        """
        if self.ssm.strict_interleave: return 'strict'
        if self.fusion == 'intra_scan': return 'intra'
        return 'swapped'

    def has_scan(self):
        return self.fusion in ('cmssa', 'intra_scan')

    def check_input_size(self, height : int, width : int):
        if height % STAGE_STRIDES[-1] != 0 or width % STAGE_STRIDES[-1] != 0:
            raise ConfigurationError('Input size ' + str((height, width)) + ' is not divisible by ' + str(STAGE_STRIDES[-1]))

    def get_stage_shapes(self, height : int, width : int):
        self.check_input_size(height, width)
        return [(channels, height // stride, width // stride) for channels, stride in zip(self.stage_channels, STAGE_STRIDES)]
