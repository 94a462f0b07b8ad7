from cmscan.fusion.modelconfig import ModelConfig, SsmConfig, STAGE_STRIDES

# FLOPs per element of elementwise operations
NORM_FLOPS     = 4
RELU_FLOPS     = 1
SILU_FLOPS     = 7
SOFTPLUS_FLOPS = 4
ADD_FLOPS      = 1
MUL_FLOPS      = 1
UPSAMPLE_FLOPS = 6
# FLOPs per (token, channel, state) of the recurrence: exp (4), delta*A, delta*B, *x,
# transition*state, +drive and the read-out multiply-add (2)
SCAN_FLOPS     = 11

class FlopsEntry(object):
    """
    One counted layer
    ...
    """

    def __init__(self, name : str, flops : int, params : int = 0):
        self.name, self.flops, self.params = name, int(flops), int(params)

    def to_dict(self):
        return {'name': self.name, 'flops': self.flops, 'params': self.params}

class FlopsReport(object):
    """
    Analytic FLOPs and parameter counts, per layer and in total
    ...

    Public Methods
    -------
    add()
        Append an entry
    extend()
        Append every entry of another report, with a name prefix
    get_total_flops(), get_total_params()
        Sums over entries
    """

    def __init__(self):
        self.entries = list()

    def add(self, name : str, flops : int, params : int = 0):
        self.entries.append(FlopsEntry(name, flops, params))
        return self

    def extend(self, other, prefix : str = ''):
        for entry in other.entries: self.add(prefix + entry.name, entry.flops, entry.params)
        return self

    def get_total_flops(self):
        return sum(entry.flops for entry in self.entries)

    def get_total_params(self):
        return sum(entry.params for entry in self.entries)

    def to_dict(self):
        return {'entries': [entry.to_dict() for entry in self.entries],\
            'total_flops': self.get_total_flops(), 'total_params': self.get_total_params()}

def linear_cost(tokens : int, c_in : int, c_out : int, bias : bool = True):
    return 2 * tokens * c_in * c_out, c_in * c_out + (c_out if bias else 0)

def conv_cost(c_in : int, c_out : int, kernel : int, h_out : int, w_out : int, groups : int = 1, bias : bool = True):
    macs = h_out * w_out * c_out * (c_in // groups) * kernel * kernel
    return 2 * macs, c_out * (c_in // groups) * kernel * kernel + (c_out if bias else 0)

def count_cbr(report : FlopsReport, name : str, c_in : int, c_out : int, kernel : int, h_out : int, w_out : int):
    flops, params = conv_cost(c_in, c_out, kernel, h_out, w_out, bias=False)
    elements = c_out * h_out * w_out
    report.add(name + '.conv', flops, params)
    report.add(name + '.bn', NORM_FLOPS * elements, 2 * c_out)
    report.add(name + '.relu', RELU_FLOPS * elements)

def count_scan(channels : int, height : int, width : int, ssm : SsmConfig):
    """Cost of one cross-modal selective scan over the four directions
    ----------
    """
    report = FlopsReport()
    tokens = 2 * height * width
    state_dim, rank = ssm.state_dim, ssm.get_rank(channels)
    for direction in range(4):
        # A_log, W_B, W_C, then D and delta_bias, then the low-rank delta pair
        params = 3 * channels * state_dim + 2 * channels + 2 * rank * channels
        prefix = 'scan' + str(direction)
        report.add(prefix + '.B', 2 * tokens * channels * state_dim, params)
        report.add(prefix + '.C', 2 * tokens * channels * state_dim)
        report.add(prefix + '.delta_down', 2 * tokens * channels * rank)
        report.add(prefix + '.delta_up', 2 * tokens * rank * channels)
        if ssm.delta_softplus: report.add(prefix + '.softplus', SOFTPLUS_FLOPS * tokens * channels)
        report.add(prefix + '.recurrence', SCAN_FLOPS * tokens * channels * state_dim)
        report.add(prefix + '.skip', 2 * tokens * channels)
    # Two modalities, three additions merging four directions
    report.add('scan.merge', 2 * 3 * ADD_FLOPS * height * width * channels)
    return report

def count_block(channels : int, height : int, width : int, config : ModelConfig):
    """Cost of one CmSsaBlock of width channels on a height x width grid
    ----------
    """
    report = FlopsReport()
    pixels = height * width
    expanded = channels * config.ssm.expand_factor
    for modality in ('r', 't'):
        report.add('in_proj_' + modality, *linear_cost(pixels, channels, expanded))
        report.add('dw_' + modality, *conv_cost(expanded, expanded, 3, height, width, groups=expanded))
        report.add('silu_' + modality, SILU_FLOPS * pixels * expanded)
    if config.has_scan(): report.extend(count_scan(expanded, height, width, config.ssm))
    for modality in ('r', 't'):
        report.add('ln_' + modality, NORM_FLOPS * pixels * expanded, 2 * expanded)
        report.add('out_proj_' + modality, *linear_cost(pixels, expanded, channels))
        report.add('gate_' + modality, *linear_cost(pixels, channels, channels))
        report.add('gate_silu_' + modality, SILU_FLOPS * pixels * channels)
        report.add('gate_' + config.gate_mode + '_' + modality, (MUL_FLOPS if config.gate_mode == 'mul' else ADD_FLOPS) * pixels * channels)
        report.add('residual_' + modality, ADD_FLOPS * pixels * channels)
    count_cbr(report, 'local', 2 * channels, channels, 3, height, width)
    count_cbr(report, 'fuse', 3 * channels, channels, 1, height, width)
    return report

def count_encoder(config : ModelConfig, height : int, width : int):
    report = FlopsReport()
    widths = config.stage_channels
    count_cbr(report, 'stem', config.in_channels, widths[0], 3, height // 2, width // 2)
    for index, (width_i, stride) in enumerate(zip(widths, STAGE_STRIDES)):
        previous = widths[max(0, index - 1)]
        count_cbr(report, 'stage' + str(index) + '.down', previous, width_i, 3, height // stride, width // stride)
        count_cbr(report, 'stage' + str(index) + '.refine', width_i, width_i, 3, height // stride, width // stride)
    return report

def count_decoder(config : ModelConfig, height : int, width : int):
    report = FlopsReport()
    hidden = config.decoder_hidden
    grid_h, grid_w = height // STAGE_STRIDES[0], width // STAGE_STRIDES[0]
    for index, (width_i, stride) in enumerate(zip(config.stage_channels, STAGE_STRIDES)):
        report.add('embed' + str(index), *linear_cost((height // stride) * (width // stride), width_i, hidden))
        if stride != STAGE_STRIDES[0]: report.add('embed' + str(index) + '.upsample', UPSAMPLE_FLOPS * grid_h * grid_w * hidden)
    report.add('hidden', *linear_cost(grid_h * grid_w, len(config.stage_channels) * hidden, hidden))
    report.add('hidden.relu', RELU_FLOPS * grid_h * grid_w * hidden)
    report.add('classifier', *linear_cost(grid_h * grid_w, hidden, config.num_classes))
    report.add('classifier.upsample', UPSAMPLE_FLOPS * height * width * config.num_classes)
    return report

def count_flops(config : ModelConfig, height : int, width : int):
    """Analytic cost of a full forward pass of one image pair
    ----------

    Parameters
    ----------
    config : ModelConfig
        Architecture
    height, width : int
        Input size, divisible by 32

    Returns
    -------
    report : FlopsReport
        Entries prefixed by their component
    """
    shapes = config.get_stage_shapes(height, width)
    report = FlopsReport()
    encoder = count_encoder(config, height, width)
    report.extend(encoder, 'encoder_rgb.')
    report.extend(encoder, 'encoder_thermal.')
    for index, (channels, stage_h, stage_w) in enumerate(shapes):
        if config.fusion == 'addition':
            report.add('fusion' + str(index) + '.add', ADD_FLOPS * channels * stage_h * stage_w)
        else:
            report.extend(count_block(channels, stage_h, stage_w, config), 'block' + str(index) + '.')
    report.extend(count_decoder(config, height, width), 'decoder.')
    return report

def params_count(model):
    """Number of scalars held by the parameters of a model (None counts as an empty model)
    ----------
    """
    if model is None: return 0
    return sum(param.size() for param in model.parameters())
