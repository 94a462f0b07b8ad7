from cmscan.numerics.tensor import Variable, Tape, DimensionError, ConfigurationError
from cmscan.numerics.rng import Rng
from cmscan.numerics.layers import Module, Linear, Conv2d, LayerNorm, ConvBnRelu
from cmscan.numerics import primitives
from cmscan.scan.ssmparams import SsmParams
from cmscan.scan.cmss2d import cm_ss2d
from cmscan.fusion.modelconfig import ModelConfig

class CmSsaBlock(Module):
    """
    Cross-modal state space association of one stage. A global branch runs the cross-modal
    selective scan on projected features of both modalities and adds it back to each modality
    through a gated residual; a local branch convolves the concatenated modalities; a 1x1
    conv-BN-ReLU fuses everything into one map of the stage width
    ...

    Attributes
    ----------
    channels : int
        Stage width C
    expanded : int
        Scan width C_e
    scan : SsmParams
        Four direction parameter sets, None when the scan is disabled (no_scan)

    Public Methods
    -------
    project()
        F = SiLU(DWConv(Linear(x))) for both modalities
    associate()
        Cross-modal selective scan of the projected features
    global_association()
        Gated residuals G_R, G_T
    forward()
        Fused stage features F_i
    """

    def __init__(self, name : str, channels : int, config : ModelConfig, rng : Rng):
        super().__init__(name)
        if config.fusion == 'addition': raise ConfigurationError('Addition fusion has no association block')
        self.channels = channels
        self.expanded = channels * config.ssm.expand_factor
        self.mode = config.get_scan_mode()
        self.gate_mode, self.fuse_inputs = config.gate_mode, config.fuse_inputs
        self.parallel, self.delta_softplus = config.ssm.parallel, config.ssm.delta_softplus
        self.in_proj_r = Linear(name + '.in_proj_r', channels, self.expanded, rng.split(0))
        self.in_proj_t = Linear(name + '.in_proj_t', channels, self.expanded, rng.split(1))
        self.dw_r = Conv2d(name + '.dw_r', self.expanded, self.expanded, 3, rng.split(2), groups=self.expanded, nonlinearity='silu')
        self.dw_t = Conv2d(name + '.dw_t', self.expanded, self.expanded, 3, rng.split(3), groups=self.expanded, nonlinearity='silu')
        self.scan = SsmParams(name + '.scan', self.expanded, config.ssm.state_dim, config.ssm.get_rank(self.expanded),\
            rng.split(4), delta_softplus=self.delta_softplus) if config.has_scan() else None
        self.ln_r = LayerNorm(name + '.ln_r', self.expanded)
        self.ln_t = LayerNorm(name + '.ln_t', self.expanded)
        self.out_proj_r = Linear(name + '.out_proj_r', self.expanded, channels, rng.split(5))
        self.out_proj_t = Linear(name + '.out_proj_t', self.expanded, channels, rng.split(6))
        self.gate_r = Linear(name + '.gate_r', channels, channels, rng.split(7), nonlinearity='silu')
        self.gate_t = Linear(name + '.gate_t', channels, channels, rng.split(8), nonlinearity='silu')
        self.local = ConvBnRelu(name + '.local', 2 * channels, channels, 3, rng.split(9))
        self.fuse = ConvBnRelu(name + '.fuse', 3 * channels, channels, 1, rng.split(10))

    def project(self, tape : Tape, rgb : Variable, thermal : Variable):
        projected = list()
        for x, in_proj, dw in ((rgb, self.in_proj_r, self.dw_r), (thermal, self.in_proj_t, self.dw_t)):
            projected.append(primitives.activation(tape, dw.forward(tape, in_proj.forward_map(tape, x)), 'silu'))
        return projected[0], projected[1]

    def associate(self, tape : Tape, feature_rgb : Variable, feature_thermal : Variable):
        if self.scan is None: return feature_rgb, feature_thermal
        return cm_ss2d(tape, feature_rgb, feature_thermal, self.scan, mode=self.mode,\
            parallel=self.parallel, delta_softplus=self.delta_softplus)

    def _gated_residual(self, tape : Tape, residual : Variable, scanned : Variable, norm : LayerNorm, out_proj : Linear, gate : Linear):
        channels_last = primitives.permute(tape, scanned, (0, 2, 3, 1))
        branch = primitives.permute(tape, out_proj.forward(tape, norm.forward(tape, channels_last)), (0, 3, 1, 2))
        gating = primitives.activation(tape, gate.forward_map(tape, residual), 'silu')
        combine = primitives.mul if self.gate_mode == 'mul' else primitives.add
        return primitives.add(tape, residual, combine(tape, branch, gating))

    def global_association(self, tape : Tape, rgb : Variable, thermal : Variable):
        """Gated residuals of both modalities
        ----------

        Returns
        -------
        gated_rgb, gated_thermal : Variable
            G_R = R + OutProj(LN(F'_R)) * SiLU(Gate(R)), symmetrically G_T
        scanned_rgb, scanned_thermal : Variable
            Scan outputs F'_R, F'_T
        """
        scanned_rgb, scanned_thermal = self.associate(tape, *self.project(tape, rgb, thermal))
        gated_rgb = self._gated_residual(tape, rgb, scanned_rgb, self.ln_r, self.out_proj_r, self.gate_r)
        gated_thermal = self._gated_residual(tape, thermal, scanned_thermal, self.ln_t, self.out_proj_t, self.gate_t)
        return gated_rgb, gated_thermal, scanned_rgb, scanned_thermal

    def forward(self, tape : Tape, rgb : Variable, thermal : Variable, train : bool):
        """Fuse the stage features of both modalities
        ----------

        Parameters
        ----------
        tape : Tape
            Tape recording adjoints, None for inference
        rgb, thermal : Variable
            [B, C, H, W], same shape
        train : bool
            Batch statistics mode

        Returns
        -------
        fused : Variable
            [B, C, H, W]
        """
        if rgb.value.shape != thermal.value.shape:
            raise DimensionError('RGB features ' + str(rgb.value.shape) + ' and thermal features ' + str(thermal.value.shape) + ' differ')
        if rgb.value.shape[1] != self.channels:
            raise DimensionError('Block of width ' + str(self.channels) + ' got features ' + str(rgb.value.shape))
        gated_rgb, gated_thermal, _, _ = self.global_association(tape, rgb, thermal)
        local = self.local.forward(tape, primitives.concat(tape, [rgb, thermal], axis=1), train)
        if self.fuse_inputs == 'gated': inputs = [gated_rgb, gated_thermal, local]
        else: inputs = [rgb, thermal, local]
        return self.fuse.forward(tape, primitives.concat(tape, inputs, axis=1), train)
