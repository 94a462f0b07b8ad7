import numpy as np
from cmscan.numerics.tensor import Variable, Tape, DimensionError, as_tensor
from cmscan.numerics.rng import Rng
from cmscan.numerics.layers import Module
from cmscan.numerics import primitives
from cmscan.fusion.modelconfig import ModelConfig
from cmscan.fusion.encoder import Encoder
from cmscan.fusion.cmssa import CmSsaBlock
from cmscan.fusion.decoder import MlpDecoder

class SegmentationModel(Module):
    """
    RGB-thermal segmenter: one encoder per modality (unshared weights), one fusion per stage,
    MLP decoder
    ...

    Attributes
    ----------
    config : ModelConfig
        Architecture
    blocks : list
        CmSsaBlock per stage, empty for addition fusion

    Public Methods
    -------
    encode()
        Stage features of both modalities
    fuse()
        Fused stage features
    forward()
        Logits
    predict()
        Class map
    """

    def __init__(self, config : ModelConfig, rng : Rng, name : str = 'model'):
        super().__init__(name)
        self.config = config
        self.encoder_rgb = Encoder(name + '.encoder_rgb', config, rng.split(0))
        self.encoder_thermal = Encoder(name + '.encoder_thermal', config, rng.split(1))
        self.blocks = list()
        if config.fusion != 'addition':
            self.blocks = [CmSsaBlock(name + '.block' + str(index), width, config, rng.split(2, index))\
                for index, width in enumerate(config.stage_channels)]
        self.decoder = MlpDecoder(name + '.decoder', config, rng.split(3))

    def encode(self, tape : Tape, rgb : Variable, thermal : Variable, train : bool):
        if rgb.value.shape != thermal.value.shape:
            raise DimensionError('RGB input ' + str(rgb.value.shape) + ' and thermal input ' + str(thermal.value.shape) + ' differ')
        return self.encoder_rgb.forward(tape, rgb, train), self.encoder_thermal.forward(tape, thermal, train)

    def fuse(self, tape : Tape, features_rgb : list, features_thermal : list, train : bool):
        if not self.blocks:
            return [primitives.add(tape, rgb, thermal) for rgb, thermal in zip(features_rgb, features_thermal)]
        return [block.forward(tape, rgb, thermal, train) for block, rgb, thermal in zip(self.blocks, features_rgb, features_thermal)]

    def forward(self, tape : Tape, rgb : Variable, thermal : Variable, train : bool):
        """Segment a batch of image pairs
        ----------

        Parameters
        ----------
        tape : Tape
            Tape recording adjoints, None for inference
        rgb, thermal : Variable
            [B, 3, H, W]
        train : bool
            Batch statistics mode

        Returns
        -------
        logits : Variable
            [B, K, H, W]
        """
        features_rgb, features_thermal = self.encode(tape, rgb, thermal, train)
        return self.decoder.forward(tape, self.fuse(tape, features_rgb, features_thermal, train))

    def predict(self, rgb : np.ndarray, thermal : np.ndarray):
        """Class map of [B, 3, H, W] (or [3, H, W]) inputs in eval mode
        ----------
        """
        squeeze = (rgb.ndim == 3)
        dtype = self.parameters()[0].value.dtype
        rgb, thermal = as_tensor(rgb, dtype), as_tensor(thermal, dtype)
        if squeeze: rgb, thermal = rgb[None], thermal[None]
        logits = self.forward(None, Variable(rgb), Variable(thermal), train=False).value
        labels = np.argmax(logits, axis=1).astype(np.uint8)
        return labels[0] if squeeze else labels
