from cmscan.numerics.tensor import Variable, Tape
from cmscan.numerics.rng import Rng
from cmscan.numerics.layers import Module, Linear
from cmscan.numerics import primitives
from cmscan.fusion.modelconfig import ModelConfig, STAGE_STRIDES

class MlpDecoder(Module):
    """
    All-MLP decoder: per-stage linear embedding, upsampling to the stride-4 grid, concatenation,
    one hidden layer and a per-pixel classifier, upsampled to the input resolution
    ...

    Public Methods
    -------
    forward()
        Logits [B, K, H, W]
    """

    def __init__(self, name : str, config : ModelConfig, rng : Rng):
        super().__init__(name)
        hidden = config.decoder_hidden
        self.embed = [Linear(name + '.embed' + str(index), width, hidden, rng.split(0, index))\
            for index, width in enumerate(config.stage_channels)]
        self.hidden = Linear(name + '.hidden', len(config.stage_channels) * hidden, hidden, rng.split(1), nonlinearity='relu')
        self.classifier = Linear(name + '.classifier', hidden, config.num_classes, rng.split(2))

    def forward(self, tape : Tape, features : list):
        """Decode fused stage features
        ----------

        Parameters
        ----------
        tape : Tape
            Tape recording adjoints, None for inference
        features : list
            Four Variables at strides 4, 8, 16, 32

        Returns
        -------
        logits : Variable
            [B, K, 4 H_1, 4 W_1]
        """
        embedded = list()
        for feature, embed, stride in zip(features, self.embed, STAGE_STRIDES):
            hidden = embed.forward_map(tape, feature)
            factor = stride // STAGE_STRIDES[0]
            embedded.append(hidden if factor == 1 else primitives.bilinear_upsample(tape, hidden, factor))
        hidden = primitives.activation(tape, self.hidden.forward_map(tape, primitives.concat(tape, embedded, axis=1)), 'relu')
        logits = self.classifier.forward_map(tape, hidden)
        return primitives.bilinear_upsample(tape, logits, STAGE_STRIDES[0])
