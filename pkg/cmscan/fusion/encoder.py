from cmscan.numerics.tensor import Variable, Tape
from cmscan.numerics.rng import Rng
from cmscan.numerics.layers import Module, ConvBnRelu
from cmscan.fusion.modelconfig import ModelConfig

class Encoder(Module):
    """
    Four-stage convolutional encoder producing features at strides 4, 8, 16 and 32
    ...

    Each stage halves the resolution with a stride-2 3x3 conv-BN-ReLU and refines it with a
    stride-1 one; the first stage is preceded by a stride-2 stem so that it lands on stride 4.

    Public Methods
    -------
    forward()
        Stage features of one modality
    """

    def __init__(self, name : str, config : ModelConfig, rng : Rng):
        super().__init__(name)
        self.config = config
        widths = config.stage_channels
        self.stem = ConvBnRelu(name + '.stem', config.in_channels, widths[0], 3, rng.split(0), stride=2)
        self.stages = list()
        for index, width in enumerate(widths):
            previous = widths[max(0, index - 1)]
            down = ConvBnRelu(name + '.stage' + str(index) + '.down', previous, width, 3, rng.split(1, index, 0), stride=2)
            refine = ConvBnRelu(name + '.stage' + str(index) + '.refine', width, width, 3, rng.split(1, index, 1), stride=1)
            self.stages.append(down)
            self.stages.append(refine)

    def forward(self, tape : Tape, image : Variable, train : bool):
        """Encode one modality
        ----------

        Parameters
        ----------
        tape : Tape
            Tape recording adjoints, None for inference
        image : Variable
            [B, 3, H, W], H and W divisible by 32
        train : bool
            Batch statistics mode

        Returns
        -------
        features : list
            Four Variables [B, C_i, H/s_i, W/s_i]
        """
        self.config.check_input_size(*image.value.shape[-2:])
        features = list()
        hidden = self.stem.forward(tape, image, train)
        for index in range(0, len(self.stages), 2):
            hidden = self.stages[index].forward(tape, hidden, train)
            hidden = self.stages[index + 1].forward(tape, hidden, train)
            features.append(hidden)
        return features
