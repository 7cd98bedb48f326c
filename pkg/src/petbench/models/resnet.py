"""ResNet encoder with a transposed-convolution decoder (no skip connections)."""

import torch.nn as nn
import torch.nn.functional as F


class ResnetBlock(nn.Module):
    def __init__(self, dim, norm_layer=nn.BatchNorm2d, use_dropout=False):
        super().__init__()
        use_bias = norm_layer is nn.InstanceNorm2d
        layers = [
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3, bias=use_bias),
            norm_layer(dim),
            nn.ReLU(True),
        ]
        if use_dropout:
            layers.append(nn.Dropout(0.5))
        layers += [
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3, bias=use_bias),
            norm_layer(dim),
        ]
        self.conv_block = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.conv_block(x)


class ResnetEncoderDecoder(nn.Module):
    """Residual-block encoder followed by a transposed-convolution decoder.

    ``ngf`` is the channel count of the first (full-resolution) stage; the
    blocks run at ``ngf * 2**n_down`` channels.
    """

    def __init__(self, in_channels=1, out_channels=1, ngf=64, n_blocks=9, n_down=2,
                 norm_layer=nn.BatchNorm2d, use_dropout=False):
        super().__init__()
        use_bias = norm_layer is nn.InstanceNorm2d
        encoder = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, ngf, kernel_size=7, bias=use_bias),
            norm_layer(ngf),
            nn.ReLU(True),
        ]
        for i in range(n_down):
            mult = 2 ** i
            encoder += [
                nn.Conv2d(ngf * mult, ngf * mult * 2, kernel_size=3, stride=2, padding=1,
                          padding_mode="reflect", bias=use_bias),
                norm_layer(ngf * mult * 2),
                nn.ReLU(True),
            ]
        width = ngf * 2 ** n_down
        encoder += [ResnetBlock(width, norm_layer, use_dropout) for _ in range(n_blocks)]
        self.encoder = nn.Sequential(*encoder)

        decoder = []
        for i in range(n_down):
            mult = 2 ** (n_down - i)
            decoder += [
                nn.ConvTranspose2d(ngf * mult, ngf * mult // 2, kernel_size=3, stride=2,
                                   padding=1, output_padding=1, bias=use_bias),
                norm_layer(ngf * mult // 2),
                nn.ReLU(True),
            ]
        decoder += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, out_channels, kernel_size=7)]
        self.decoder = nn.Sequential(*decoder)
        self.n_down = n_down

    @property
    def head(self):
        return self.decoder[-1]

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** self.n_down
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return self.decoder(self.encoder(x))[..., :h, :w]
