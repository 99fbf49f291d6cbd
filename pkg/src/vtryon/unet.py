import torch
import torch.nn as nn
import torch.nn.functional as F


class UNet(nn.Module):
    """Encoder-decoder with skip connections: ``depth`` strided conv blocks
    down, ``depth`` transposed conv blocks up (12 layers at depth 6).

    Inputs are edge-padded to a multiple of ``2**depth`` and the output is
    cropped back. The innermost block skips normalization since its
    feature maps are 1x1.
    """

    def __init__(self, in_channels, out_channels, base=32, depth=6, max_mult=8):
        super().__init__()
        self.depth = depth
        chans = [base * min(2 ** i, max_mult) for i in range(depth)]
        self.down = nn.ModuleList()
        prev = in_channels
        for i, c in enumerate(chans):
            layers = [] if i == 0 else [nn.LeakyReLU(0.2)]
            layers.append(nn.Conv2d(prev, c, 4, stride=2, padding=1))
            if 0 < i < depth - 1:
                layers.append(nn.InstanceNorm2d(c, affine=True))
            self.down.append(nn.Sequential(*layers))
            prev = c
        self.up = nn.ModuleList()
        for i in reversed(range(depth)):
            cin = chans[i] if i == depth - 1 else 2 * chans[i]
            cout = chans[i - 1] if i > 0 else out_channels
            layers = [nn.ReLU(), nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)]
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout, affine=True))
            self.up.append(nn.Sequential(*layers))

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="replicate")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        x = self.up[0](skips[-1])
        for j, block in enumerate(self.up[1:], start=2):
            x = block(torch.cat([x, skips[-j]], dim=1))
        return x[..., ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]
