"""
Large-kernel-attention building blocks
LKA attention unit, MLP block, the transformer-like LKA block and the
patch embedding that opens every encoder stage
"""

from dataclasses import dataclass

from utils import ops
from utils.errors import ShapeError
from utils.nn import BatchNorm3d, Conv3d, Module
from utils.ops import Conv3dSpec


@dataclass(frozen=True)
class LkaKernels:
    """Kernel plan of one LKA attention unit"""
    local: int = 5
    dilated: int = 7
    dilation: int = 3

    @property
    def receptive_field(self):
        """Composed support per axis of the two depthwise convolutions"""
        return (self.local - 1) + self.dilation * (self.dilated - 1) + 1


class LkaAttention(Module):
    """Atts = Pointwise(DiConv(ChConv(x))); returns Atts * x"""

    def __init__(self, dim, kernels, rng):
        super().__init__()
        self.dim = dim
        self.chconv = Conv3d(Conv3dSpec.same(dim, dim, kernels.local, groups=dim), rng)
        self.diconv = Conv3d(Conv3dSpec.same(dim, dim, kernels.dilated, dilation=kernels.dilation, groups=dim), rng)
        self.pointwise = Conv3d(Conv3dSpec(dim, dim, kernel=1), rng)

    def attention_map(self, x):
        return self.pointwise(self.diconv(self.chconv(x)))

    def forward(self, x):
        if x.shape[1] != self.dim:
            raise ShapeError(f"LKA attention built for {self.dim} channels, got input {x.shape}")
        return self.attention_map(x) * x


class Mlp(Module):
    """Pointwise expand, GELU, 3x3x3 depthwise conv, GELU, pointwise contract"""

    def __init__(self, dim, mlp_ratio, rng):
        super().__init__()
        hidden = int(mlp_ratio * dim)
        self.hidden = hidden
        self.fc1 = Conv3d(Conv3dSpec(dim, hidden, kernel=1), rng)
        self.dwconv = Conv3d(Conv3dSpec.same(hidden, hidden, 3, groups=hidden), rng)
        self.fc2 = Conv3d(Conv3dSpec(hidden, dim, kernel=1), rng)

    def forward(self, x):
        x = ops.gelu(self.fc1(x))
        x = ops.gelu(self.dwconv(x))
        return self.fc2(x)


class LkaBlock(Module):
    """
    Transformer-like block over a token sequence

    Tokens (b, N, dim) are viewed as a volume (b, dim, S, H, W), then
    x <- x + Attn(BN(x)) and x <- x + MLP(BN(x)), and viewed back as tokens.
    """

    def __init__(self, dim, mlp_ratio, kernels, rng):
        super().__init__()
        self.dim = dim
        self.norm1 = BatchNorm3d(dim)
        self.attn = LkaAttention(dim, kernels, rng)
        self.norm2 = BatchNorm3d(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng)

    def forward(self, tokens, spatial):
        b, n, c = tokens.shape
        if n != spatial[0] * spatial[1] * spatial[2]:
            raise ShapeError(f"{n} tokens do not fill spatial grid {tuple(spatial)}")
        if c != self.dim:
            raise ShapeError(f"LKA block built for dim {self.dim}, got tokens {tokens.shape}")
        x = tokens.permute(0, 2, 1).reshape((b, c) + tuple(spatial))
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x.reshape(b, c, n).permute(0, 2, 1)


class PatchEmbed(Module):
    """Conv3D(k, stride, padding=k//2) then BN, flattened to tokens"""

    def __init__(self, in_channels, dim, kernel, stride, rng):
        super().__init__()
        self.dim = dim
        self.proj = Conv3d(Conv3dSpec(in_channels, dim, kernel=kernel, stride=stride, padding=kernel // 2), rng)
        self.norm = BatchNorm3d(dim)

    def forward(self, x):
        """
        Returns:
            (tokens (b, S'*H'*W', dim), spatial (S', H', W'))
        """
        x = self.norm(self.proj(x))
        spatial = x.shape[2:]
        return x.flatten_spatial().permute(0, 2, 1), spatial
