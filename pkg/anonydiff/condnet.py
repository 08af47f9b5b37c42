#!/usr/bin/env python
"""
Conditioning network: the denoising UNet and its two ReferenceNet twins.

Each ReferenceNet is a structural copy of the UNet core fed with recognizer tokens instead of
noisy images. The token matrices entering its self-attention layers are recorded as a
ReferenceState and concatenated into the matching UNet self-attention, where only the UNet
segment of the output is kept. Cross-attention attends over the image embeddings
[z_src; z_drv].
"""
import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from anonydiff import archive, tools
from anonydiff.errors import DatasetIOError, InvalidConfigError, MisalignedStatesError, ShapeMismatchError

DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass
class DenoiserConfig:
    widths: tuple = (32, 64, 128)
    attention_levels: tuple = (1, 2)
    heads: int = 4
    embed_dim: int = 64
    time_dim: int = 128
    token_dim: int = 64
    token_grid: int = 8
    image_size: int = 32
    groups: int = 8
    dtype: str = 'float32'

    def validate(self):
        if not self.widths or any(w <= 0 for w in self.widths):
            raise InvalidConfigError(f'channel widths must be positive, got {self.widths}')
        if any(w % self.groups for w in self.widths):
            raise InvalidConfigError(f'group count {self.groups} must divide every width {self.widths}')
        if not self.attention_levels:
            raise InvalidConfigError('at least one attention level is required')
        for level in self.attention_levels:
            if not 0 <= level < len(self.widths):
                raise InvalidConfigError(f'attention level {level} outside 0..{len(self.widths) - 1}')
            if self.widths[level] % self.heads:
                raise InvalidConfigError(f'{self.heads} heads do not divide width {self.widths[level]}')
        if self.image_size % (2 ** (len(self.widths) - 1)):
            raise InvalidConfigError(f'image size {self.image_size} not divisible by the stage count')
        for name in ('heads', 'embed_dim', 'time_dim', 'token_dim', 'token_grid'):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f'{name} must be positive')
        if self.time_dim % 2:
            raise InvalidConfigError('time_dim must be even')
        if self.dtype not in DTYPES:
            raise InvalidConfigError(f'dtype must be one of {sorted(DTYPES)}, got {self.dtype}')
        return self

    @property
    def attention_count(self):
        return 2 * len(self.attention_levels)


@dataclass
class ReferenceState:
    """
    One B x T x C token matrix per attention layer, in UNet attention order
    """
    layers: list = field(default_factory=list)

    def __len__(self):
        return len(self.layers)


def timestep_embedding(t, dim):
    """
    Sinusoidal embedding of (possibly per-item) timesteps
    """
    half = dim // 2
    frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = t.to(torch.float64)[:, None] * frequencies[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ResBlock(nn.Module):

    def __init__(self, in_width, out_width, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_width)
        self.conv1 = nn.Conv2d(in_width, out_width, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_width)
        self.norm2 = nn.GroupNorm(groups, out_width)
        self.conv2 = nn.Conv2d(out_width, out_width, 3, padding=1)
        self.skip = nn.Conv2d(in_width, out_width, 1) if in_width != out_width else nn.Identity()

    def forward(self, h, t_emb):
        out = self.conv1(F.silu(self.norm1(h)))
        out = out + self.time_proj(F.silu(t_emb))[:, :, None, None]
        out = self.conv2(F.silu(self.norm2(out)))
        return out + self.skip(h)


def concat_self_attention(h_unet, s_src, s_drv, attn):
    """
    Self-attention over the concatenated sequence [h_unet; s_src; s_drv]. Queries come from all
    three segments; the output is split by segment length and only the UNet part is returned.

    :param h_unet: B x N x C tokens
    :param s_src: B x M x C reference tokens (or None)
    :param s_drv: B x K x C reference tokens (or None)
    :param attn: nn.MultiheadAttention with batch_first=True
    :return: B x N x C
    """
    width = h_unet.shape[-1]
    segments = [h_unet]
    for name, s in (('source', s_src), ('driving', s_drv)):
        if s is None:
            continue
        if s.dim() != 3 or s.shape[-1] != width:
            raise ShapeMismatchError(f'{name} reference tokens {tuple(s.shape)} do not match width {width}')
        if s.shape[0] != h_unet.shape[0]:
            if s.shape[0] != 1:
                raise ShapeMismatchError(f'{name} reference batch {s.shape[0]} vs {h_unet.shape[0]}')
            s = s.expand(h_unet.shape[0], -1, -1)
        segments.append(s)
    sequence = torch.cat(segments, dim=1)
    out, _ = attn(sequence, sequence, sequence, need_weights=False)
    kept, _ = torch.split(out, [h_unet.shape[1], sequence.shape[1] - h_unet.shape[1]], dim=1)
    return kept


class AttentionBlock(nn.Module):
    """
    LayerNorm -> (concatenated) self-attention -> LayerNorm -> cross-attention -> feed-forward,
    each with a residual connection. The post-norm tokens entering self-attention are the
    block's reference state.
    """

    def __init__(self, width, embed_dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, heads, kdim=embed_dim, vdim=embed_dim,
                                                batch_first=True)
        self.norm3 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, h, context, reference=None, record=None):
        b, c, height, width = h.shape
        x = h.flatten(2).transpose(1, 2)
        normed = self.norm1(x)
        if record is not None:
            record.append(normed)
        s_src, s_drv = reference if reference is not None else (None, None)
        x = x + concat_self_attention(normed, s_src, s_drv, self.self_attn)
        cross, _ = self.cross_attn(self.norm2(x), context, context, need_weights=False)
        x = x + cross
        x = x + self.ff(self.norm3(x))
        return x.transpose(1, 2).reshape(b, c, height, width)


class UNetCore(nn.Module):
    """
    Width-generic UNet body shared in structure by the denoiser and both ReferenceNets.
    Attention order: down levels ascending, then up levels descending.
    """

    def __init__(self, config):
        super().__init__()
        widths = config.widths
        levels = set(config.attention_levels)
        self.time_dim = config.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, config.time_dim), nn.SiLU(),
                                      nn.Linear(config.time_dim, config.time_dim))

        def attention(width, level):
            if level in levels:
                return AttentionBlock(width, config.embed_dim, config.heads)
            return nn.Identity()

        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        previous = widths[0]
        for level, width in enumerate(widths):
            self.down.append(ResBlock(previous, width, config.time_dim, config.groups))
            self.down_attn.append(attention(width, level))
            last = level == len(widths) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(width, width, 3, stride=2, padding=1))
            previous = width

        self.mid = ResBlock(widths[-1], widths[-1], config.time_dim, config.groups)

        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level in reversed(range(len(widths))):
            self.up.append(ResBlock(previous + widths[level], widths[level], config.time_dim, config.groups))
            self.up_attn.append(attention(widths[level], level))
            self.upsample.append(nn.Identity() if level == 0 else nn.Upsample(scale_factor=2, mode='nearest'))
            previous = widths[level]

    def attention_blocks(self):
        blocks = [m for m in self.down_attn if isinstance(m, AttentionBlock)]
        return blocks + [m for m in self.up_attn if isinstance(m, AttentionBlock)]

    def forward(self, h, t, context, references=None, record=None):
        t_emb = self.time_mlp(timestep_embedding(t, self.time_dim).to(h.dtype))
        references = iter(references) if references is not None else None

        def attend(block, h):
            if not isinstance(block, AttentionBlock):
                return h
            reference = next(references) if references is not None else None
            return block(h, context, reference, record)

        skips = []
        for res, attn, down in zip(self.down, self.down_attn, self.downsample):
            h = attend(attn, res(h, t_emb))
            skips.append(h)
            h = down(h)
        h = self.mid(h, t_emb)
        for res, attn, up in zip(self.up, self.up_attn, self.upsample):
            h = res(torch.cat([h, skips.pop()], dim=1), t_emb)
            h = up(attend(attn, h))
        return h


class DenoiserUNet(nn.Module):

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.stem = nn.Conv2d(3, config.widths[0], 3, padding=1)
        self.core = UNetCore(config)
        self.head = nn.Sequential(nn.GroupNorm(config.groups, config.widths[0]), nn.SiLU(),
                                  nn.Conv2d(config.widths[0], 3, 3, padding=1))

    def forward(self, x_t, t, context, references):
        return self.head(self.core(self.stem(x_t), t, context, references))


class ReferenceNet(nn.Module):
    """
    Frozen token stem (recognizer token grid upsampled to image resolution) followed by a copy
    of the UNet core, always run at t = 0
    """

    def __init__(self, config, core):
        super().__init__()
        self.config = config
        self.stem = nn.Conv2d(config.token_dim, config.widths[0], 3, padding=1)
        self.core = core

    def forward(self, tokens, z):
        b = tokens.shape[0]
        grid = self.config.token_grid
        h = tokens.transpose(1, 2).reshape(b, self.config.token_dim, grid, grid)
        h = F.interpolate(h, size=(self.config.image_size, self.config.image_size), mode='nearest')
        record = []
        t = torch.zeros(b, dtype=torch.long)
        self.core(self.stem(h), t, z[:, None, :], None, record)
        return ReferenceState(layers=record)


class AnonymizerNetworks(nn.Module):
    """
    UNet, source and driving ReferenceNets and the learned null embedding. State-dict names
    are prefixed unet., refsrc., refdrv. and null_embedding.
    """

    def __init__(self, config, unet, refsrc, refdrv, null_embedding):
        super().__init__()
        self.config = config
        self.unet = unet
        self.refsrc = refsrc
        self.refdrv = refdrv
        self.null_embedding = nn.Parameter(null_embedding)
        self.trained_steps = 0

    @property
    def dtype(self):
        return self.null_embedding.dtype


def init_networks(config, seed=0):
    """
    Builds the UNet and both ReferenceNets. ReferenceNet cores are copies of the UNet core, so
    matching tensors are bitwise equal after initialization.

    :param config: DenoiserConfig
    :param seed: initialization seed
    :return: AnonymizerNetworks
    """
    config.validate()
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        unet = DenoiserUNet(config)
        refsrc = ReferenceNet(config, copy.deepcopy(unet.core))
        null_embedding = F.normalize(torch.randn(config.embed_dim), dim=0)
    refdrv = copy.deepcopy(refsrc)
    for refnet in (refsrc, refdrv):
        for param in refnet.stem.parameters():
            param.requires_grad_(False)

    networks = AnonymizerNetworks(config, unet, refsrc, refdrv, null_embedding)
    return networks.to(DTYPES[config.dtype])


def _as_batch(x, dim, dtype):
    x = torch.as_tensor(x).to(dtype)
    return x.unsqueeze(0) if x.dim() == dim - 1 else x


def refnet_forward(refnet, tokens, z):
    """
    Runs a ReferenceNet over recognizer tokens with z in its cross-attention

    :param tokens: T x C or B x T x C token matrix
    :param z: D or B x D image embedding
    :return: ReferenceState with one B x T_l x C_l matrix per attention layer
    """
    config = refnet.config
    dtype = refnet.stem.weight.dtype
    tokens = _as_batch(tokens, 3, dtype)
    z = _as_batch(z, 2, dtype)
    if tuple(tokens.shape[1:]) != (config.token_grid ** 2, config.token_dim):
        raise ShapeMismatchError(f'reference tokens {tuple(tokens.shape)} do not match '
                                 f'{config.token_grid ** 2} x {config.token_dim}')
    if z.shape[-1] != config.embed_dim:
        raise ShapeMismatchError(f'embedding dimension {z.shape[-1]} != {config.embed_dim}')
    if z.shape[0] != tokens.shape[0]:
        z = z.expand(tokens.shape[0], -1)
    return refnet(tokens, z)


def _check_states(unet, state, name):
    blocks = unet.core.attention_blocks()
    if len(state) != len(blocks):
        raise MisalignedStatesError(f'{name} state has {len(state)} layers, UNet has {len(blocks)}')
    for i, (layer, block) in enumerate(zip(state.layers, blocks)):
        if layer.shape[-1] != block.norm1.normalized_shape[0]:
            raise MisalignedStatesError(f'{name} state layer {i} width {layer.shape[-1]} '
                                        f'!= {block.norm1.normalized_shape[0]}')


def unet_forward(unet, x_t, t, z_src, z_drv, S_src, S_drv):
    """
    Noise prediction with three-stream self-attention and [z_src; z_drv] cross-attention

    :param x_t: B x 3 x H x W noisy images
    :param t: int or B timesteps
    :return: eps_hat shaped like x_t
    """
    config = unet.config
    if x_t.dim() != 4 or tuple(x_t.shape[1:]) != (3, config.image_size, config.image_size):
        raise ShapeMismatchError(f'x_t {tuple(x_t.shape)} does not match 3 x {config.image_size}^2')
    _check_states(unet, S_src, 'source')
    _check_states(unet, S_drv, 'driving')
    b = x_t.shape[0]
    z_src = _as_batch(z_src, 2, x_t.dtype).expand(b, -1)
    z_drv = _as_batch(z_drv, 2, x_t.dtype).expand(b, -1)
    if z_src.shape[-1] != config.embed_dim or z_drv.shape[-1] != config.embed_dim:
        raise ShapeMismatchError(f'embeddings must have dimension {config.embed_dim}')
    if not isinstance(t, torch.Tensor) or t.dim() == 0:
        t = torch.full((b,), int(t), dtype=torch.long)
    context = torch.stack([z_src, z_drv], dim=1)
    return unet(x_t, t, context, list(zip(S_src.layers, S_drv.layers)))


def null_conditioning(networks):
    """
    Unconditional source branch: the learned null embedding and a builder for S_uncond, the
    source ReferenceNet state over zero tokens with the null embedding. The driving stream
    is left untouched.

    :return: (z_null, builder(batch_size) -> ReferenceState)
    """
    config = networks.config
    z_null = networks.null_embedding

    def build(batch_size=1):
        tokens = torch.zeros(batch_size, config.token_grid ** 2, config.token_dim, dtype=networks.dtype)
        return refnet_forward(networks.refsrc, tokens, z_null)

    return z_null, build


def save_networks(networks, path, config_hash='', meta=None):
    details = {'kind': 'anonymizer',
               'config': asdict(networks.config),
               'trained_steps': networks.trained_steps}
    details.update(meta or {})
    return archive.save_archive(path, networks.state_dict(), config_hash=config_hash, meta=details)


def load_networks(path):
    tensors, manifest = archive.load_archive(path)
    try:
        meta = manifest['meta']
        settings = dict(meta['config'])
        settings['widths'] = tuple(settings['widths'])
        settings['attention_levels'] = tuple(settings['attention_levels'])
        config = DenoiserConfig(**settings)
        trained_steps = int(meta.get('trained_steps', 0))
    except (KeyError, TypeError, AttributeError) as err:
        raise DatasetIOError(f'{path} does not describe anonymizer networks: {err!r}') from None
    networks = init_networks(config)
    networks.load_state_dict(tensors)
    networks.trained_steps = trained_steps
    return networks


def parameter_hashes(networks):
    """
    Hashes of the parameter groups that matter for sharing and freezing checks
    """
    return {'unet': tools.state_hash(networks.unet),
            'unet.core': tools.state_hash(networks.unet.core),
            'refsrc': tools.state_hash(networks.refsrc),
            'refsrc.core': tools.state_hash(networks.refsrc.core),
            'refdrv': tools.state_hash(networks.refdrv)}
