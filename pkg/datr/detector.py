"""
Miniature DETR-style detector: a small strided CNN backbone producing two
feature scales, a transformer encoder over the concatenated scales, a
query-based decoder with learnable anchor queries and the classification /
box heads.
"""
import copy
import math
import logging

from collections import namedtuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from datr.utils import dotdict


logger = logging.getLogger(__name__)

Predictions = namedtuple('Predictions', 'class_logits boxes')


DEFAULT_DETECTOR_CONFIG = dotdict({
    'backbone_widths': (32, 64, 128, 128),
    'n_groups': 8,
    'd_model': 64,
    'n_heads': 4,
    'n_enc_layers': 2,
    'n_dec_layers': 2,
    'dim_feedforward': 256,
    'dropout': 0.0,
    'n_queries': 20,
    'n_classes': 4,
    'prior_prob': 0.01,
})


def inverse_sigmoid(x, eps=1e-5):
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def sine_position_embedding(height, width, d_model, temperature=10000, device=None, dtype=None):
    """2D sine positional encoding (DETR convention) of shape (H*W, d_model)."""
    n_feats = d_model // 2
    y_embed = torch.arange(1, height + 1, device=device, dtype=torch.float64)[:, None].expand(height, width)
    x_embed = torch.arange(1, width + 1, device=device, dtype=torch.float64)[None, :].expand(height, width)
    y_embed = y_embed / height * 2 * math.pi
    x_embed = x_embed / width * 2 * math.pi

    dim_t = torch.arange(n_feats, device=device, dtype=torch.float64)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode='floor') / n_feats)
    pos_x = x_embed[..., None] / dim_t
    pos_y = y_embed[..., None] / dim_t
    pos_x = torch.stack((pos_x[..., 0::2].sin(), pos_x[..., 1::2].cos()), dim=-1).flatten(2)
    pos_y = torch.stack((pos_y[..., 0::2].sin(), pos_y[..., 1::2].cos()), dim=-1).flatten(2)
    pos = torch.cat((pos_y, pos_x), dim=-1).flatten(0, 1)
    return pos.to(dtype or torch.get_default_dtype())


class MLP(nn.Module):
    """ Simple multi-layer perceptron with ReLU between layers """

    def __init__(self, input_dim, hidden_dim, output_dim, num_layers):
        super(MLP, self).__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip(dims, dims[1:] + [output_dim]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        return x


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, n_groups):
        super(ConvBlock, self).__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(n_groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(n_groups, out_channels)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class Backbone(nn.Module):
    """ Four stride-2 blocks; the last two outputs (strides 8 and 16) are returned """

    def __init__(self, cfg):
        super(Backbone, self).__init__()
        widths = [3] + list(cfg.backbone_widths)
        self.blocks = nn.ModuleList(ConvBlock(c_in, c_out, cfg.n_groups)
                                    for c_in, c_out in zip(widths[:-1], widths[1:]))
        self.num_channels = list(cfg.backbone_widths[-2:])

    def forward(self, images):
        x = images * 2 - 1
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs[-2:]


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super(EncoderLayer, self).__init__()
        d = cfg.d_model
        self.self_attn = nn.MultiheadAttention(d, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.linear1 = nn.Linear(d, cfg.dim_feedforward)
        self.linear2 = nn.Linear(cfg.dim_feedforward, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, src, pos):
        q = k = src + pos
        src = self.norm1(src + self.dropout(self.self_attn(q, k, value=src, need_weights=False)[0]))
        src2 = self.linear2(self.dropout(F.relu(self.linear1(src))))
        return self.norm2(src + self.dropout(src2))


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super(DecoderLayer, self).__init__()
        d = cfg.d_model
        self.self_attn = nn.MultiheadAttention(d, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.linear1 = nn.Linear(d, cfg.dim_feedforward)
        self.linear2 = nn.Linear(cfg.dim_feedforward, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, tgt, query_pos, memory, memory_pos):
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.dropout(self.self_attn(q, k, value=tgt, need_weights=False)[0]))
        tgt2 = self.cross_attn(tgt + query_pos, memory + memory_pos, value=memory, need_weights=False)[0]
        tgt = self.norm2(tgt + self.dropout(tgt2))
        tgt2 = self.linear2(self.dropout(F.relu(self.linear1(tgt))))
        return self.norm3(tgt + self.dropout(tgt2))


def _grid_anchors(n_queries, size=0.25):
    """Anchor boxes (cx, cy, w, h) spread over a near-square grid."""
    cols = int(math.ceil(math.sqrt(n_queries)))
    rows = int(math.ceil(n_queries / cols))
    anchors = []
    for i in range(n_queries):
        r, c = divmod(i, cols)
        anchors.append([(c + 0.5) / cols, (r + 0.5) / rows, size, size])
    return torch.tensor(anchors)


class MiniDetr(nn.Module):
    """ Detection transformer with N learnable anchor queries """

    def __init__(self, cfg=DEFAULT_DETECTOR_CONFIG):
        super(MiniDetr, self).__init__()
        cfg = dotdict(cfg)
        self.n_queries = cfg.n_queries
        self.d_model = cfg.d_model
        self.n_classes = cfg.n_classes
        d = cfg.d_model

        self.backbone = Backbone(cfg)
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, d, kernel_size=1), nn.GroupNorm(cfg.n_groups, d))
            for c in self.backbone.num_channels)
        self.level_embed = nn.Parameter(torch.zeros(len(self.backbone.num_channels), d))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))

        self.query_content = nn.Embedding(cfg.n_queries, d)
        self.query_anchors = nn.Parameter(inverse_sigmoid(_grid_anchors(cfg.n_queries)))
        self.anchor_proj = MLP(4, d, d, 2)
        layer = DecoderLayer(cfg)
        self.decoder = nn.ModuleList(copy.deepcopy(layer) for _ in range(cfg.n_dec_layers))

        # linear class head, 3-layer MLP with ReLU for boxes
        self.class_head = nn.Linear(d, cfg.n_classes)
        self.box_head = MLP(d, d, 4, 3)
        self._reset_parameters(cfg)

    def _reset_parameters(self, cfg):
        nn.init.normal_(self.level_embed, std=0.02)
        nn.init.normal_(self.query_content.weight, std=0.02)
        bias_value = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)
        nn.init.constant_(self.class_head.bias, bias_value)
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.zeros_(self.box_head.layers[-1].bias)

    def backbone_forward(self, images):
        if not torch.isfinite(images).all():
            raise ValueError("Non-finite values in the input images")
        return self.backbone(images)

    def _flatten_features(self, features):
        tokens, pos = [], []
        for level, (feat, proj) in enumerate(zip(features, self.input_proj)):
            x = proj(feat)
            _, _, h, w = x.shape
            tokens.append(x.flatten(2).transpose(1, 2))
            pos.append(sine_position_embedding(h, w, self.d_model, device=x.device, dtype=x.dtype)
                       + self.level_embed[level])
        return torch.cat(tokens, dim=1), torch.cat(pos, dim=0).unsqueeze(0)

    def encode_decode(self, features, return_intermediate=False):
        """Runs encoder and decoder over backbone features.

        Returns:
            Z (B x N x d) final-layer query embeddings, and when
            ``return_intermediate`` also the list of every decoder layer output.
        """
        memory, memory_pos = self._flatten_features(features)
        for layer in self.encoder:
            memory = layer(memory, memory_pos)

        b = memory.shape[0]
        query_pos = self.anchor_proj(self.query_anchors.sigmoid()).unsqueeze(0).expand(b, -1, -1)
        tgt = self.query_content.weight.unsqueeze(0).expand(b, -1, -1)
        hidden = []
        for layer in self.decoder:
            tgt = layer(tgt, query_pos, memory, memory_pos)
            hidden.append(tgt)
        if return_intermediate:
            return tgt, hidden
        return tgt

    def predict_heads(self, Z):
        return Predictions(class_logits=self.class_head(Z),
                           boxes=self.box_head(Z).sigmoid())

    def forward(self, images):
        features = self.backbone_forward(images)
        Z, hidden = self.encode_decode(features, return_intermediate=True)
        predictions = self.predict_heads(Z)
        aux = [self.predict_heads(h) for h in hidden[:-1]]
        return {'features': features,
                'queries': Z,
                'pred_logits': predictions.class_logits,
                'pred_boxes': predictions.boxes,
                'aux_outputs': [{'pred_logits': p.class_logits, 'pred_boxes': p.boxes} for p in aux]}


def as_predictions(outputs):
    return Predictions(class_logits=outputs['pred_logits'], boxes=outputs['pred_boxes'])


def argmax_class(predictions):
    """Per-query predicted category; ties resolve to the lowest index."""
    return predictions.class_logits.argmax(dim=-1)


def query_scores(predictions):
    """Returns (max per-class sigmoid score, argmax class) for every query."""
    classes = argmax_class(predictions)
    scores = predictions.class_logits.gather(-1, classes.unsqueeze(-1)).squeeze(-1).sigmoid()
    return scores, classes
