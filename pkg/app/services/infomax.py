"""
Contrastive Objective
Location-wise residual heads, pairwise dot-product scores and the infoNCE bound
summed over layer pairs and locations
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn as nn

from app.config import EncoderConfig, PretrainConfig
from app.exceptions import ScoreError
from app.models import FeaturePyramid, LayerPair, LossReduction, NegativeMode, ScoreTensor

logger = logging.getLogger(__name__)


class ContrastiveHead(nn.Module):
    """
    phi(x) = W2 relu(bn(W1 x)) + Ws x, every map a 1x1x1 convolution so the same
    weights apply at every grid location.
    """

    def __init__(self, in_channels: int, out_dim: int = 512, hidden: int = 512, norm: bool = True):
        super().__init__()
        self.hidden = nn.Conv3d(in_channels, hidden, kernel_size=1, bias=not norm)
        self.norm = nn.BatchNorm3d(hidden) if norm else nn.Identity()
        self.relu = nn.ReLU(inplace=True)
        self.out = nn.Conv3d(hidden, out_dim, kernel_size=1)
        self.shortcut = nn.Conv3d(in_channels, out_dim, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.relu(self.norm(self.hidden(x)))) + self.shortcut(x)


class ContrastiveHeads(nn.Module):
    """One head per layer; every head projects into the same output dimension"""

    def __init__(self, channels: Dict[int, int], out_dim: int = 512, hidden: int = 512):
        super().__init__()
        self.out_dim = out_dim
        self.heads = nn.ModuleDict({
            str(layer): ContrastiveHead(in_channels, out_dim, hidden) for layer, in_channels in sorted(channels.items())
        })

    @property
    def layers(self) -> List[int]:
        return sorted(int(layer) for layer in self.heads)

    def __getitem__(self, layer: int) -> ContrastiveHead:
        return self.heads[str(layer)]

    def forward(self, pyramid: FeaturePyramid, layers: Optional[Iterable[int]] = None) -> FeaturePyramid:
        return apply_heads(pyramid, self, layers)


def build_heads(channels_at, layers: Iterable[int], cfg: EncoderConfig) -> ContrastiveHeads:
    """Heads for `layers`, input widths looked up through `channels_at(layer)`"""
    return ContrastiveHeads({layer: channels_at(layer) for layer in layers}, cfg.head_dim, cfg.head_hidden)


def apply_heads(pyramid: FeaturePyramid, heads: ContrastiveHeads,
                layers: Optional[Iterable[int]] = None) -> FeaturePyramid:
    """Project every requested tap through its head; grid geometry is preserved"""
    layers = heads.layers if layers is None else sorted(set(layers))
    projected = {}
    for layer in layers:
        if layer not in pyramid:
            raise ScoreError(f"layer {layer} is missing from the feature pyramid (taps {pyramid.layers})")
        if str(layer) not in heads.heads:
            raise ScoreError(f"no contrastive head for layer {layer} (heads {heads.layers})")
        projected[layer] = heads[layer](pyramid[layer])
    return FeaturePyramid(taps=projected)


def temporal_difference(grid: torch.Tensor) -> torch.Tensor:
    """
    Split a (B, C, T, X, Y) grid into temporal halves and return second - first,
    a grid with T / 2 steps.
    """
    t = grid.shape[2]
    if t % 2:
        raise ScoreError(f"temporal difference needs an even temporal extent, got T={t}")
    half = t // 2
    return grid[:, :, half:] - grid[:, :, :half]


def difference_pyramid(first: FeaturePyramid, second: FeaturePyramid) -> FeaturePyramid:
    """Stack two consecutive segments' grids along time and take their temporal difference"""
    return FeaturePyramid(taps={
        layer: temporal_difference(torch.cat([first[layer], second[layer]], dim=2)) for layer in first.layers
    })


def soft_clip(scores: torch.Tensor, bound: Optional[float]) -> torch.Tensor:
    if bound is None:
        return scores
    return bound * torch.tanh(scores / bound)


def positive_scores(proj1: FeaturePyramid, proj2: FeaturePyramid,
                    pairs: Sequence[LayerPair]) -> Dict[LayerPair, torch.Tensor]:
    """s+ for every (j, j'): (B, N_j, N_j') dot products between views of the same sample"""
    return {
        (j, jp): torch.einsum("bnc,bmc->bnm", proj1.flatten(j), proj2.flatten(jp))
        for j, jp in dict.fromkeys(pairs)
    }


def negative_scores(proj1: FeaturePyramid, proj2: FeaturePyramid,
                    pairs: Sequence[LayerPair]) -> Dict[LayerPair, torch.Tensor]:
    """s- for every (j, j'): (B, N_j, B, N_j') scores against every consequent of the batch"""
    return {
        (j, jp): torch.einsum("bnc,xmc->bnxm", proj1.flatten(j), proj2.flatten(jp))
        for j, jp in dict.fromkeys(pairs)
    }


def compute_scores(proj1: FeaturePyramid, proj2: FeaturePyramid, pairs: Sequence[LayerPair],
                   score_clip: Optional[float] = None) -> ScoreTensor:
    """Both score sets from one batched product; positives are the batch diagonal of negatives"""
    negatives = {pair: soft_clip(value, score_clip) for pair, value in negative_scores(proj1, proj2, pairs).items()}
    positives = {
        pair: torch.diagonal(value, dim1=0, dim2=2).permute(2, 0, 1)
        for pair, value in negatives.items()
    }
    return ScoreTensor(positives=positives, negatives=negatives)


@dataclass
class InfoNCEResult:
    """Loss plus per-pair estimates; `estimates[pair]` is (B, N_j, N_j')"""
    loss: torch.Tensor
    estimates: Dict[LayerPair, torch.Tensor] = field(default_factory=dict)
    denominator_terms: Dict[LayerPair, int] = field(default_factory=dict)

    def mi(self) -> Dict[str, float]:
        return {f"mi/j{j}_jp{jp}": float(value.detach().mean()) for (j, jp), value in sorted(self.estimates.items())}


def infonce(
    scores: ScoreTensor,
    pairs: Optional[Sequence[LayerPair]] = None,
    negative_mode: NegativeMode = NegativeMode.ALL_LOCATIONS,
    reduction: LossReduction = LossReduction.SUM,
    include_self: bool = True,
) -> InfoNCEResult:
    """
    log(exp(s+) / sum exp(s-)) per (sample, i, i', j, j').

    In all_locations mode the denominator runs over every batch sample and every
    consequent location (B * N_j' terms); fixed_pair keeps i' fixed (B terms).
    The positive's own term is part of the denominator unless include_self is False.
    Loss is minus the estimate averaged over samples, then summed (or averaged)
    over locations, and summed over layer pairs with repeated pairs counted again.
    """
    pairs = list(pairs) if pairs is not None else scores.pairs
    weights = Counter(pairs)
    estimates: Dict[LayerPair, torch.Tensor] = {}
    terms: Dict[LayerPair, int] = {}
    loss = None

    for pair in dict.fromkeys(pairs):
        if pair not in scores.negatives:
            raise ScoreError(f"no scores for layer pair {pair}")
        positive, negative = scores.positives[pair], scores.negatives[pair]
        if not torch.isfinite(negative).all() or not torch.isfinite(positive).all():
            raise ScoreError(f"non-finite scores for layer pair j={pair[0]}, j'={pair[1]}")

        batch = negative.shape[0]
        if not include_self:
            if batch < 2:
                raise ScoreError(f"layer pair {pair}: batch of 1 without self terms has no negatives")
            mask = torch.eye(batch, dtype=torch.bool, device=negative.device)[:, None, :, None]
            negative = negative.masked_fill(mask, float("-inf"))

        if negative_mode is NegativeMode.ALL_LOCATIONS:
            log_denominator = torch.logsumexp(negative.flatten(start_dim=2), dim=2)[:, :, None]
            count = (batch - (0 if include_self else 1)) * negative.shape[3]
        else:
            log_denominator = torch.logsumexp(negative, dim=2)
            count = batch - (0 if include_self else 1)

        if not include_self:
            # the positive is not among the masked negatives, so it is added back
            log_denominator = torch.logaddexp(log_denominator, positive)
            count += 1

        estimate = positive - log_denominator
        estimates[pair] = estimate
        terms[pair] = count

        per_sample = estimate.flatten(start_dim=1)
        value = per_sample.sum(dim=1) if reduction is LossReduction.SUM else per_sample.mean(dim=1)
        term = -weights[pair] * value.mean()
        loss = term if loss is None else loss + term

    if loss is None:
        raise ScoreError("no layer pairs to evaluate")
    return InfoNCEResult(loss=loss, estimates=estimates, denominator_terms=terms)


def scalar_infonce_loss(
    proj1: Dict[int, List[List[List[float]]]],
    proj2: Dict[int, List[List[List[float]]]],
    pairs: Sequence[LayerPair],
    negative_mode: NegativeMode = NegativeMode.ALL_LOCATIONS,
) -> float:
    """
    Plain-loop evaluation of the summed objective on nested lists
    proj[layer][sample][location] -> vector, used as an oracle for `infonce`.
    """

    def dot(u, v):
        return sum(a * b for a, b in zip(u, v))

    total = 0.0
    for j, jp in pairs:
        batch = len(proj1[j])
        pair_total = 0.0
        for x in range(batch):
            for i, antecedent in enumerate(proj1[j][x]):
                for ip, consequent in enumerate(proj2[jp][x]):
                    positive = dot(antecedent, consequent)
                    if negative_mode is NegativeMode.ALL_LOCATIONS:
                        negatives = [dot(antecedent, other) for xp in range(batch) for other in proj2[jp][xp]]
                    else:
                        negatives = [dot(antecedent, proj2[jp][xp][ip]) for xp in range(batch)]
                    peak = max(negatives)
                    log_denominator = peak + math.log(sum(math.exp(s - peak) for s in negatives))
                    pair_total += positive - log_denominator
        total -= pair_total / batch
    return total


class InfoMaxObjective(nn.Module):
    """
    Heads plus the summed infoNCE objective for a fixed set of layer pairs
    """

    def __init__(self, heads: ContrastiveHeads, pairs: Sequence[LayerPair],
                 negative_mode: NegativeMode = NegativeMode.ALL_LOCATIONS,
                 reduction: LossReduction = LossReduction.SUM,
                 score_clip: Optional[float] = None):
        super().__init__()
        self.heads = heads
        self.pairs = list(pairs)
        self.negative_mode = negative_mode
        self.reduction = reduction
        self.score_clip = score_clip
        self.antecedent_layers = sorted({j for j, _ in self.pairs})
        self.consequent_layers = sorted({jp for _, jp in self.pairs})

    def scores(self, antecedent: FeaturePyramid, consequent: FeaturePyramid) -> ScoreTensor:
        proj1 = apply_heads(antecedent, self.heads, self.antecedent_layers)
        proj2 = apply_heads(consequent, self.heads, self.consequent_layers)
        return compute_scores(proj1, proj2, self.pairs, self.score_clip)

    def forward(self, antecedent: FeaturePyramid, consequent: FeaturePyramid) -> InfoNCEResult:
        return infonce(self.scores(antecedent, consequent), self.pairs, self.negative_mode, self.reduction)


def get_infomax_objective(encoder_cfg: EncoderConfig, pretrain_cfg: PretrainConfig, channels_at) -> InfoMaxObjective:
    pairs = pretrain_cfg.layer_pairs.pairs()
    layers = sorted({layer for pair in pairs for layer in pair})
    heads = build_heads(channels_at, layers, encoder_cfg)
    logger.info(f"Contrastive objective over pairs {pairs} ({pretrain_cfg.negative_mode.value} negatives)")
    return InfoMaxObjective(heads, pairs, pretrain_cfg.negative_mode, pretrain_cfg.loss_reduction,
                            pretrain_cfg.score_clip)
