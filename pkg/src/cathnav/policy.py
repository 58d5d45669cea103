"""Goal-conditioned vision-to-action policy and the kinematics-only baseline.

Pipeline for a window of ``seq_len`` frames (tokens ``(B, N, P, d)``) and
standardised joystick states ``(B, N, 3)``:

    states -> linear projection -> + state positions ---------+ (queries)
    tokens -> + frame positions (shared by all patches) ------+ (keys/values)
    -> LayerNorm both -> frame-causal cross-attention -> LayerNorm     = H
    -> causal pre-LN transformer encoder -> LayerNorm                  = H^
    -> sigmoid-gated blend with the goal CLS embedding                 = Z
    -> MLP on the last time step -> next joystick state (raw units)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

CONDITIONS = ("baseline", "false_goal", "no_goal", "no_vision", "no_states")


@dataclass
class PolicyConfig:
    seq_len: int = 50         # N
    num_tokens: int = 257     # P, CLS included
    dim: int = 384            # d
    cross_heads: int = 8
    tf_layers: int = 4
    tf_heads: int = 8
    ffn_dim: int = 1024
    head_dims: tuple = (512, 256, 128, 3)
    dropout: float = 0.1      # inside transformer layers only
    mask_neg: float = -1e9

    def __post_init__(self):
        self.head_dims = tuple(int(h) for h in self.head_dims)
        if self.dim % self.cross_heads or self.dim % self.tf_heads:
            raise ValueError(f"dim {self.dim} must be divisible by cross_heads "
                             f"{self.cross_heads} and tf_heads {self.tf_heads}")
        if not self.head_dims or self.head_dims[-1] != 3:
            raise ValueError("head_dims must end in 3")
        if min(self.seq_len, self.num_tokens, self.dim, self.tf_layers) < 1:
            raise ValueError("seq_len, num_tokens, dim and tf_layers must be positive")


@dataclass
class LSTMConfig:
    hidden: int = 128
    layers: int = 2
    head_dims: tuple = field(default=(64, 3))


def build_cross_mask(n: int, p: int, neg: float = -1e9) -> torch.Tensor:
    """Additive mask ``(n, n*p)``: query t sees every token of frames 0..t.

    Keys are frame-major (all tokens of frame 0, then frame 1, ...).
    """
    key_frame = torch.arange(n * p) // p
    allowed = key_frame[None, :] <= torch.arange(n)[:, None]
    return torch.where(allowed, 0.0, neg)


def build_temporal_mask(n: int, neg: float = -1e9) -> torch.Tensor:
    return build_cross_mask(n, 1, neg)


def check_condition(condition: str) -> str:
    if condition not in CONDITIONS:
        raise ValueError(f"unknown ablation condition {condition!r}; expected one of {CONDITIONS}")
    return condition


class CVAPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        n, d = cfg.seq_len, cfg.dim
        self.state_proj = nn.Linear(3, d)
        self.state_pos = nn.Parameter(torch.randn(n, d) * 0.02)
        self.frame_pos = nn.Parameter(torch.randn(n, d) * 0.02)
        self.state_norm = nn.LayerNorm(d)
        self.frame_norm = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, cfg.cross_heads, batch_first=True)
        self.fused_norm = nn.LayerNorm(d)
        layer = nn.TransformerEncoderLayer(
            d, cfg.tf_heads, cfg.ffn_dim, cfg.dropout, activation="gelu",
            batch_first=True, norm_first=True)
        self.temporal = nn.TransformerEncoder(layer, cfg.tf_layers, norm=nn.LayerNorm(d),
                                              enable_nested_tensor=False)
        self.gate = nn.Linear(2 * d, d)
        layers, width = [], d
        for i, h in enumerate(cfg.head_dims):
            layers.append(nn.Linear(width, h))
            if i < len(cfg.head_dims) - 1:
                layers.append(nn.ReLU())
            width = h
        self.head = nn.Sequential(*layers)
        self.register_buffer("cross_mask", build_cross_mask(n, cfg.num_tokens, cfg.mask_neg),
                             persistent=False)
        self.register_buffer("temporal_mask", build_temporal_mask(n, cfg.mask_neg),
                             persistent=False)

    def project_states(self, states: torch.Tensor) -> torch.Tensor:
        return self.state_proj(states)

    def add_positional(self, tokens: torch.Tensor, states_hat: torch.Tensor):
        n = self.cfg.seq_len
        if tokens.shape[-3] != n or states_hat.shape[-2] != n:
            raise ValueError(f"sequence length must be {n}, got tokens {tuple(tokens.shape)} "
                             f"and states {tuple(states_hat.shape)}")
        return tokens + self.frame_pos[:, None, :], states_hat + self.state_pos

    def cross_attend(self, states_tilde: torch.Tensor, tokens_tilde: torch.Tensor,
                     need_weights: bool = False):
        b, n, p, d = tokens_tilde.shape
        if (n, p, d) != (self.cfg.seq_len, self.cfg.num_tokens, self.cfg.dim):
            raise ValueError(f"expected tokens (B, {self.cfg.seq_len}, {self.cfg.num_tokens}, "
                             f"{self.cfg.dim}), got {tuple(tokens_tilde.shape)}")
        q = self.state_norm(states_tilde)
        kv = self.frame_norm(tokens_tilde).reshape(b, n * p, d)
        out, weights = self.cross_attn(q, kv, kv, attn_mask=self.cross_mask,
                                       need_weights=need_weights, average_attn_weights=False)
        fused = self.fused_norm(out)
        return (fused, weights) if need_weights else fused

    def temporal_encode(self, fused: torch.Tensor) -> torch.Tensor:
        return self.temporal(fused, mask=self.temporal_mask)

    def gated_goal_fusion(self, h_hat: torch.Tensor, goal: torch.Tensor) -> torch.Tensor:
        g = goal[:, None, :].expand_as(h_hat)
        gate = torch.sigmoid(self.gate(torch.cat([h_hat, g], dim=-1)))
        return gate * h_hat + (1 - gate) * g

    def action_head(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(z[:, -1])

    def stages(self, tokens, states, goal, condition: str = "baseline") -> dict:
        """Every intermediate representation, keyed by stage name."""
        check_condition(condition)
        if condition == "no_vision":
            tokens = torch.zeros_like(tokens)
        if condition == "no_states":
            states = torch.zeros_like(states)
        s_hat = self.project_states(states)
        f_tilde, s_tilde = self.add_positional(tokens, s_hat)
        h = self.cross_attend(s_tilde, f_tilde)
        h_hat = self.temporal_encode(h)
        z = h_hat if condition == "no_goal" else self.gated_goal_fusion(h_hat, goal)
        return {"projected": s_hat, "states_pos": s_tilde, "frames_pos": f_tilde,
                "fused": h, "contextual": h_hat, "conditioned": z, "action": self.action_head(z)}

    def forward(self, tokens, states, goal, condition: str = "baseline") -> torch.Tensor:
        return self.stages(tokens, states, goal, condition)["action"]


class LSTMBaseline(nn.Module):
    """Kinematics-only recurrent regressor over the standardised state window."""

    def __init__(self, cfg: LSTMConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or LSTMConfig()
        self.lstm = nn.LSTM(3, cfg.hidden, cfg.layers, batch_first=True)
        layers, width = [], cfg.hidden
        for i, h in enumerate(cfg.head_dims):
            layers.append(nn.Linear(width, h))
            if i < len(cfg.head_dims) - 1:
                layers.append(nn.ReLU())
            width = h
        self.head = nn.Sequential(*layers)

    def forward(self, tokens, states, goal, condition: str = "baseline") -> torch.Tensor:
        check_condition(condition)
        if condition == "no_states":
            states = torch.zeros_like(states)
        out, _ = self.lstm(states)
        return self.head(out[:, -1])


def count_params(model: nn.Module, encoder: nn.Module | None = None) -> tuple[int, int]:
    """(total, trainable) parameter counts; encoder parameters count as frozen."""
    modules = [model] + ([encoder] if encoder is not None else [])
    total = sum(p.numel() for m in modules for p in m.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    if encoder is not None:
        trainable += sum(p.numel() for p in encoder.parameters() if p.requires_grad)
    return total, trainable


def expected_trainable_params(cfg: PolicyConfig) -> int:
    """Closed-form parameter tally of :class:`CVAPolicy`."""
    d, n = cfg.dim, cfg.seq_len
    ln = 2 * d
    mha = 4 * (d * d + d)
    encoder_layer = mha + (d * cfg.ffn_dim + cfg.ffn_dim) + (cfg.ffn_dim * d + d) + 2 * ln
    head, width = 0, d
    for h in cfg.head_dims:
        head += width * h + h
        width = h
    return ((3 * d + d) + 2 * n * d + 2 * ln + mha + ln
            + cfg.tf_layers * encoder_layer + ln + (2 * d * d + d) + head)
