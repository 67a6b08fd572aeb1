"""Transformer backbone: check-in tokens, sequence encoding, POI scoring.

The encoder input is [user token; k suffix tokens; graph token] plus a
learnable positional table. Padded suffix positions are attention-masked,
and the prediction state is read from the final (graph token) position so
it attends over the whole sequence.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig


class TrajectoryBackbone(nn.Module):
    def __init__(self, num_pois: int, num_users: int, num_categories: int,
                 suffix_len: int, cfg: ModelConfig,
                 poi_coords: torch.Tensor, poi_categories: torch.Tensor):
        """``poi_coords`` is the (P, 2) standardized lat/lon table and
        ``poi_categories`` the (P,) category index per POI."""
        super().__init__()
        self.num_pois = num_pois
        self.suffix_len = suffix_len
        self.pad_poi = num_pois
        hidden = cfg.hidden_dim

        # Pad rows live at index P (POIs) and C (categories).
        self.poi_embedding = nn.Embedding(num_pois + 1, cfg.poi_dim)
        self.category_embedding = nn.Embedding(num_categories + 1, cfg.category_dim)
        self.user_embedding = nn.Embedding(num_users, hidden)
        self.positional = nn.Parameter(torch.zeros(suffix_len + 2, hidden))
        nn.init.normal_(self.positional, std=0.02)

        coords = torch.zeros(num_pois + 1, 2)
        coords[:num_pois] = poi_coords
        self.register_buffer("poi_coords", coords)
        categories = torch.full((num_pois + 1,), num_categories, dtype=torch.long)
        categories[:num_pois] = poi_categories.long()
        self.register_buffer("poi_to_category", categories)

        self.token_mlp = nn.Sequential(
            nn.Linear(cfg.poi_dim + cfg.category_dim + 2, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
        )
        self.embedding_dropout = nn.Dropout(cfg.embedding_dropout)
        self.output_dropout = nn.Dropout(cfg.output_dropout)

        layer = nn.TransformerEncoderLayer(
            d_model=hidden,
            nhead=cfg.num_heads,
            dim_feedforward=cfg.feedforward_dim,
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.num_layers)
        self.output_head = nn.Linear(hidden, num_pois)

    def tokenize(self, suffix: torch.Tensor) -> torch.Tensor:
        """Map (B, k) POI indices to (B, k, hidden) check-in tokens."""
        cat_idx = self.poi_to_category[suffix]
        poi_emb = self.poi_embedding(suffix)
        cat_emb = self.category_embedding(cat_idx)
        emb = self.embedding_dropout(torch.cat([poi_emb, cat_emb], dim=-1))
        coords = self.poi_coords[suffix]
        return self.token_mlp(torch.cat([emb, coords], dim=-1))

    def encode(self, user: torch.Tensor, tokens: torch.Tensor,
               pad_mask: torch.Tensor, graph_token: torch.Tensor) -> torch.Tensor:
        """Run the encoder; returns the prediction state h (B, hidden).

        ``pad_mask`` is True at padded suffix positions; the user and graph
        positions are always attended.
        """
        batch = tokens.shape[0]
        user_tok = self.user_embedding(user).unsqueeze(1)
        seq = torch.cat([user_tok, tokens, graph_token.unsqueeze(1)], dim=1)
        seq = seq + self.positional.unsqueeze(0)

        keep = torch.zeros(batch, 1, dtype=torch.bool, device=tokens.device)
        key_padding = torch.cat([keep, pad_mask, keep], dim=1)
        encoded = self.encoder(seq, src_key_padding_mask=key_padding)
        return encoded[:, -1, :]

    def core_score(self, state: torch.Tensor) -> torch.Tensor:
        """Per-POI logits w_d . h + b_d; the pad row is not a candidate."""
        return self.output_head(self.output_dropout(state))
