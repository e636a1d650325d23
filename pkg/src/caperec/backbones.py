"""DIN-style target attention and SASRec-style causal self-attention.

Both backbones embed each item as ``item_emb ⊕ category_emb`` (width
``d = 2 * emb_dim``), take position information from any of the five PE
variants, and end in the same prediction head over
``concat(user_vector, target, user_vector * target)``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, LengthError
from .nn import MLP, Embedding, LayerNorm, Linear, Module
from .position import VARIANTS, CapeEncoder, CopeEncoder, NaiveEncoder, PEConfig
from .seeding import rng_for

BACKBONES = ("din", "sasrec")


@dataclass
class ModelConfig:
    backbone: str = "din"
    pe: PEConfig = field(default_factory=PEConfig)
    n_items: int = 2
    n_cats: int = 2
    emb_dim: int = 64
    attn_hidden: list = field(default_factory=lambda: [80, 40])
    head_hidden: list = field(default_factory=lambda: [200, 80])
    n_heads: int = 1
    n_blocks: int = 2
    ffn_mult: int = 2
    din_use_diff: bool = True

    def __post_init__(self):
        if isinstance(self.pe, dict):
            self.pe = PEConfig(**self.pe)
        if not self.pe.d:
            self.pe.d = self.d

    @property
    def d(self):
        return 2 * self.emb_dim

    @property
    def n_max(self):
        return self.pe.n_max

    def problems(self):
        errs = []
        if self.backbone not in BACKBONES:
            errs.append(f"model.backbone={self.backbone!r} is not one of {', '.join(BACKBONES)}")
        if self.emb_dim < 1:
            errs.append(f"model.emb_dim={self.emb_dim} must be >= 1")
        if self.pe.d != self.d:
            errs.append(f"pe.d={self.pe.d} must equal 2 * emb_dim = {self.d}")
        if self.n_items < 2 or self.n_cats < 2:
            errs.append("model.n_items and model.n_cats must be >= 2 (ids 0 and 1 are reserved)")
        if self.backbone == "sasrec":
            if self.n_heads not in (1, 2, 4, 8):
                errs.append(f"model.n_heads={self.n_heads} must be one of 1, 2, 4, 8")
            elif self.d % self.n_heads:
                errs.append(f"d={self.d} is not divisible by n_heads={self.n_heads}")
            elif self.pe.variant == "rope" and (self.d // self.n_heads) % 2:
                errs.append(f"rope needs an even head width, got {self.d // self.n_heads}")
            if self.n_blocks < 1:
                errs.append(f"model.n_blocks={self.n_blocks} must be >= 1")
        errs.extend(p for p in self.pe.problems() if p not in errs)
        return errs

    def validate(self):
        errs = self.problems()
        if errs:
            raise ConfigError("invalid model config:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        pe = PEConfig(**raw.pop("pe", {}))
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(pe=pe, **raw)


@dataclass
class AttentionOutput:
    weights: ad.Tensor
    pooled: ad.Tensor


@dataclass
class ForwardOutput:
    logits: ad.Tensor
    probs: ad.Tensor


# ---------------------------------------------------------------- shared pieces


def _broadcast_rows(x, n):
    """``(B, d) -> (B, n, d)`` by repetition (differentiable)."""
    b, d = x.shape
    return x.reshape((b, 1, d)) + np.zeros((b, n, d))


def din_attention_logits(target, context, mlp, use_diff=True):
    """Per-item logit ``MLP(t ⊕ h ⊕ (t - h) ⊕ t*h)``; ``(B, d), (B, n, d) -> (B, n)``."""
    if target.shape[-1] != context.shape[-1]:
        raise ConfigError(f"target width {target.shape[-1]} != context width {context.shape[-1]}")
    t = _broadcast_rows(target, context.shape[1])
    parts = [t, context, t - context, t * context] if use_diff else [t, context, t * context]
    out = mlp(ad.concat_lastdim(parts))
    return out.reshape(out.shape[:-1])


def attention_weights_and_pool(item_logits, pos_logits, context, mask=None):
    """Softmax over ``item_logits + pos_logits`` (masked), then weighted sum of context rows."""
    logits = item_logits if pos_logits is None else item_logits + pos_logits
    weights = ad.softmax_lastdim(logits, mask)
    b, n = weights.shape
    pooled = ad.matmul(weights.reshape((b, 1, n)), context)
    return AttentionOutput(weights=weights, pooled=pooled.reshape((b, context.shape[-1])))


def predict_head(pooled, target, extras, mlp):
    """Scalar logit from ``MLP(pooled ⊕ target ⊕ extras)``; apply a sigmoid for the probability."""
    x = ad.concat_lastdim([pooled, target] + ([extras] if extras is not None else []))
    if x.shape[-1] != mlp.layers[0].fan_in:
        raise ConfigError(f"prediction head expects width {mlp.layers[0].fan_in}, got {x.shape[-1]}")
    out = mlp(x)
    return out.reshape(out.shape[:-1])


class SequenceModel(Module):
    """Embedding tables plus everything shared by both backbones."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng_for(seed, "init")
        self.rng_init = rng
        self.item_emb = self.child("item_emb", Embedding(rng, cfg.n_items, cfg.emb_dim))
        self.cat_emb = self.child("cat_emb", Embedding(rng, cfg.n_cats, cfg.emb_dim))

    def embed(self, items, cats):
        return ad.concat_lastdim([self.item_emb(items), self.cat_emb(cats)])

    def _trim(self, batch):
        lengths = np.asarray(batch.lengths)
        if lengths.min() < 1:
            raise ConfigError("every example needs at least one context item")
        width = int(lengths.max())
        if width > self.cfg.n_max:
            raise LengthError(f"context length {width} exceeds n_max={self.cfg.n_max}")
        return (
            np.asarray(batch.items)[:, :width],
            np.asarray(batch.cats)[:, :width],
            np.arange(width)[None, :] < lengths[:, None],
            lengths,
        )

    def forward(self, batch):
        logits = self.logits(batch)
        return ForwardOutput(logits=logits, probs=ad.sigmoid(logits))

    __call__ = forward

    def loss(self, batch):
        return ad.bce_loss(self.forward(batch).probs, np.asarray(batch.labels, dtype=np.float64))

    def predict(self, batch):
        with ad.no_grad():
            return self.forward(batch).probs.data.copy()


class DIN(SequenceModel):
    def __init__(self, cfg, seed=0):
        super().__init__(cfg, seed)
        rng, d, pe = self.rng_init, cfg.d, cfg.pe
        self.naive = self.cope = self.cape = None
        if pe.variant == "naive":
            self.naive = self.child("pe", NaiveEncoder(rng, d, pe.n_max))
        elif pe.variant == "cope":
            self.cope = self.child("pe", CopeEncoder(rng, d, pe.n_max, pe.cope_p_max, pe.gate_sim_scale))
        elif pe.variant == "cape":
            self.cape = self.child("pe", CapeEncoder(rng, d, pe.d_pos, pe.n_max, pe.gate_sim_scale))
        width = 4 * d if cfg.din_use_diff else 3 * d
        self.attn = self.child("attn", MLP(rng, width, cfg.attn_hidden, 1))
        self.head = self.child("head", MLP(rng, 3 * d, cfg.head_hidden, 1))

    def attend(self, batch):
        items, cats, mask, lengths = self._trim(batch)
        context = self.embed(items, cats)
        target = self.embed(np.asarray(batch.target_items), np.asarray(batch.target_cats))
        keys = values = context
        pos_logits = None
        variant = self.cfg.pe.variant
        if variant == "naive":
            keys = values = self.naive(context)
        elif variant == "rope":
            # distance to the target: the most recent item sits at 1
            dist = lengths[:, None] - np.arange(context.shape[1])[None, :]
            keys = ad.rope_rotate(context, dist, self.cfg.pe.rope_base)
        elif variant in ("cope", "cape"):
            enc = self.cope if variant == "cope" else self.cape
            b, d = target.shape
            q = target.reshape((b, 1, d))
            pos_logits = enc.logits(q, context, mask[:, None, :])
            pos_logits = pos_logits.reshape((b, context.shape[1]))
        item_logits = din_attention_logits(target, keys, self.attn, self.cfg.din_use_diff)
        return attention_weights_and_pool(item_logits, pos_logits, values, mask), target

    def logits(self, batch):
        att, target = self.attend(batch)
        return predict_head(att.pooled, target, att.pooled * target, self.head)

    def candidate_scores(self, batch, cand_items, cand_cats):
        """Click logits for every candidate target, ``(B, C)``; evaluation only."""
        cand_items = np.asarray(cand_items)
        b, c = cand_items.shape
        tiled = _TiledBatch(batch, c, cand_items.reshape(-1), np.asarray(cand_cats).reshape(-1))
        with ad.no_grad():
            return self.logits(tiled).data.reshape(b, c)


class _TiledBatch:
    """Each example repeated ``c`` times with a different target."""

    def __init__(self, batch, c, targets, target_cats):
        self.items = np.repeat(np.asarray(batch.items), c, axis=0)
        self.cats = np.repeat(np.asarray(batch.cats), c, axis=0)
        self.lengths = np.repeat(np.asarray(batch.lengths), c)
        self.target_items = targets
        self.target_cats = target_cats


class SelfAttentionBlock(Module):
    """Pre-norm causal multi-head attention + SiLU feed-forward, both residual."""

    def __init__(self, rng, cfg):
        super().__init__()
        d, h = cfg.d, cfg.n_heads
        self.cfg, self.n_heads, self.dh = cfg, h, d // h
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.wq = self.child("wq", Linear(rng, d, d))
        self.wk = self.child("wk", Linear(rng, d, d))
        self.wv = self.child("wv", Linear(rng, d, d))
        self.wo = self.child("wo", Linear(rng, d, d))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.ffn1 = self.child("ffn1", Linear(rng, d, cfg.ffn_mult * d))
        self.ffn2 = self.child("ffn2", Linear(rng, cfg.ffn_mult * d, d))
        pe = cfg.pe
        self.cope = self.cape = None
        if pe.variant == "cope":
            self.cope = self.child("pe", CopeEncoder(rng, self.dh, pe.n_max, pe.cope_p_max, pe.gate_sim_scale))
        elif pe.variant == "cape":
            self.cape = self.child("pe", CapeEncoder(rng, self.dh, pe.d_pos, pe.n_max, pe.gate_sim_scale))

    def _heads(self, x):
        b, n, _ = x.shape
        return x.reshape((b, n, self.n_heads, self.dh)).swapaxes(1, 2)

    def __call__(self, x, key_mask, cape_gates=None):
        return self_attention_block(x, self, key_mask, cape_gates=cape_gates)


def causal_mask(key_mask):
    """``(B, n)`` key padding mask -> ``(B, 1, n, n)`` causal attention mask."""
    n = key_mask.shape[1]
    tri = np.tril(np.ones((n, n), dtype=bool))
    return tri[None, None, :, :] & key_mask[:, None, None, :]


def self_attention_block(x, block, key_mask, cape_gates=None, return_weights=False):
    """One causal block over ``x (B, n, d)``.

    CAPE treats each query position as the target: ``g_ij = 1 - sigmoid(q_i.k_j / sqrt(dh))``
    and ``p_ij = sum_{k=j..i} g_ik``. ``cape_gates`` overrides the gates (tests only).
    """
    cfg = block.cfg
    b, n, d = x.shape
    if n > cfg.n_max:
        raise LengthError(f"context length {n} exceeds n_max={cfg.n_max}")
    mask = causal_mask(key_mask)
    hn = block.ln1(x)
    q, k, v = block._heads(block.wq(hn)), block._heads(block.wk(hn)), block._heads(block.wv(hn))
    if cfg.pe.variant == "rope":
        pos = np.arange(n, dtype=np.float64)
        q = ad.rope_rotate(q, pos, cfg.pe.rope_base)
        k = ad.rope_rotate(k, pos, cfg.pe.rope_base)
    logits = ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(block.dh))
    if block.cape is not None:
        gates = None
        if cape_gates is not None:
            gates = np.where(mask, cape_gates, 0.0) * np.ones(logits.shape)
        logits = logits + block.cape.logits(q, k, mask, gates=gates)
    elif block.cope is not None:
        logits = logits + block.cope.logits(q, k, mask)
    weights = ad.softmax_lastdim(logits, mask)
    ctx = ad.matmul(weights, v).swapaxes(1, 2).reshape((b, n, d))
    x = x + block.wo(ctx)
    x = x + block.ffn2(ad.silu(block.ffn1(block.ln2(x))))
    return (x, weights) if return_weights else x


class SASRec(SequenceModel):
    def __init__(self, cfg, seed=0):
        super().__init__(cfg, seed)
        rng, d, pe = self.rng_init, cfg.d, cfg.pe
        self.naive = None
        if pe.variant == "naive":
            self.naive = self.child("pe", NaiveEncoder(rng, d, pe.n_max))
        self.blocks = [self.child(f"block{i}", SelfAttentionBlock(rng, cfg)) for i in range(cfg.n_blocks)]
        self.ln_final = self.child("ln_final", LayerNorm(d))
        self.head = self.child("head", MLP(rng, 3 * d, cfg.head_hidden, 1))

    def encode(self, batch):
        """Hidden states ``(B, n, d)`` after the final layer norm, plus the key mask."""
        items, cats, mask, _ = self._trim(batch)
        x = self.embed(items, cats)
        if self.naive is not None:
            x = self.naive(x)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_final(x), mask

    def user_vector(self, batch):
        hidden, _ = self.encode(batch)
        lengths = np.asarray(batch.lengths)
        return hidden[np.arange(len(lengths)), lengths - 1]

    def logits(self, batch):
        u = self.user_vector(batch)
        target = self.embed(np.asarray(batch.target_items), np.asarray(batch.target_cats))
        return predict_head(u, target, u * target, self.head)

    def candidate_scores(self, batch, cand_items, cand_cats):
        """Dot products of the final hidden state with candidate embeddings, ``(B, C)``."""
        with ad.no_grad():
            u = self.user_vector(batch)
            cand = self.embed(np.asarray(cand_items), np.asarray(cand_cats))
            b, d = u.shape
            return ad.matmul(cand, u.reshape((b, d, 1))).data.reshape(b, -1)


def build_model(cfg, seed=0):
    if cfg.pe.variant not in VARIANTS:
        raise ConfigError(f"pe.variant={cfg.pe.variant!r} is not one of {', '.join(VARIANTS)}")
    if cfg.backbone == "din":
        return DIN(cfg, seed)
    if cfg.backbone == "sasrec":
        return SASRec(cfg, seed)
    raise ConfigError(f"model.backbone={cfg.backbone!r} is not one of {', '.join(BACKBONES)}")
