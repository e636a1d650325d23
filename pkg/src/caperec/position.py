"""Position encodings: CAPE, CoPE, naive absolute, and rotary.

Shapes follow one convention throughout: a *query* tensor ``(..., m, dq)`` is
compared against *keys* ``(..., n, dq)`` and every contextual encoder returns
additive attention logits ``(..., m, n)``. Target attention is the ``m = 1``
case; causal self-attention uses ``m = n`` with a lower-triangular mask.

Positions are recency-anchored: the gate of key ``j`` is summed together with
the gates of every later key up to the query, so the most recent item has the
smallest position. Gates of masked keys are zero and never advance a position.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, LengthError
from .nn import Linear, Module, uniform

VARIANTS = ("none", "naive", "rope", "cope", "cape")


@dataclass
class PEConfig:
    variant: str = "cape"
    d: int = 0  # 0: derived from the model (2 * emb_dim)
    d_pos: int = 32
    n_max: int = 100
    gate_sim_scale: bool = True
    cope_p_max: float | None = None
    rope_base: float = 10000.0

    def problems(self):
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"pe.variant={self.variant!r} is not one of {', '.join(VARIANTS)}")
        if self.d < 1:
            errs.append(f"pe.d={self.d} must be >= 1")
        if self.n_max < 1:
            errs.append(f"pe.n_max={self.n_max} must be >= 1")
        if self.variant == "cape" and not 1 <= self.d_pos <= self.d:
            errs.append(f"pe.d_pos={self.d_pos} must lie in [1, d={self.d}]")
        if self.variant == "rope" and self.d % 2:
            errs.append(f"pe.d={self.d} must be even for rope")
        if self.cope_p_max is not None and not 0 < self.cope_p_max <= self.n_max:
            errs.append(f"pe.cope_p_max={self.cope_p_max} must lie in (0, n_max={self.n_max}]")
        return errs

    def validate(self):
        errs = self.problems()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    @property
    def p_max(self):
        return float(self.n_max if self.cope_p_max is None else self.cope_p_max)


@dataclass
class PositionState:
    gates: ad.Tensor
    positions: ad.Tensor | None = field(default=None)


class PositionTable(Module):
    """Learnable embeddings for integer positions ``0..n_max``; row 0 starts at zero."""

    def __init__(self, rng, n_max, d_pos):
        super().__init__()
        table = uniform(rng, 1.0 / np.sqrt(d_pos), (n_max + 1, d_pos))
        table[0] = 0.0
        self.embeddings = self.param("embeddings", table)

    @property
    def n_max(self):
        return self.embeddings.shape[0] - 1


class GateProjection(Linear):
    """``t' = SiLU(t W + b)`` mapping the query into position-embedding space."""

    def __init__(self, rng, d, d_pos):
        super().__init__(rng, d, d_pos)
        self.weight.data = uniform(rng, 1.0 / np.sqrt(d_pos), (d, d_pos))


# ---------------------------------------------------------------- building blocks


def _check_width(x, width, what):
    if x.shape[-1] != width:
        raise ConfigError(f"{what} has width {x.shape[-1]}, expected {width}")


def _check_length(n, n_max):
    if n > n_max:
        raise LengthError(f"context length {n} exceeds n_max={n_max}")


def pairwise_similarity(query, keys, scale=True):
    """Dot products ``(..., m, n)``; divided by sqrt(dq) when ``scale`` is set."""
    sim = ad.matmul(query, ad.swapaxes(keys, -1, -2))
    if scale:
        sim = sim * (1.0 / np.sqrt(query.shape[-1]))
    return sim


def pairwise_gates(query, keys, mask=None, scale=True, dissimilar=True):
    """Gates for every (query, key) pair: ``1 - sigmoid(sim)`` or, for CoPE, ``sigmoid(sim)``."""
    sim = pairwise_similarity(query, keys, scale)
    gates = ad.one_minus_sigmoid(sim) if dissimilar else ad.sigmoid(sim)
    if mask is not None:
        gates = ad.masked_fill(gates, mask, 0.0)
    return gates


def _as_query(target):
    return target.reshape(target.shape[:-1] + (1, target.shape[-1]))


def _squeeze_query(x):
    return x.reshape(x.shape[:-2] + (x.shape[-1],))


def compute_gates(target, context, cfg, mask=None):
    """CAPE gates of one target against its context; shape ``context.shape[:-1]``."""
    _check_width(target, cfg.d, "target")
    _check_width(context, cfg.d, "context")
    gates = pairwise_gates(
        _as_query(target), context, None if mask is None else np.asarray(mask)[..., None, :],
        scale=cfg.gate_sim_scale,
    )
    return PositionState(gates=_squeeze_query(gates))


def accumulate_positions(state):
    return PositionState(gates=state.gates, positions=ad.reverse_cumsum(state.gates))


def cope_positions(query, context, cfg, mask=None):
    """CoPE: similarity gates, reverse cumulative positions clamped to ``p_max``."""
    _check_width(query, cfg.d, "query")
    _check_width(context, cfg.d, "context")
    gates = pairwise_gates(
        _as_query(query), context, None if mask is None else np.asarray(mask)[..., None, :],
        scale=cfg.gate_sim_scale, dissimilar=False,
    )
    gates = _squeeze_query(gates)
    return PositionState(gates=gates, positions=ad.clamp(ad.reverse_cumsum(gates), 0.0, cfg.p_max))


def interpolate_position_embedding(p, table):
    """Reference path: blend the two nearest integer embeddings, ``(...,) -> (..., d_pos)``.

    Only used to cross-check :func:`interpolate_position_logits`.
    """
    emb = table.embeddings if isinstance(table, PositionTable) else table
    n_max = emb.shape[0] - 1
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, n_max)
    lo = np.floor(p).astype(np.int64)
    hi = np.minimum(lo + 1, n_max)
    w = (p - lo)[..., None]
    return ad.gather_rows(emb, hi) * w + ad.gather_rows(emb, lo) * (1.0 - w)


def project_target_gate(target, proj):
    return ad.silu(proj(target))


def integer_position_logits(t_prime, table):
    """``z[p] = <t', e[p]>`` for every integer p; shape ``(..., n_max + 1)``."""
    emb = table.embeddings if isinstance(table, PositionTable) else table
    _check_width(t_prime, emb.shape[1], "t_prime")
    lead = t_prime.shape[:-1]
    flat = t_prime.reshape(-1, t_prime.shape[-1])
    z = ad.matmul(flat, ad.swapaxes(emb, 0, 1))
    return z.reshape(lead + (emb.shape[0],))


def interpolate_position_logits(p, z):
    """Interpolate integer-position logits ``z (..., P)`` at positions ``p (..., n)``.

    Positions are clamped to ``[0, P-1]``. Accepts plain floats/arrays for ``p``.
    """
    z = ad.as_tensor(z)
    scalar = np.ndim(p.data if isinstance(p, ad.Tensor) else p) == 0 and z.ndim == 1
    p = ad.as_tensor(p)
    if scalar:
        p = p.reshape((1,))
    p = ad.clamp(p, 0.0, float(z.shape[-1] - 1))
    if p.ndim == z.ndim - 1:
        p = p.reshape(p.shape + (1,))
        out = ad.interp_logits(z, p)
        out = out.reshape(out.shape[:-1])
    else:
        out = ad.interp_logits(z, p)
    return out.reshape(()) if scalar else out


# ---------------------------------------------------------------- encoders


class CapeEncoder(Module):
    """Gated dissimilarity positions fused into attention logits.

    ``d_query`` is the width of the vectors the gates compare (the full item
    embedding for target attention, the head width for self-attention).
    """

    def __init__(self, rng, d_query, d_pos, n_max, scale=True):
        super().__init__()
        self.n_max, self.scale = n_max, scale
        self.proj = self.child("proj", GateProjection(rng, d_query, d_pos))
        self.table = self.child("table", PositionTable(rng, n_max, d_pos))

    def positions(self, query, keys, mask=None, gates=None):
        if gates is None:
            gates = pairwise_gates(query, keys, mask, self.scale, dissimilar=True)
        return ad.reverse_cumsum(ad.as_tensor(gates))

    def logits(self, query, keys, mask=None, gates=None):
        _check_length(keys.shape[-2], self.n_max)
        p = ad.clamp(self.positions(query, keys, mask, gates), 0.0, float(self.n_max))
        z = integer_position_logits(project_target_gate(query, self.proj), self.table)
        return ad.interp_logits(z, p)


class CopeEncoder(Module):
    """Similarity-gated positions with a full-width table and the raw query as ``t'``."""

    def __init__(self, rng, d_query, n_max, p_max=None, scale=True):
        super().__init__()
        self.n_max, self.scale = n_max, scale
        self.p_max = float(n_max if p_max is None else p_max)
        self.table = self.child("table", PositionTable(rng, n_max, d_query))

    def positions(self, query, keys, mask=None):
        gates = pairwise_gates(query, keys, mask, self.scale, dissimilar=False)
        return ad.clamp(ad.reverse_cumsum(gates), 0.0, self.p_max)

    def logits(self, query, keys, mask=None):
        _check_length(keys.shape[-2], self.n_max)
        z = integer_position_logits(query, self.table)
        return ad.interp_logits(z, self.positions(query, keys, mask))


class NaiveEncoder(Module):
    """Learnable absolute position vectors added to the inputs; index 0 is the oldest item."""

    def __init__(self, rng, d, n_max):
        super().__init__()
        self.n_max = n_max
        self.table = self.param("table", uniform(rng, 1.0 / np.sqrt(d), (n_max, d)))

    def __call__(self, context):
        return naive_pe_apply(context, self.table)


def cape_logits(target, context, proj, table, cfg, mask=None, gates=None):
    """Additive CAPE logit for each context item of one or more targets.

    ``target`` is ``(..., d)`` and ``context`` ``(..., n, d)``; returns ``(..., n)``.
    Passing ``gates`` bypasses the sigmoid (used to check the relative-PE limit).
    """
    _check_width(target, cfg.d, "target")
    _check_width(context, cfg.d, "context")
    _check_length(context.shape[-2], cfg.n_max)
    if gates is None:
        gates = compute_gates(target, context, cfg, mask).gates
    state = accumulate_positions(PositionState(gates=ad.as_tensor(gates)))
    z = integer_position_logits(project_target_gate(target, proj), table)
    return interpolate_position_logits(state.positions, z)


def naive_pe_apply(context, table):
    n = context.shape[-2]
    _check_length(n, table.shape[0])
    _check_width(context, table.shape[1], "context")
    return context + table[:n]


def rope_apply(vectors, start_index=0, base=10000.0):
    """Rotate row ``m`` of ``vectors (..., n, d)`` by angle ``(start_index + m) * theta_i``."""
    if vectors.shape[-1] % 2:
        raise ConfigError(f"rope needs an even dimension, got {vectors.shape[-1]}")
    n = vectors.shape[-2]
    return ad.rope_rotate(vectors, start_index + np.arange(n, dtype=np.float64), base)
