"""Continuous-token architecture.

An item encoder compresses each item's token sequence into one d-dim
embedding; a causal decoder consumes the history embedding sequence
(optionally prefixed by a learned query-id token) and its final hidden state,
projected and normalized, is the next-interest vector used for retrieval.

Three train-only heads hang off the same trunk: a causal text LM that decodes
the target item's tokens conditioned either on the decoder's hidden states
(history path) or on a single bottleneck vector (interest-embedding path, also
used for warm-up on isolated item embeddings), and an MLP denoiser that
reconstructs the frozen visual feature. Head invocations are counted so the
serving path can be certified head-free.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from karma.diffcore import (
    Tensor, attention, concat, gather_rows, gelu, get_default_dtype, l2_normalize,
    layer_norm_affine, linear, matmul, reshape, tmean, transpose,
)
from karma.diffcore.tensor import ShapeError
from karma.errors import ConfigError
from karma.rngs import derive_rng


@dataclass
class ModelConfig:
    vocab_size: int = 512
    d: int = 64          # retrieval embedding width
    d_m: int = 128       # trunk width
    n_heads: int = 4
    n_enc_blocks: int = 2
    n_dec_blocks: int = 4
    n_text_blocks: int = 2
    max_seq: int = 32
    item_len: int = 12
    d_v: int = 32
    num_query_ids: int = 32
    mlp_ratio: int = 2  # narrow FFN keeps desk-scale steps fast at d_m=128
    visual_width: int = 256
    time_emb_dim: int = 32
    normalize_embeddings: bool = True

    def validate(self) -> None:
        if self.d_m % self.n_heads:
            raise ConfigError("d_m must be divisible by n_heads")
        for name in ("vocab_size", "d", "d_m", "n_heads", "n_enc_blocks",
                     "n_dec_blocks", "n_text_blocks", "max_seq", "item_len",
                     "d_v", "num_query_ids"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.time_emb_dim % 2:
            raise ConfigError("time_emb_dim must be even")


@dataclass
class AttentionRecord:
    """One head's row-stochastic attention matrix, tagged by its source."""

    layer: int
    head: int
    weights: np.ndarray  # (L, L) float64, rows sum to 1
    source: str          # "item-encoder" | "user-decoder"

    def to_json(self) -> dict:
        return {"layer": self.layer, "head": self.head, "source": self.source,
                "weights": [[float(x) for x in row] for row in self.weights]}

    @staticmethod
    def from_json(d: dict) -> "AttentionRecord":
        return AttentionRecord(layer=d["layer"], head=d["head"], source=d["source"],
                               weights=np.array(d["weights"], dtype=np.float64))


def time_embedding(tau, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar conditioning time/noise level."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = tau[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb.astype(get_default_dtype())


def _block_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{s}" for s in (
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
        "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]


class KarmaModel:
    """Holds the named parameter dict plus forward passes for every path."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: Optional[dict] = None):
        cfg.validate()
        self.cfg = cfg
        self.counters = {"encode_item": 0, "encode_history": 0,
                         "text_head": 0, "visual_head": 0}
        if params is not None:
            self.params = params
        else:
            self.params = self._init_params(seed)

    # ------------------------------------------------------------- params

    @staticmethod
    def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        c = cfg
        hidden = c.mlp_ratio * c.d_m
        shapes: dict[str, tuple[int, ...]] = {"tok_emb": (c.vocab_size, c.d_m)}

        def block(prefix):
            shapes.update({
                f"{prefix}.ln1.g": (c.d_m,), f"{prefix}.ln1.b": (c.d_m,),
                f"{prefix}.attn.wq": (c.d_m, c.d_m), f"{prefix}.attn.bq": (c.d_m,),
                f"{prefix}.attn.wk": (c.d_m, c.d_m), f"{prefix}.attn.bk": (c.d_m,),
                f"{prefix}.attn.wv": (c.d_m, c.d_m), f"{prefix}.attn.bv": (c.d_m,),
                f"{prefix}.attn.wo": (c.d_m, c.d_m), f"{prefix}.attn.bo": (c.d_m,),
                f"{prefix}.ln2.g": (c.d_m,), f"{prefix}.ln2.b": (c.d_m,),
                f"{prefix}.mlp.w1": (c.d_m, hidden), f"{prefix}.mlp.b1": (hidden,),
                f"{prefix}.mlp.w2": (hidden, c.d_m), f"{prefix}.mlp.b2": (c.d_m,),
            })

        shapes["enc.pos"] = (c.item_len, c.d_m)
        for i in range(c.n_enc_blocks):
            block(f"enc.b{i}")
        shapes.update({"enc.lnf.g": (c.d_m,), "enc.lnf.b": (c.d_m,),
                       "enc.proj.w": (c.d_m, c.d), "enc.proj.b": (c.d,)})

        shapes.update({"dec.adapter.w": (c.d, c.d_m), "dec.adapter.b": (c.d_m,),
                       "dec.query_emb": (c.num_query_ids, c.d_m),
                       "dec.pos": (c.max_seq + 1, c.d_m)})
        for i in range(c.n_dec_blocks):
            block(f"dec.b{i}")
        shapes.update({"dec.lnf.g": (c.d_m,), "dec.lnf.b": (c.d_m,),
                       "dec.proj.w": (c.d_m, c.d), "dec.proj.b": (c.d,)})

        shapes.update({"th.hist_adapter.w": (c.d_m, c.d_m), "th.hist_adapter.b": (c.d_m,),
                       "th.vec_adapter.w": (c.d, c.d_m), "th.vec_adapter.b": (c.d_m,),
                       "th.bos": (c.d_m,),
                       "th.pos": (c.max_seq + 2 + c.item_len, c.d_m)})
        for i in range(c.n_text_blocks):
            block(f"th.b{i}")
        shapes.update({"th.lnf.g": (c.d_m,), "th.lnf.b": (c.d_m,),
                       "th.out.w": (c.d_m, c.vocab_size), "th.out.b": (c.vocab_size,)})

        vin = c.d_v + c.d + c.time_emb_dim
        shapes.update({"vh.w1": (vin, c.visual_width), "vh.b1": (c.visual_width,),
                       "vh.w2": (c.visual_width, c.visual_width), "vh.b2": (c.visual_width,),
                       "vh.w3": (c.visual_width, c.d_v), "vh.b3": (c.d_v,)})
        return shapes

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        rng = derive_rng(seed, "model-init")
        dtype = get_default_dtype()
        params = {}
        for name, shape in self.param_shapes(self.cfg).items():
            leaf = name.split(".")[-1]
            if leaf == "g":
                data = np.ones(shape)
            elif leaf in ("b", "bq", "bk", "bv", "bo") or leaf.startswith("b"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            params[name] = Tensor(data.astype(dtype), requires_grad=True)
        return params

    def parameters(self, prefixes: Optional[tuple[str, ...]] = None) -> dict[str, Tensor]:
        if prefixes is None:
            return self.params
        return {n: p for n, p in self.params.items()
                if any(n == pre or n.startswith(pre + ".") or n.startswith(pre) for pre in prefixes)}

    # ------------------------------------------------------------- trunk

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return layer_norm_affine(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        c = self.cfg
        return transpose(reshape(x, (b, t, c.n_heads, c.d_m // c.n_heads)), (0, 2, 1, 3))

    def _block(self, prefix: str, x: Tensor, *, causal: bool,
               key_mask: Optional[np.ndarray] = None,
               capture: Optional[list] = None) -> Tensor:
        p = self.params
        b, t, _ = x.shape
        h = self._ln(x, f"{prefix}.ln1")
        q = self._split_heads(linear(h, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"]), b, t)
        k = self._split_heads(linear(h, p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"]), b, t)
        v = self._split_heads(linear(h, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"]), b, t)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        att = attention(q, k, v, causal=causal, key_mask=mask, capture=capture)
        att = reshape(transpose(att, (0, 2, 1, 3)), (b, t, self.cfg.d_m))
        x = x + linear(att, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
        h2 = self._ln(x, f"{prefix}.ln2")
        m = linear(gelu(linear(h2, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"])),
                   p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
        return x + m

    # ------------------------------------------------------------- encoder

    def encode_items_batch(self, tokens: np.ndarray,
                           capture: Optional[list] = None) -> Tensor:
        """Item embeddings for a (B, item_len) token matrix -> (B, d)."""
        c = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != c.item_len:
            raise ShapeError(f"expected (B, {c.item_len}) tokens, got {tokens.shape}")
        self.counters["encode_item"] += 1
        x = gather_rows(self.params["tok_emb"], tokens) + self.params["enc.pos"]
        for i in range(c.n_enc_blocks):
            x = self._block(f"enc.b{i}", x, causal=False, capture=capture)
        x = self._ln(x, "enc.lnf")
        e = linear(tmean(x, axis=1), self.params["enc.proj.w"], self.params["enc.proj.b"])
        if c.normalize_embeddings:
            e = l2_normalize(e)
        return e

    def encode_item(self, item) -> Tensor:
        """Single item (an Item or a token sequence) -> (d,) embedding."""
        tokens = item.text_tokens if hasattr(item, "text_tokens") else item
        e = self.encode_items_batch(np.asarray(tokens, dtype=np.int64)[None, :])
        return reshape(e, (self.cfg.d,))

    def encode_catalog(self, token_matrix: np.ndarray, chunk: int = 256) -> np.ndarray:
        """All item embeddings as a plain (n, d) array (inference path)."""
        outs = []
        for lo in range(0, len(token_matrix), chunk):
            outs.append(self.encode_items_batch(token_matrix[lo:lo + chunk]).data)
        return np.concatenate(outs, axis=0)

    # ------------------------------------------------------------- decoder

    def history_forward(self, hist: Tensor, lengths: np.ndarray,
                        query_ids: Optional[np.ndarray] = None,
                        capture: Optional[list] = None):
        """Causal pass over history embeddings.

        hist: (B, T, d) right-padded with zeros (pads never pollute valid
        positions under the causal mask); lengths: valid counts per row.
        Returns (h (B, d), states (B, T', d_m), valid (B, T') bool) where T'
        includes the prepended query token when present.
        """
        c = self.cfg
        b, t, dd = hist.shape
        if t < 1:
            raise ShapeError("empty history")
        if t > c.max_seq:
            raise ShapeError(f"history length {t} exceeds max_seq {c.max_seq}")
        if dd != c.d:
            raise ShapeError(f"history embedding dim {dd} != {c.d}")
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.min() < 1 or lengths.max() > t:
            raise ShapeError("lengths out of range")
        self.counters["encode_history"] += 1
        p = self.params
        x = linear(hist, p["dec.adapter.w"], p["dec.adapter.b"])
        if query_ids is not None:
            q = reshape(gather_rows(p["dec.query_emb"], np.asarray(query_ids, dtype=np.int64)),
                        (b, 1, c.d_m))
            x = concat([q, x], axis=1)
            last_idx = lengths  # query occupies position 0
        else:
            last_idx = lengths - 1
        tp = x.shape[1]
        x = x + p["dec.pos"][0:tp]
        for i in range(c.n_dec_blocks):
            x = self._block(f"dec.b{i}", x, causal=True, capture=capture)
        states = self._ln(x, "dec.lnf")
        h_pre = states[np.arange(b), last_idx]
        h = linear(h_pre, p["dec.proj.w"], p["dec.proj.b"])
        if c.normalize_embeddings:
            h = l2_normalize(h)
        valid = np.arange(tp)[None, :] < (lengths + (1 if query_ids is not None else 0))[:, None]
        return h, states, valid

    def encode_history(self, history, query_id: Optional[int] = None):
        """Single-sequence interest embedding.

        history: list of (d,) embeddings or a (T, d) array/Tensor.
        Returns (h (d,), states (T', d_m)).
        """
        if isinstance(history, (list, tuple)):
            if len(history) == 0:
                raise ShapeError("empty history")
            if isinstance(history[0], Tensor):
                hist = concat([reshape(h, (1, self.cfg.d)) for h in history], axis=0)
            else:
                hist = Tensor(np.stack([np.asarray(h) for h in history]))
        elif isinstance(history, Tensor):
            hist = history
        else:
            hist = Tensor(np.asarray(history))
        t = hist.shape[0]
        hist_b = reshape(hist, (1, t, self.cfg.d))
        qids = None if query_id is None else np.array([query_id])
        h, states, _ = self.history_forward(hist_b, np.array([t]), qids)
        return reshape(h, (self.cfg.d,)), reshape(states, (states.shape[1], self.cfg.d_m))

    # ------------------------------------------------------------- text head

    def lm_forward(self, prefix: Tensor, prefix_valid: Optional[np.ndarray],
                   targets: np.ndarray,
                   teacher_tokens: Optional[np.ndarray] = None) -> Tensor:
        """Causal LM logits for target tokens under a conditioning prefix.

        prefix: (B, P, d_m) conditioning tokens (right-padded; pads masked as
        keys via prefix_valid). targets: (B, L) token ids. Row l of the
        returned (B, L, V) logits has seen the prefix, a learned BOS, and
        targets[:, :l] only. ``teacher_tokens`` substitutes the embedded
        teacher-forcing inputs (e.g. word-dropout-corrupted copies) while the
        caller still scores against the clean targets.
        """
        c = self.cfg
        p = self.params
        targets = np.asarray(targets, dtype=np.int64)
        b, pl, _ = prefix.shape
        if targets.ndim != 2 or targets.shape[0] != b:
            raise ShapeError("targets must be (B, L)")
        ll = targets.shape[1]
        if ll < 1:
            raise ShapeError("empty target")
        if pl + 1 + ll - 1 > p["th.pos"].shape[0]:
            raise ShapeError("prefix + target length overflows the text head")
        self.counters["text_head"] += 1
        teacher = targets if teacher_tokens is None else np.asarray(teacher_tokens, dtype=np.int64)
        if teacher.shape != targets.shape:
            raise ShapeError("teacher_tokens shape must match targets")
        bos = reshape(p["th.bos"], (1, 1, c.d_m)) + Tensor(np.zeros((b, 1, c.d_m)))
        parts = [prefix, bos]
        if ll > 1:
            parts.append(gather_rows(p["tok_emb"], teacher[:, :-1]))
        x = concat(parts, axis=1)
        total = x.shape[1]
        if prefix_valid is None:
            key_mask = None
            x = x + p["th.pos"][0:total]
        else:
            key_mask = np.concatenate(
                [np.asarray(prefix_valid, dtype=bool), np.ones((b, 1 + ll - 1), dtype=bool)],
                axis=1)
            # position = rank among valid columns, so padded and unpadded
            # prefixes see identical positional signals (pad rows are masked
            # as keys and their own values are never read)
            pos_ids = np.maximum(np.cumsum(key_mask, axis=1) - 1, 0)
            x = x + gather_rows(p["th.pos"], pos_ids)
        for i in range(c.n_text_blocks):
            x = self._block(f"th.b{i}", x, causal=True, key_mask=key_mask)
        x = self._ln(x, "th.lnf")
        out_states = x[:, pl:pl + ll]
        return linear(out_states, p["th.out.w"], p["th.out.b"])

    def _adapt_history_states(self, states: Tensor) -> Tensor:
        return linear(states, self.params["th.hist_adapter.w"], self.params["th.hist_adapter.b"])

    def _adapt_vector(self, vec: Tensor) -> Tensor:
        return linear(vec, self.params["th.vec_adapter.w"], self.params["th.vec_adapter.b"])

    def lm_logits_history(self, decoder_states: Tensor, target: np.ndarray) -> Tensor:
        """Logits (L, V) for one target decoded from the history states path."""
        t, dm = decoder_states.shape
        prefix = self._adapt_history_states(reshape(decoder_states, (1, t, dm)))
        logits = self.lm_forward(prefix, None, np.asarray(target, dtype=np.int64)[None])
        return reshape(logits, (logits.shape[1], self.cfg.vocab_size))

    def lm_logits_embedding(self, h: Tensor, target: np.ndarray) -> Tensor:
        """Logits (L, V) for one target decoded from the bottleneck vector only."""
        prefix = reshape(self._adapt_vector(reshape(h, (1, self.cfg.d))), (1, 1, self.cfg.d_m))
        logits = self.lm_forward(prefix, None, np.asarray(target, dtype=np.int64)[None])
        return reshape(logits, (logits.shape[1], self.cfg.vocab_size))

    def lm_logits_history_batch(self, states: Tensor, valid: np.ndarray,
                                targets: np.ndarray) -> Tensor:
        return self.lm_forward(self._adapt_history_states(states), valid, targets)

    def lm_logits_embedding_batch(self, h: Tensor, targets: np.ndarray,
                                  teacher_tokens: Optional[np.ndarray] = None) -> Tensor:
        b = h.shape[0]
        prefix = reshape(self._adapt_vector(h), (b, 1, self.cfg.d_m))
        return self.lm_forward(prefix, None, targets, teacher_tokens=teacher_tokens)

    # ------------------------------------------------------------- visual head

    def visual_head_forward(self, noisy, condition, tau) -> Tensor:
        """Denoiser MLP: (noisy d_v vector, condition, time embedding) -> d_v.

        Accepts single vectors or (B, ...) batches; tau may be any real
        scalar per row (diffusion step fraction or a log-noise level).
        """
        c = self.cfg
        p = self.params
        x = noisy if isinstance(noisy, Tensor) else Tensor(np.asarray(noisy))
        cond = condition if isinstance(condition, Tensor) else Tensor(np.asarray(condition))
        single = x.ndim == 1
        if single:
            x = reshape(x, (1, x.shape[0]))
            cond = reshape(cond, (1, cond.shape[0]))
        if x.shape[1] != c.d_v or cond.shape[1] != c.d:
            raise ShapeError(f"visual head got {x.shape}, {cond.shape}")
        self.counters["visual_head"] += 1
        temb = Tensor(time_embedding(tau, c.time_emb_dim))
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = Tensor(np.repeat(temb.data, x.shape[0], axis=0))
        inp = concat([x, cond, temb], axis=1)
        h1 = gelu(linear(inp, p["vh.w1"], p["vh.b1"]))
        h2 = gelu(linear(h1, p["vh.w2"], p["vh.b2"]))
        out = linear(h2, p["vh.w3"], p["vh.b3"])
        return reshape(out, (c.d_v,)) if single else out

    # ------------------------------------------------------------- capture

    def capture_attention(self, *, item_tokens: Optional[np.ndarray] = None,
                          history: Optional[Tensor] = None,
                          lengths: Optional[np.ndarray] = None,
                          query_ids: Optional[np.ndarray] = None,
                          layers: Optional[list[int]] = None,
                          heads: Optional[list[int]] = None) -> list[AttentionRecord]:
        """Attention maps from the item encoder or the user decoder.

        Exactly one of item_tokens (B, item_len) / history (B, T, d) selects
        the source. Selectors default to all layers/heads. Read-only: no
        gradient side effects (run it outside any tape).
        """
        c = self.cfg
        if (item_tokens is None) == (history is None):
            raise ConfigError("pass exactly one of item_tokens / history")
        n_layers = c.n_enc_blocks if item_tokens is not None else c.n_dec_blocks
        layers = list(range(n_layers)) if layers is None else list(layers)
        heads = list(range(c.n_heads)) if heads is None else list(heads)
        for sel, hi in ((layers, n_layers), (heads, c.n_heads)):
            for s in sel:
                if not 0 <= s < hi:
                    raise ConfigError(f"selector {s} out of range [0, {hi})")
        cap: list[np.ndarray] = []
        if item_tokens is not None:
            source = "item-encoder"
            self.encode_items_batch(np.asarray(item_tokens), capture=cap)
        else:
            source = "user-decoder"
            if lengths is None:
                lengths = np.full(history.shape[0], history.shape[1])
            self.history_forward(history, lengths, query_ids, capture=cap)
        records = []
        for layer in layers:
            w = cap[layer]  # (B, H, L, L)
            for b in range(w.shape[0]):
                for head in heads:
                    records.append(AttentionRecord(
                        layer=layer, head=head,
                        weights=w[b, head].astype(np.float64), source=source))
        return records

    # ------------------------------------------------------------- debug

    def greedy_decode(self, h: Tensor, length: Optional[int] = None) -> list[int]:
        """Free-running argmax decode from a bottleneck vector (debug only)."""
        length = length or self.cfg.item_len
        tokens: list[int] = []
        for _ in range(length):
            padded = np.array(tokens + [0] * (length - len(tokens)), dtype=np.int64)
            logits = self.lm_logits_embedding(h, padded[:max(1, len(tokens) + 1)])
            tokens.append(int(np.argmax(logits.data[len(tokens)])))
        return tokens

    def config_echo(self) -> dict:
        return asdict(self.cfg)


class MlpHead:
    """Standalone conditional MLP, used as an embedding-space generator head.

    With ``time_emb_dim > 0`` it is a denoiser (x, cond, tau) -> out; with 0
    it is a plain regressor cond -> out (the AR+MSE baseline head). Not part
    of the base model or its checkpoints.
    """

    def __init__(self, in_dim: int, cond_dim: int, out_dim: int,
                 width: int = 256, time_emb_dim: int = 32, seed: int = 0,
                 init_std: float = 0.02):
        self.in_dim, self.cond_dim, self.out_dim = in_dim, cond_dim, out_dim
        self.time_emb_dim = time_emb_dim
        rng = derive_rng(seed, "mlp-head")
        dtype = get_default_dtype()
        total_in = in_dim + cond_dim + time_emb_dim
        shapes = {"w1": (total_in, width), "b1": (width,),
                  "w2": (width, width), "b2": (width,),
                  "w3": (width, out_dim), "b3": (out_dim,)}
        self.params = {}
        for name, shape in shapes.items():
            data = np.zeros(shape) if name.startswith("b") else rng.normal(0.0, init_std, shape)
            self.params[name] = Tensor(data.astype(dtype), requires_grad=True)

    def __call__(self, x=None, cond=None, tau=None) -> Tensor:
        p = self.params
        parts = []
        if self.in_dim:
            xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
            parts.append(xt if xt.ndim == 2 else reshape(xt, (1, xt.shape[0])))
        ct = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond))
        parts.append(ct if ct.ndim == 2 else reshape(ct, (1, ct.shape[0])))
        b = parts[0].shape[0]
        if self.time_emb_dim:
            te = time_embedding(tau, self.time_emb_dim)
            if te.shape[0] == 1 and b > 1:
                te = np.repeat(te, b, axis=0)
            parts.append(Tensor(te))
        inp = concat(parts, axis=1)
        h1 = gelu(linear(inp, p["w1"], p["b1"]))
        h2 = gelu(linear(h1, p["w2"], p["b2"]))
        return linear(h2, p["w3"], p["b3"])
