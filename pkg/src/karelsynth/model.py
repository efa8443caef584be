"""The synthesizer network.

Each IO pair is embedded by a small CNN (independent convs for the input
and output grids, two residual blocks over their concatenation, then a
fully connected projection). One 2-layer LSTM decoder runs per IO pair
with shared weights, consuming [token embedding; IO embedding] each step;
the topmost hidden states are elementwise-maxpooled across pairs and
projected to a score per token. Depending on the syntax mode, the scores
are then shifted by a handwritten prefix-validity mask (0 / -1e9), by the
penalties of a separately learned token-only LSTM (through x -> -exp(x)),
or not at all. A softmax over the shifted scores gives the next-token
distribution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import lang, oracle, vm
from .nn import checkpoint as ckpt
from .nn import ops
from .nn.tensor import Tensor

SYNTAX_MODES = ("none", "handwritten", "learned", "large")


class MaskedReferenceError(RuntimeError):
    """The handwritten mask forbade a reference token: an oracle bug."""


class ModeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    alphabet_size: int = lang.ALPHABET_SIZE
    grid_channels: int = vm.CHANNELS
    grid_rows: int = vm.ROWS
    grid_cols: int = vm.COLS
    conv_channels: int = 32          # per-grid conv width; pairs concatenate to 2x
    io_embed_dim: int = 512
    token_embed_dim: int = 256
    decoder_hidden: int = 256
    decoder_layers: int = 2
    syntax_mode: str = "none"

    def __post_init__(self):
        if self.syntax_mode not in SYNTAX_MODES:
            raise ValueError(f"unknown syntax mode {self.syntax_mode!r}")
        if self.decoder_layers != 2:
            raise ValueError("the decoder is fixed at two LSTM layers")

    @property
    def decoder_input_dim(self) -> int:
        return self.token_embed_dim + self.io_embed_dim

    @classmethod
    def full(cls, syntax_mode: str = "none") -> "ModelConfig":
        return cls(syntax_mode=syntax_mode)

    @classmethod
    def mini(cls, syntax_mode: str = "none") -> "ModelConfig":
        """Reduced dimensions for desk-scale training."""
        return cls(conv_channels=8, io_embed_dim=128, token_embed_dim=64,
                   decoder_hidden=64, syntax_mode=syntax_mode)

    @classmethod
    def tiny(cls, syntax_mode: str = "none") -> "ModelConfig":
        """Gradient-check dimensions."""
        return cls(grid_rows=6, grid_cols=6, conv_channels=2, io_embed_dim=8,
                   token_embed_dim=8, decoder_hidden=8, syntax_mode=syntax_mode)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def param_shapes(cfg: ModelConfig, hidden: int | None = None) -> dict[str, tuple]:
    """Named parameter shapes for a config (hidden may override the decoder)."""
    c1 = cfg.conv_channels
    c2 = 2 * c1
    v = cfg.alphabet_size
    dt = cfg.token_embed_dim
    dio = cfg.io_embed_dim
    h = cfg.decoder_hidden if hidden is None else hidden
    shapes: dict[str, tuple] = {
        "enc.conv_in.w": (c1, cfg.grid_channels, 3, 3),
        "enc.conv_in.b": (c1,),
        "enc.conv_out.w": (c1, cfg.grid_channels, 3, 3),
        "enc.conv_out.b": (c1,),
        "enc.fc.w": (c2 * cfg.grid_rows * cfg.grid_cols, dio),
        "enc.fc.b": (dio,),
        "dec.embed": (v, dt),
        "dec.start": (dt,),
        "dec.l1.w_ih": (dt + dio, 4 * h),
        "dec.l1.w_hh": (h, 4 * h),
        "dec.l1.b": (4 * h,),
        "dec.l2.w_ih": (h, 4 * h),
        "dec.l2.w_hh": (h, 4 * h),
        "dec.l2.b": (4 * h,),
        "dec.head.w": (h, v),
        "dec.head.b": (v,),
    }
    for block in (1, 2):
        for conv in (1, 2, 3):
            shapes[f"enc.block{block}.conv{conv}.w"] = (c2, c2, 3, 3)
            shapes[f"enc.block{block}.conv{conv}.b"] = (c2,)
    if cfg.syntax_mode == "learned":
        hs = cfg.decoder_hidden  # the syntax LSTM mirrors the decoder sizing
        shapes.update({
            "syn.embed": (v, dt),
            "syn.start": (dt,),
            "syn.l1.w_ih": (dt, 4 * hs),
            "syn.l1.w_hh": (hs, 4 * hs),
            "syn.l1.b": (4 * hs,),
            "syn.l2.w_ih": (hs, 4 * hs),
            "syn.l2.w_hh": (hs, 4 * hs),
            "syn.l2.b": (4 * hs,),
            "syn.head.w": (hs, v),
            "syn.head.b": (v,),
        })
    return shapes


def param_count(cfg: ModelConfig, hidden: int | None = None) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg, hidden).values())


def resolve_large_hidden(cfg: ModelConfig, tolerance: float = 0.01) -> int:
    """Decoder width for the matched-capacity control.

    Picks the hidden size whose total parameter count is closest to the
    learned-syntax variant of the same base config, and requires the match
    to land within `tolerance`.
    """
    target = param_count(replace(cfg, syntax_mode="learned"))
    base = replace(cfg, syntax_mode="none")
    best_h, best_err = cfg.decoder_hidden, float("inf")
    for h in range(cfg.decoder_hidden, 8 * cfg.decoder_hidden + 1):
        err = abs(param_count(base, h) - target)
        if err < best_err:
            best_h, best_err = h, err
        if param_count(base, h) > target and err > best_err:
            break
    rel = best_err / target
    if rel > tolerance:
        raise ValueError(f"cannot match learned-capacity within {tolerance:.0%} "
                         f"(best {rel:.2%} at hidden={best_h})")
    return best_h


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith(".w") and len(shape) == 4:      # conv
        return shape[1] * shape[2] * shape[3]
    if name.endswith(".w"):                          # linear
        return shape[0]
    if ".l" in name and name.endswith(".w_ih"):
        return shape[0]
    if ".l" in name and name.endswith(".w_hh"):
        return shape[0]
    if name.endswith(".b") and ".l" in name:         # lstm bias
        return shape[0] // 4
    if name.endswith(".b"):                          # linear/conv bias: match weight
        return max(shape[0], 1)
    return shape[-1]


def _init_param(name: str, shape: tuple, seed: int, dtype) -> np.ndarray:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    rng = np.random.default_rng(
        np.random.SeedSequence((seed, int.from_bytes(digest[:8], "little"))))
    if name.endswith(".embed") or name.endswith(".start"):
        return rng.normal(0.0, 0.1, size=shape).astype(dtype)
    bound = 1.0 / np.sqrt(_fan_in(name, shape))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def pairs_to_arrays(io_pairs, cfg: ModelConfig, dtype=np.float32):
    """[(Grid, Grid), ...] -> (K, C, R, Cc) input and output tensors.

    A pre-built (inputs, outputs) array pair passes through unchanged,
    which lets tests feed synthetic grids at non-standard dimensions.
    """
    if isinstance(io_pairs, tuple) and isinstance(io_pairs[0], np.ndarray):
        return io_pairs[0].astype(dtype), io_pairs[1].astype(dtype)
    ins = np.stack([gin.to_tensor() for gin, _ in io_pairs]).astype(dtype)
    outs = np.stack([gout.to_tensor() for _, gout in io_pairs]).astype(dtype)
    return ins, outs


class SynthModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.hidden = cfg.decoder_hidden
        if cfg.syntax_mode == "large":
            self.hidden = resolve_large_hidden(cfg)
        self.params: dict[str, Tensor] = {}
        for name, shape in param_shapes(cfg, self.hidden).items():
            self.params[name] = Tensor(_init_param(name, shape, seed, dtype),
                                       requires_grad=True, name=name)
        self._detached_cache: dict[str, Tensor] | None = None

    # -- parameter access ----------------------------------------------------

    def detached(self) -> dict[str, Tensor]:
        """Gradient-free views sharing the same arrays (for decoding)."""
        if self._detached_cache is None or any(
                self._detached_cache[k].data is not p.data for k, p in self.params.items()):
            self._detached_cache = {k: Tensor(p.data) for k, p in self.params.items()}
        return self._detached_cache

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- encoder ---------------------------------------------------------------

    def encode_pairs(self, inputs: np.ndarray, outputs: np.ndarray,
                     params: dict[str, Tensor] | None = None,
                     trace: list | None = None) -> Tensor:
        """(B, K, C, R, Cc) grids -> (B, K, io_embed_dim) embeddings.

        trace, when given, collects (layer name, pre-ReLU values) pairs.
        """
        p = self.params if params is None else params
        b, k = inputs.shape[:2]
        flat_in = Tensor(inputs.reshape((b * k,) + inputs.shape[2:]).astype(self.dtype))
        flat_out = Tensor(outputs.reshape((b * k,) + outputs.shape[2:]).astype(self.dtype))

        def conv_relu(x, name):
            z = ops.conv2d(x, p[name + ".w"], p[name + ".b"])
            if trace is not None:
                trace.append((name, z.data))
            return ops.relu(z)

        xi = conv_relu(flat_in, "enc.conv_in")
        xo = conv_relu(flat_out, "enc.conv_out")
        x = ops.concat([xi, xo], axis=1)
        for block in (1, 2):
            h = x
            for conv in (1, 2, 3):
                h = conv_relu(h, f"enc.block{block}.conv{conv}")
            x = ops.add(x, h)
        flat = ops.reshape(x, (b * k, -1))
        emb = ops.linear(flat, p["enc.fc.w"], p["enc.fc.b"])
        return ops.reshape(emb, (b, k, self.cfg.io_embed_dim))

    def encode_pairs_np(self, io_pairs) -> np.ndarray:
        """(K, io_embed_dim) embedding of one task's pairs, no tape."""
        ins, outs = pairs_to_arrays(io_pairs, self.cfg, self.dtype)
        emb = self.encode_pairs(ins[None], outs[None], params=self.detached())
        return emb.data[0]

    # -- teacher-forced scoring --------------------------------------------------

    def teacher_logprobs(self, tokens: np.ndarray, valid: np.ndarray,
                         io_embed: Tensor, return_syntax_scores: bool = False,
                         mask_source=None):
        """Log-probabilities of reference token rows under teacher forcing.

        tokens (B, L) int; valid (B, L) in {0,1} marks real positions.
        Returns a (B,) Tensor of summed log-probabilities; with
        return_syntax_scores also the (B,) sum of learned penalties at the
        reference tokens (only meaningful in learned mode). An explicit
        mask_source overrides the mode's default masking (used to score
        restricted toy spaces).
        """
        cfg = self.cfg
        p = self.params
        mode = cfg.syntax_mode
        b, length = tokens.shape
        k = io_embed.data.shape[1]
        h = self.hidden
        if mask_source is None and mode == "handwritten":
            mask_source = OracleMaskSource()
        masks = None
        if mask_source is not None:
            masks = self._reference_masks(tokens, valid, mask_source)

        io_flat = ops.reshape(io_embed, (b * k, cfg.io_embed_dim))
        zeros_bk = Tensor(np.zeros((b * k, h), dtype=self.dtype))
        h1 = c1 = h2 = c2 = zeros_bk
        if mode == "learned":
            zeros_b = Tensor(np.zeros((b, cfg.decoder_hidden), dtype=self.dtype))
            sh1 = sc1 = sh2 = sc2 = zeros_b
        total = Tensor(np.zeros(b, dtype=self.dtype))
        syn_total = Tensor(np.zeros(b, dtype=self.dtype))

        for t in range(length):
            if t == 0:
                tok = ops.tile0(p["dec.start"], b)
            else:
                tok = ops.embedding_lookup(p["dec.embed"], tokens[:, t - 1])
            x = ops.concat([ops.repeat_rows(tok, k), io_flat], axis=1)
            h1, c1 = ops.lstm_cell(x, h1, c1, p["dec.l1.w_ih"], p["dec.l1.w_hh"], p["dec.l1.b"])
            h2, c2 = ops.lstm_cell(h1, h2, c2, p["dec.l2.w_ih"], p["dec.l2.w_hh"], p["dec.l2.b"])
            pooled = ops.max_over_axis(ops.reshape(h2, (b, k, h)), axis=1)
            logits = ops.linear(pooled, p["dec.head.w"], p["dec.head.b"])
            if masks is not None:
                logits = ops.add(logits, Tensor(masks[:, t]))
            if mode == "learned":
                if t == 0:
                    stok = ops.tile0(p["syn.start"], b)
                else:
                    stok = ops.embedding_lookup(p["syn.embed"], tokens[:, t - 1])
                sh1, sc1 = ops.lstm_cell(stok, sh1, sc1, p["syn.l1.w_ih"],
                                         p["syn.l1.w_hh"], p["syn.l1.b"])
                sh2, sc2 = ops.lstm_cell(sh1, sh2, sc2, p["syn.l2.w_ih"],
                                         p["syn.l2.w_hh"], p["syn.l2.b"])
                penalties = ops.neg_exp(ops.linear(sh2, p["syn.head.w"], p["syn.head.b"]))
                logits = ops.add(logits, penalties)
                picked_pen = ops.gather_last(penalties, tokens[:, t])
                syn_total = ops.add(syn_total, ops.mul(picked_pen, Tensor(valid[:, t].astype(self.dtype))))
            logp = ops.log_softmax(logits)
            picked = ops.gather_last(logp, tokens[:, t])
            total = ops.add(total, ops.mul(picked, Tensor(valid[:, t].astype(self.dtype))))

        if return_syntax_scores:
            return total, syn_total
        return total

    def _reference_masks(self, tokens: np.ndarray, valid: np.ndarray,
                         source) -> np.ndarray:
        b, length = tokens.shape
        masks = np.zeros((b, length, self.cfg.alphabet_size), dtype=self.dtype)
        for i in range(b):
            state = source.initial()
            for t in range(length):
                if not valid[i, t]:
                    break
                allowed = source.mask_bool(state)
                tid = int(tokens[i, t])
                if not allowed[tid]:
                    raise MaskedReferenceError(
                        f"reference token {lang.TOKENS[tid]} masked at step {t}")
                masks[i, t] = np.where(allowed, 0.0, oracle.MASK_NEG).astype(self.dtype)
                state = source.advance(state, tid)
        return masks

    def program_logprob(self, token_ids, io_pairs, mask_source=None) -> Tensor:
        """Scalar log-probability of one token sequence given IO pairs."""
        ins, outs = pairs_to_arrays(io_pairs, self.cfg, self.dtype)
        io_embed = self.encode_pairs(ins[None], outs[None])
        tokens = np.asarray(token_ids, dtype=np.int64)[None]
        valid = np.ones_like(tokens, dtype=np.float64)
        total = self.teacher_logprobs(tokens, valid, io_embed, mask_source=mask_source)
        return ops.sum_all(total)

    def rescore_logprobs(self, token_lists, io_pairs, mask_source=None) -> Tensor:
        """(n,) log-probabilities of candidate sequences sharing one task."""
        ins, outs = pairs_to_arrays(io_pairs, self.cfg, self.dtype)
        io_embed = self.encode_pairs(ins[None], outs[None])           # (1, K, Dio)
        io_k = ops.reshape(io_embed, io_embed.data.shape[1:])
        io_tiled = ops.tile0(io_k, len(token_lists))                  # (n, K, Dio)
        length = max(len(t) for t in token_lists)
        tokens = np.zeros((len(token_lists), length), dtype=np.int64)
        valid = np.zeros((len(token_lists), length), dtype=np.float64)
        for i, seq in enumerate(token_lists):
            tokens[i, :len(seq)] = seq
            valid[i, :len(seq)] = 1.0
        return self.teacher_logprobs(tokens, valid, io_tiled, mask_source=mask_source)

    # -- syntax-only scoring -------------------------------------------------------

    def syntax_penalties_batch(self, tokens: np.ndarray, params=None) -> list[Tensor]:
        """Per-step penalty rows (B, V) for token histories (learned mode)."""
        if self.cfg.syntax_mode != "learned":
            raise ModeError("syntax penalties require syntax_mode='learned'")
        p = self.params if params is None else params
        b, length = tokens.shape
        hs = self.cfg.decoder_hidden
        zeros = Tensor(np.zeros((b, hs), dtype=self.dtype))
        sh1 = sc1 = sh2 = sc2 = zeros
        out = []
        for t in range(length):
            if t == 0:
                stok = ops.tile0(p["syn.start"], b)
            else:
                stok = ops.embedding_lookup(p["syn.embed"], tokens[:, t - 1])
            sh1, sc1 = ops.lstm_cell(stok, sh1, sc1, p["syn.l1.w_ih"],
                                     p["syn.l1.w_hh"], p["syn.l1.b"])
            sh2, sc2 = ops.lstm_cell(sh1, sh2, sc2, p["syn.l2.w_ih"],
                                     p["syn.l2.w_hh"], p["syn.l2.b"])
            out.append(ops.neg_exp(ops.linear(sh2, p["syn.head.w"], p["syn.head.b"])))
        return out

    def syntax_step(self, state, prev_token: int | None):
        """One penalty step of the learned syntax model (no tape).

        state None starts a sequence; prev_token None means the start
        marker. Returns (penalties (V,), new_state).
        """
        if self.cfg.syntax_mode != "learned":
            raise ModeError("syntax_step requires syntax_mode='learned'")
        p = self.detached()
        hs = self.cfg.decoder_hidden
        if state is None:
            zeros = np.zeros((1, hs), dtype=self.dtype)
            state = SyntaxState(zeros, zeros, zeros, zeros)
        if prev_token is None:
            stok = Tensor(p["syn.start"].data[None])
        else:
            stok = Tensor(p["syn.embed"].data[[prev_token]])
        sh1, sc1 = ops.lstm_cell(stok, Tensor(state.h1), Tensor(state.c1),
                                 p["syn.l1.w_ih"], p["syn.l1.w_hh"], p["syn.l1.b"])
        sh2, sc2 = ops.lstm_cell(sh1, Tensor(state.h2), Tensor(state.c2),
                                 p["syn.l2.w_ih"], p["syn.l2.w_hh"], p["syn.l2.b"])
        pen = ops.neg_exp(ops.linear(sh2, p["syn.head.w"], p["syn.head.b"]))
        return pen.data[0], SyntaxState(sh1.data, sc1.data, sh2.data, sc2.data)

    # -- persistence -----------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {
            "model_config": self.cfg.to_json(),
            "alphabet_sha256": lang.alphabet_sha256(),
            "resolved_hidden": self.hidden,
        }

    def save(self, path) -> None:
        meta = self.checkpoint_meta()
        ckpt.save_checkpoint(path, {k: p.data for k, p in self.params.items()}, meta)
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SynthModel":
        meta, arrays = ckpt.load_checkpoint(path)
        if meta["alphabet_sha256"] != lang.alphabet_sha256():
            raise ValueError("checkpoint alphabet does not match this build")
        cfg = ModelConfig.from_json(meta["model_config"])
        model = cls(cfg)
        if model.hidden != meta.get("resolved_hidden", model.hidden):
            raise ValueError("checkpoint hidden size mismatch")
        for name, p in model.params.items():
            p.data = arrays[name].astype(model.dtype)
        model._detached_cache = None
        return model


@dataclass
class SyntaxState:
    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray


class OracleMaskSource:
    """Adapter exposing the handwritten checker as a decode-time mask source."""

    def initial(self):
        return oracle.init()

    def advance(self, state, token_id: int):
        return oracle.advance(state, token_id)

    def mask_bool(self, state) -> np.ndarray:
        return oracle.valid_next(state).allowed

    def is_complete(self, state) -> bool:
        return state.complete


@dataclass
class DecoderState:
    """Per-stream decoder LSTM states (and friends) during stepwise decode."""

    h1: np.ndarray  # (n, K, H)
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray
    syn: SyntaxState | None = None          # arrays shaped (n, Hs)
    mask_states: tuple | None = None        # per-stream checker states

    @property
    def n(self) -> int:
        return self.h1.shape[0]

    def select(self, idx) -> "DecoderState":
        idx = np.asarray(idx, dtype=np.int64)
        syn = None
        if self.syn is not None:
            syn = SyntaxState(self.syn.h1[idx], self.syn.c1[idx],
                              self.syn.h2[idx], self.syn.c2[idx])
        masks = None
        if self.mask_states is not None:
            masks = tuple(self.mask_states[int(i)] for i in idx)
        return DecoderState(self.h1[idx], self.c1[idx], self.h2[idx], self.c2[idx],
                            syn, masks)


class DecodeSession:
    """Stepwise next-token scoring for one task, shared across beam streams."""

    def __init__(self, model: SynthModel, io_pairs, mask_source="auto",
                 apply_learned_syntax: bool = True):
        self.model = model
        self.cfg = model.cfg
        self.p = model.detached()
        self.io_embed = model.encode_pairs_np(io_pairs)  # (K, Dio)
        self.k = self.io_embed.shape[0]
        if mask_source == "auto":
            mask_source = OracleMaskSource() if model.cfg.syntax_mode == "handwritten" else None
        self.mask_source = mask_source
        # Decode-time ablation: run the decoder without the learned penalties.
        self.apply_learned_syntax = apply_learned_syntax and model.cfg.syntax_mode == "learned"

    def initial_state(self, n: int = 1) -> DecoderState:
        h = self.model.hidden
        zeros = np.zeros((n, self.k, h), dtype=self.model.dtype)
        syn = None
        if self.apply_learned_syntax:
            hs = self.cfg.decoder_hidden
            z = np.zeros((n, hs), dtype=self.model.dtype)
            syn = SyntaxState(z.copy(), z.copy(), z.copy(), z.copy())
        masks = None
        if self.mask_source is not None:
            masks = tuple(self.mask_source.initial() for _ in range(n))
        return DecoderState(zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy(),
                            syn, masks)

    def step(self, state: DecoderState, prev_ids: np.ndarray | None):
        """Advance every stream by one token.

        prev_ids None feeds the start embedding (first step). Returns
        (logits (n, V) after syntax shifts, allowed (n, V) bool or None,
        new_state).
        """
        p = self.p
        cfg = self.cfg
        n = state.n
        k, h = self.k, self.model.hidden

        if prev_ids is None:
            tok = np.broadcast_to(p["dec.start"].data, (n, cfg.token_embed_dim))
        else:
            tok = p["dec.embed"].data[np.asarray(prev_ids, dtype=np.int64)]
        x = np.concatenate(
            [np.repeat(tok, k, axis=0),
             np.broadcast_to(self.io_embed, (n, k, cfg.io_embed_dim)).reshape(n * k, -1)],
            axis=1)
        h1, c1 = ops.lstm_cell(Tensor(x), Tensor(state.h1.reshape(n * k, h)),
                               Tensor(state.c1.reshape(n * k, h)),
                               p["dec.l1.w_ih"], p["dec.l1.w_hh"], p["dec.l1.b"])
        h2, c2 = ops.lstm_cell(h1, Tensor(state.h2.reshape(n * k, h)),
                               Tensor(state.c2.reshape(n * k, h)),
                               p["dec.l2.w_ih"], p["dec.l2.w_hh"], p["dec.l2.b"])
        pooled = h2.data.reshape(n, k, h).max(axis=1)
        logits = pooled @ p["dec.head.w"].data + p["dec.head.b"].data

        syn_state = state.syn
        if self.apply_learned_syntax:
            if prev_ids is None:
                stok = np.broadcast_to(p["syn.start"].data, (n, cfg.token_embed_dim))
            else:
                stok = p["syn.embed"].data[np.asarray(prev_ids, dtype=np.int64)]
            sh1, sc1 = ops.lstm_cell(Tensor(stok), Tensor(state.syn.h1), Tensor(state.syn.c1),
                                     p["syn.l1.w_ih"], p["syn.l1.w_hh"], p["syn.l1.b"])
            sh2, sc2 = ops.lstm_cell(sh1, Tensor(state.syn.h2), Tensor(state.syn.c2),
                                     p["syn.l2.w_ih"], p["syn.l2.w_hh"], p["syn.l2.b"])
            pen = ops.neg_exp(ops.linear(sh2, p["syn.head.w"], p["syn.head.b"])).data
            logits = logits + pen
            syn_state = SyntaxState(sh1.data, sc1.data, sh2.data, sc2.data)

        mask_states = state.mask_states
        allowed = None
        if self.mask_source is not None:
            if prev_ids is not None:
                mask_states = tuple(self.mask_source.advance(st, int(t))
                                    for st, t in zip(mask_states, prev_ids))
            allowed = np.stack([self.mask_source.mask_bool(st) for st in mask_states])
            logits = np.where(allowed, logits, logits + oracle.MASK_NEG)

        new_state = DecoderState(
            h1.data.reshape(n, k, h), c1.data.reshape(n, k, h),
            h2.data.reshape(n, k, h), c2.data.reshape(n, k, h),
            syn_state, mask_states)
        return logits.astype(self.model.dtype), allowed, new_state

    def decode_step(self, state: DecoderState, prev_token: int | None):
        """Single-stream step: (logits (V,), allowed (V,) or None, state)."""
        prev = None if prev_token is None else np.array([prev_token])
        logits, allowed, new_state = self.step(state, prev)
        return logits[0], (None if allowed is None else allowed[0]), new_state
