"""Toy encoder-decoder transformer over synthetic feature frames.

Pre-norm blocks, sinusoidal positions, tanh feed-forward, decoder output
projection tied to the token embedding. The decoder context is::

    [soft prompts (SPT only)] <sot> <lang code> y_1 ... y_n

and the model is trained to predict ``<lang code> y_1 ... y_n <eot>``.

Adapters are consumed by duck typing: anything with ``method`` (one of
``"full_ft"``, ``"lora"``, ``"spt"``, ``"slct"``) and a ``tensors`` mapping,
plus ``slct_code`` for SLCT.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor
from .vocab import DEFAULT_VOCAB, Vocab


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ff_mult: int = 4
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    max_src_len: int = 96
    max_tgt_len: int = 64
    feature_dim: int = 16

    def __post_init__(self):
        dims = (self.d_model, self.n_heads, self.enc_layers, self.dec_layers, self.ff_mult,
                self.max_src_len, self.max_tgt_len, self.feature_dim)
        if any(int(x) < 1 for x in dims):
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        object.__setattr__(self, "vocab", tuple(self.vocab))
        Vocab(self.vocab)

    @property
    def tokens(self) -> Vocab:
        return _vocab_for(self.vocab)

    @property
    def d_ff(self) -> int:
        return self.d_model * self.ff_mult

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        return cls(**{**d, "vocab": tuple(d["vocab"])})


_VOCABS: dict[tuple, Vocab] = {}


def _vocab_for(symbols: tuple) -> Vocab:
    if symbols not in _VOCABS:
        _VOCABS[symbols] = Vocab(symbols)
    return _VOCABS[symbols]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in store order."""
    d, f, v = cfg.d_model, cfg.d_ff, len(cfg.vocab)
    shapes: dict[str, tuple[int, ...]] = {}

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def attn(prefix):
        for role in "qkvo":
            shapes[f"{prefix}.{role}"] = (d, d)
            shapes[f"{prefix}.b{role}"] = (d,)

    def ff(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    shapes["enc.in.w"] = (cfg.feature_dim, d)
    shapes["enc.in.b"] = (d,)
    for i in range(cfg.enc_layers):
        p = f"enc.layer{i}"
        norm(f"{p}.ln1")
        attn(f"{p}.attn")
        norm(f"{p}.ln2")
        ff(f"{p}.ff")
    norm("enc.ln")
    shapes["dec.embed"] = (v, d)
    for i in range(cfg.dec_layers):
        p = f"dec.layer{i}"
        norm(f"{p}.ln1")
        attn(f"{p}.attn")
        norm(f"{p}.ln2")
        attn(f"{p}.xattn")
        norm(f"{p}.ln3")
        ff(f"{p}.ff")
    norm("dec.ln")
    return shapes


def attention_matrices(cfg: ModelConfig, roles: Iterable[str] = "qkvo") -> list[str]:
    """Names of all attention projection matrices with the given roles."""
    roles = set(roles)
    return [n for n in param_shapes(cfg) if ".attn." in n or ".xattn." in n
            if n.rsplit(".", 1)[1] in roles]


@dataclass
class ParamStore:
    """Ordered name -> float64 array map; the order is load-bearing."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    merged: tuple[str, ...] = ()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def n_scalars(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.merged)

    def header(self) -> dict:
        return {"config": self.config.to_json(), "merged": list(self.merged)}

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(checkpoint.MAGIC_MODEL, self.header(), self.tensors)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> str:
        return checkpoint.save(path, checkpoint.MAGIC_MODEL, self.header(), self.tensors)

    @classmethod
    def load(cls, path) -> "ParamStore":
        header, tensors = checkpoint.load(path, checkpoint.MAGIC_MODEL)
        cfg = ModelConfig.from_json(header["config"])
        expected = param_shapes(cfg)
        if list(tensors) != list(expected) or any(tensors[k].shape != s for k, s in expected.items()):
            raise checkpoint.ContainerError(f"checkpoint {path} does not match its config")
        return cls(cfg, tensors, tuple(header.get("merged", ())))


def init_model(config: ModelConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng([int(seed), 101])
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if name == "dec.embed":
            tensors[name] = rng.normal(0.0, 0.1, size=shape)
        elif len(shape) == 2:
            tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        elif leaf == "g":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ParamStore(config, tensors)


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, d: int) -> np.ndarray:
    key = (length, d)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
        pe = np.zeros((length, d))
        pe[:, 0::2] = np.sin(pos * rates)
        pe[:, 1::2] = np.cos(pos * rates[: d // 2])
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


# --------------------------------------------------------------------------
# graph construction
# --------------------------------------------------------------------------

def _method(adapter) -> str | None:
    if adapter is None:
        return None
    m = adapter.method
    return getattr(m, "value", m)


class Graph:
    """Leaf tensors for one forward pass over a base store and optional adapter.

    ``trainable`` selects which leaves are registered as tape parameters:
    ``"base"`` (every base tensor), ``"adapter"`` (every adapter tensor), or
    ``None``. Everything else enters as a constant.
    """

    def __init__(self, params: ParamStore, adapter=None, tape: Tape | None = None,
                 trainable: str | None = None):
        self.cfg = params.config
        self.tape = tape if tape is not None else Tape(record=False)
        self.adapter = adapter
        self.method = _method(adapter)
        if self.method == "full_ft":
            self.method = None
        base_tracked = trainable == "base"
        ad_tracked = trainable == "adapter"
        self.p = {k: (self.tape.param(k, v) if base_tracked else self.tape.constant(v))
                  for k, v in params.items()}
        self.a = {}
        if self.method is not None:
            self.a = {k: (self.tape.param(k, v) if ad_tracked else self.tape.constant(v))
                      for k, v in adapter.tensors.items()}

    def weight(self, name: str) -> Tensor:
        w = self.p[name]
        if self.method == "lora" and f"lora.{name}.A" in self.a:
            delta = ad.matmul(self.a[f"lora.{name}.B"], self.a[f"lora.{name}.A"])
            w = ad.add(w, delta)
        return w

    @property
    def n_prompts(self) -> int:
        return self.a["spt.prompts"].shape[0] if self.method == "spt" else 0


def _linear(g: Graph, x, wname: str, bname: str):
    return ad.add(ad.matmul(x, g.weight(wname)), g.p[bname])


def _attention(g: Graph, xq, xkv, prefix: str, mask: np.ndarray):
    h = g.cfg.n_heads
    q = ad.split_heads(_linear(g, xq, f"{prefix}.q", f"{prefix}.bq"), h)
    k = ad.split_heads(_linear(g, xkv, f"{prefix}.k", f"{prefix}.bk"), h)
    v = ad.split_heads(_linear(g, xkv, f"{prefix}.v", f"{prefix}.bv"), h)
    att = ad.softmax(ad.attn_scores(q, k, mask))
    out = ad.merge_heads(ad.matmul(att, v))
    return _linear(g, out, f"{prefix}.o", f"{prefix}.bo")


def _norm(g: Graph, x, prefix: str):
    return ad.layernorm(x, g.p[f"{prefix}.g"], g.p[f"{prefix}.b"])


def _ff(g: Graph, x, prefix: str):
    hid = ad.tanh(_linear(g, x, f"{prefix}.w1", f"{prefix}.b1"))
    return _linear(g, hid, f"{prefix}.w2", f"{prefix}.b2")


def encode(g: Graph, feats: np.ndarray, src_valid: np.ndarray) -> Tensor:
    cfg = g.cfg
    b, s, _ = feats.shape
    x = ad.add(ad.matmul(g.tape.constant(feats), g.weight("enc.in.w")), g.p["enc.in.b"])
    x = ad.add(x, g.tape.constant(positional_encoding(s, cfg.d_model)))
    mask = src_valid[:, None, None, :]
    for i in range(cfg.enc_layers):
        p = f"enc.layer{i}"
        hn = _norm(g, x, f"{p}.ln1")
        x = ad.add(x, _attention(g, hn, hn, f"{p}.attn", mask))
        x = ad.add(x, _ff(g, _norm(g, x, f"{p}.ln2"), f"{p}.ff"))
    return _norm(g, x, "enc.ln")


def _decoder_embed(g: Graph, ids: np.ndarray) -> Tensor:
    cfg = g.cfg
    x = ad.embedding(g.p["dec.embed"], ids)
    if g.method == "slct":
        slot = cfg.tokens.code_id(g.adapter.slct_code)
        hit = (ids == slot)[..., None].astype(np.float64)
        if hit.any():
            x = ad.add(ad.mul(x, g.tape.constant(1.0 - hit)),
                       ad.mul(g.tape.constant(hit), g.a["slct.code"]))
    x = ad.add(x, g.tape.constant(positional_encoding(ids.shape[1], cfg.d_model)))
    if g.n_prompts:
        # prompts carry no position; real tokens keep the positions the base model learned
        x = ad.concat([ad.expand(g.a["spt.prompts"], ids.shape[0]), x], axis=1)
    return x


def decode(g: Graph, memory: Tensor, src_valid: np.ndarray, ids: np.ndarray,
           tgt_valid: np.ndarray | None = None) -> Tensor:
    """Logits (B, m + T, V) for decoder input ``ids`` (B, T)."""
    cfg = g.cfg
    x = _decoder_embed(g, ids)
    b, t = ids.shape
    total = x.shape[1]
    m = total - t
    valid = np.ones((b, total), dtype=bool)
    if tgt_valid is not None:
        valid[:, m:] = tgt_valid
    causal = np.tril(np.ones((total, total), dtype=bool))
    self_mask = causal[None, None, :, :] & valid[:, None, None, :]
    cross_mask = src_valid[:, None, None, :]
    for i in range(cfg.dec_layers):
        p = f"dec.layer{i}"
        hn = _norm(g, x, f"{p}.ln1")
        x = ad.add(x, _attention(g, hn, hn, f"{p}.attn", self_mask))
        x = ad.add(x, _attention(g, _norm(g, x, f"{p}.ln2"), memory, f"{p}.xattn", cross_mask))
        x = ad.add(x, _ff(g, _norm(g, x, f"{p}.ln3"), f"{p}.ff"))
    h = _norm(g, x, "dec.ln")
    return ad.matmul(h, g.p["dec.embed"], trans_b=True)


# --------------------------------------------------------------------------
# batches, loss, decoding
# --------------------------------------------------------------------------

@dataclass
class Example:
    """One utterance ready for the model."""

    features: np.ndarray
    text: str
    code: str


@dataclass
class Batch:
    feats: np.ndarray       # (B, S, F)
    src_valid: np.ndarray   # (B, S) bool
    dec_in: np.ndarray      # (B, T) int
    targets: np.ndarray     # (B, T) int
    weights: np.ndarray     # (B, T) float
    tgt_valid: np.ndarray   # (B, T) bool


def _pad_features(cfg: ModelConfig, examples: Sequence[Example]):
    lens = [e.features.shape[0] for e in examples]
    for e in examples:
        if e.features.ndim != 2 or e.features.shape[1] != cfg.feature_dim:
            raise ValueError(f"features must be (frames, {cfg.feature_dim}), got {e.features.shape}")
    if max(lens) > cfg.max_src_len:
        raise ValueError(f"source length {max(lens)} exceeds max_src_len={cfg.max_src_len}")
    if min(lens) < 1:
        raise ValueError("empty feature sequence")
    s = max(lens)
    feats = np.zeros((len(examples), s, cfg.feature_dim))
    valid = np.zeros((len(examples), s), dtype=bool)
    for i, e in enumerate(examples):
        feats[i, :lens[i]] = e.features
        valid[i, :lens[i]] = True
    return feats, valid


def make_batch(cfg: ModelConfig, examples: Sequence[Example]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    vocab = cfg.tokens
    feats, src_valid = _pad_features(cfg, examples)
    seqs = []
    for e in examples:
        ids = vocab.encode(e.text)
        if len(ids) + 3 > cfg.max_tgt_len:
            raise ValueError(f"reference of {len(ids)} symbols exceeds max_tgt_len={cfg.max_tgt_len}")
        seqs.append((vocab.code_id(e.code), ids))
    t = max(len(ids) for _, ids in seqs) + 2
    b = len(examples)
    dec_in = np.full((b, t), vocab.pad, dtype=np.int64)
    targets = np.full((b, t), vocab.pad, dtype=np.int64)
    weights = np.zeros((b, t))
    for i, (code, ids) in enumerate(seqs):
        n = len(ids)
        dec_in[i, :n + 2] = [vocab.sot, code] + ids
        targets[i, :n + 2] = [code] + ids + [vocab.eot]
        weights[i, :n + 2] = 1.0
    return Batch(feats, src_valid, dec_in, targets, weights, weights > 0)


def batch_logits(g: Graph, batch: Batch) -> Tensor:
    memory = encode(g, batch.feats, batch.src_valid)
    return decode(g, memory, batch.src_valid, batch.dec_in, batch.tgt_valid)


def loss_on_graph(g: Graph, batch: Batch) -> Tensor:
    logits = batch_logits(g, batch)
    m = g.n_prompts
    b = batch.targets.shape[0]
    targets = np.concatenate([np.zeros((b, m), dtype=np.int64), batch.targets], axis=1)
    weights = np.concatenate([np.zeros((b, m)), batch.weights], axis=1)
    return ad.cross_entropy(logits, targets, weights)


def nll_loss(params: ParamStore, examples: Sequence[Example], adapter=None,
             tape: Tape | None = None, trainable: str | None = None) -> Tensor:
    """Mean per-token cross-entropy under teacher forcing.

    Scored positions are the language code, the reference symbols and
    ``<eot>``; padding and soft-prompt slots are excluded.
    """
    if not examples:
        raise ValueError("nll_loss needs a nonempty batch")
    g = Graph(params, adapter, tape, trainable)
    return loss_on_graph(g, make_batch(params.config, examples))


@dataclass(frozen=True)
class DecodeOutput:
    tokens: tuple[str, ...]
    text: str
    per_step_logits_hash: str


def decode_batch(params: ParamStore, features: Sequence[np.ndarray], lang_code: str,
                 adapter=None, return_logits: bool = False):
    """Greedy decoding of several utterances under one language code.

    Returns a list of :class:`DecodeOutput` (and per-utterance step logits if
    ``return_logits``).
    """
    cfg = params.config
    vocab = cfg.tokens
    code = vocab.code_id(lang_code)
    examples = [Example(np.asarray(f, dtype=np.float64), "", lang_code) for f in features]
    feats, src_valid = _pad_features(cfg, examples)
    g = Graph(params, adapter)
    memory = encode(g, feats, src_valid)
    b = len(examples)
    allowed = np.full(len(vocab), False)
    for s in vocab.text:
        allowed[vocab.index[s]] = True
    allowed[vocab.eot] = True
    ids = np.tile(np.array([vocab.sot, code], dtype=np.int64), (b, 1))
    done = np.zeros(b, dtype=bool)
    out_ids: list[list[int]] = [[] for _ in range(b)]
    step_logits: list[list[np.ndarray]] = [[] for _ in range(b)]
    max_steps = cfg.max_tgt_len - 2
    for _ in range(max_steps):
        logits = decode(g, memory, src_valid, ids).data[:, -1, :]
        masked = np.where(allowed, logits, -np.inf)
        nxt = masked.argmax(axis=-1)
        for i in range(b):
            if done[i]:
                continue
            step_logits[i].append(logits[i].copy())
            if nxt[i] == vocab.eot:
                done[i] = True
            else:
                out_ids[i].append(int(nxt[i]))
        if done.all():
            break
        ids = np.concatenate([ids, np.where(done, vocab.pad, nxt)[:, None]], axis=1)
    outputs = []
    for i in range(b):
        toks = tuple(vocab.symbols[j] for j in out_ids[i])
        stacked = np.stack(step_logits[i])
        digest = hashlib.sha256(np.ascontiguousarray(stacked, dtype="<f8").tobytes()).hexdigest()
        outputs.append(DecodeOutput(toks, "".join(toks), digest))
    if return_logits:
        return outputs, [np.stack(s) for s in step_logits]
    return outputs


def transcribe(params: ParamStore, features: np.ndarray, lang_code: str, adapter=None) -> DecodeOutput:
    return decode_batch(params, [features], lang_code, adapter)[0]


def config_digest(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_json(), sort_keys=True).encode()).hexdigest()[:16]
