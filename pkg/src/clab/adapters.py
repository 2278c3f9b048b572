"""Adaptation methods: full fine-tuning, LoRA, soft language-code tuning, soft prompts.

An :class:`AdapterState` holds only the method's own trainable tensors; the
base :class:`~clab.model.ParamStore` is never written to. The model reads
adapters through ``method``, ``tensors`` and ``slct_code``.

Tensor names inside a state:

* LoRA: ``lora.<matrix>.A`` (r x k) and ``lora.<matrix>.B`` (d x r)
* SPT: ``spt.prompts`` (m x d_model)
* SLCT: ``slct.code`` (d_model,)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import checkpoint
from .model import ModelConfig, ParamStore, attention_matrices, param_shapes
from .vocab import is_code


class Method(str, Enum):
    FULL_FT = "full_ft"
    LORA = "lora"
    SPT = "spt"
    SLCT = "slct"


@dataclass(frozen=True)
class AdapterSpec:
    method: Method
    lora_rank: int = 8
    lora_targets: frozenset[str] = frozenset("qkvo")
    prompt_count: int = 20
    slct_code: str = "<L7>"
    # "mean" or "surrogate:<Lk>"
    slct_init: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "lora_targets", frozenset(self.lora_targets))

    def to_json(self) -> dict:
        return {
            "method": self.method.value,
            "lora_rank": self.lora_rank,
            "lora_targets": sorted(self.lora_targets),
            "prompt_count": self.prompt_count,
            "slct_code": self.slct_code,
            "slct_init": self.slct_init,
        }

    @classmethod
    def from_json(cls, d) -> "AdapterSpec":
        return cls(**{**d, "lora_targets": frozenset(d["lora_targets"])})


def surrogate_init(code: str) -> str:
    return f"surrogate:{code}"


def validate_spec(spec: AdapterSpec, config: ModelConfig) -> None:
    if spec.method is Method.LORA:
        if spec.lora_rank < 1:
            raise ValueError("lora_rank must be at least 1")
        if not spec.lora_targets or not spec.lora_targets <= set("qkvo"):
            raise ValueError(f"lora_targets must be a nonempty subset of q,k,v,o, got {sorted(spec.lora_targets)}")
        shapes = param_shapes(config)
        for name in attention_matrices(config, spec.lora_targets):
            d, k = shapes[name]
            if spec.lora_rank >= min(d, k):
                raise ValueError(f"lora_rank {spec.lora_rank} is not below min(d, k) = {min(d, k)} for {name}")
    elif spec.method is Method.SPT:
        if spec.prompt_count < 1:
            raise ValueError("prompt_count must be at least 1")
    elif spec.method is Method.SLCT:
        vocab = config.tokens
        vocab.code_id(spec.slct_code)
        if spec.slct_init != "mean":
            kind, _, code = spec.slct_init.partition(":")
            if kind != "surrogate" or not is_code(code):
                raise ValueError(f"slct_init must be 'mean' or 'surrogate:<code>', got {spec.slct_init!r}")
            vocab.code_id(code)


@dataclass
class AdapterState:
    spec: AdapterSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def method(self) -> Method:
        return self.spec.method

    @property
    def slct_code(self) -> str:
        return self.spec.slct_code

    def copy(self) -> "AdapterState":
        return AdapterState(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def n_scalars(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def header(self, config: ModelConfig) -> dict:
        return {"spec": self.spec.to_json(), "config": config.to_json()}

    def to_bytes(self, config: ModelConfig) -> bytes:
        return checkpoint.dumps(checkpoint.MAGIC_ADAPTER, self.header(config), self.tensors)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def save(self, path, config: ModelConfig) -> str:
        return checkpoint.save(path, checkpoint.MAGIC_ADAPTER, self.header(config), self.tensors)

    @classmethod
    def load(cls, path) -> tuple["AdapterState", ModelConfig]:
        header, tensors = checkpoint.load(path, checkpoint.MAGIC_ADAPTER)
        return cls(AdapterSpec.from_json(header["spec"]), tensors), ModelConfig.from_json(header["config"])


def create_adapter(spec: AdapterSpec, config: ModelConfig, base: ParamStore, seed: int) -> AdapterState:
    validate_spec(spec, config)
    rng = np.random.default_rng([int(seed), 202])
    tensors: dict[str, np.ndarray] = {}
    embed = base["dec.embed"]
    vocab = config.tokens
    if spec.method is Method.LORA:
        shapes = param_shapes(config)
        for name in attention_matrices(config, spec.lora_targets):
            d, k = shapes[name]
            tensors[f"lora.{name}.A"] = rng.normal(0.0, 0.01, size=(spec.lora_rank, k))
            tensors[f"lora.{name}.B"] = np.zeros((d, spec.lora_rank))
    elif spec.method is Method.SPT:
        text_rows = np.array([vocab.index[s] for s in vocab.text])
        rows = rng.choice(text_rows, size=spec.prompt_count, replace=True)
        tensors["spt.prompts"] = embed[rows].copy()
    elif spec.method is Method.SLCT:
        if spec.slct_init == "mean":
            rows = [vocab.index[c] for c in vocab.codes if c != spec.slct_code]
            tensors["slct.code"] = embed[rows].mean(axis=0)
        else:
            tensors["slct.code"] = embed[vocab.code_id(spec.slct_init.partition(":")[2])].copy()
    return AdapterState(spec, tensors)


def effective_weight(base_matrix: np.ndarray, lora_pair: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """``base + B @ A`` for a LoRA pair ``(A, B)``; ``base`` is not modified."""
    a, b = (np.asarray(x, dtype=np.float64) for x in lora_pair)
    d, k = base_matrix.shape
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != k or b.shape[0] != d or a.shape[0] != b.shape[1]:
        raise ValueError(f"LoRA shapes do not conform: base {base_matrix.shape}, A {a.shape}, B {b.shape}")
    return base_matrix + b @ a


def merge_lora(base: ParamStore, state: AdapterState, allow_repeat: bool = False) -> ParamStore:
    """A new store with every LoRA target replaced by its effective weight.

    The store remembers which states were merged into it; merging the same
    state again is refused unless ``allow_repeat``.
    """
    if state.method is not Method.LORA:
        raise ValueError(f"merge_lora needs a LoRA state, got {state.method.value}")
    tag = f"lora:{state.fingerprint()}"
    if tag in base.merged and not allow_repeat:
        raise ValueError(f"adapter {tag} is already merged into this store")
    merged = base.copy()
    for key in state.tensors:
        if not key.endswith(".A"):
            continue
        name = key[len("lora."):-len(".A")]
        merged.tensors[name] = effective_weight(base[name], (state.tensors[key], state.tensors[f"lora.{name}.B"]))
    return replace(merged, merged=base.merged + (tag,))


def trainable_count(spec: AdapterSpec, config: ModelConfig) -> int:
    validate_spec(spec, config)
    shapes = param_shapes(config)
    if spec.method is Method.FULL_FT:
        return sum(int(np.prod(s)) for s in shapes.values())
    if spec.method is Method.LORA:
        return sum(spec.lora_rank * (shapes[n][0] + shapes[n][1])
                   for n in attention_matrices(config, spec.lora_targets))
    if spec.method is Method.SPT:
        return spec.prompt_count * config.d_model
    return config.d_model


def trainable_fraction(spec: AdapterSpec, config: ModelConfig) -> tuple[int, float]:
    total = sum(int(np.prod(s)) for s in param_shapes(config).values())
    count = trainable_count(spec, config)
    return count, (1.0 if spec.method is Method.FULL_FT else count / total)
