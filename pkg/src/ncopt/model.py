"""A complete policy: encoder + decoder head, with checkpoint round-tripping."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .decoder import (CLIP, HEADS, ArContext, NarContext, ar_precompute, graph_embedding,
                      init_ar_head, init_nar_head, nar_edge_logits)
from .encoder import EmbeddingState, EncoderConfig, encode, init_encoder_params
from .instances import GraphBatch, TspInstance, make_batch, parse_graph_mode


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: str = "ar"
    graph: str = "fraction:0.2"
    graph_embedding: str = "mean"
    heads: int = HEADS
    clip: float = CLIP

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.decoder not in ("ar", "nar"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        parse_graph_mode(self.graph)
        if self.decoder == "ar" and self.encoder.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the decoder heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def default_config(decoder: str = "ar", hidden: int = 128, **enc) -> ModelConfig:
    """Reference configuration: 3 layers for AR, 4 for NAR, max aggregation, batch-stat BN."""
    layers = enc.pop("layers", 3 if decoder == "ar" else 4)
    return ModelConfig(EncoderConfig(layers=layers, hidden=hidden, **enc), decoder=decoder)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict | None = None):
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else {}

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        params, buffers = init_encoder_params(config.encoder, rng)
        d = config.encoder.hidden
        (init_ar_head if config.decoder == "ar" else init_nar_head)(params, d, rng)
        return cls(config, params, buffers)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        params = {k: Tensor(p.data.copy(), True, k) for k, p in self.params.items()}
        return Model(copy.deepcopy(self.config), params, copy.deepcopy(self.buffers))

    def batch(self, instances) -> GraphBatch:
        mode = "full" if self.config.encoder.variant == "transformer" else self.config.graph
        return make_batch(instances, mode)

    def embed(self, batch: GraphBatch, training: bool = False, steps: int | None = None):
        """Returns (state, node embeddings (B, n, d), graph embedding (B, d))."""
        state = encode(batch, self.config.encoder, self.params, self.buffers, training, steps)
        d = self.config.encoder.hidden
        h = ad.reshape(state.h, (batch.batch_size, batch.n, d))
        return state, h, graph_embedding(h, self.config.graph_embedding)

    def ar_fixed(self, h: Tensor, h_graph: Tensor):
        return ar_precompute(h, h_graph, self.params, self.config.heads)

    def nar_logits(self, state: EmbeddingState, h_graph: Tensor, batch: GraphBatch) -> Tensor:
        return nar_edge_logits(state.h, h_graph, batch, self.params)

    def context(self, batch: GraphBatch, steps: int | None = None):
        """Decoder context for search, computed without recording gradients."""
        with ad.no_grad():
            state, h, hg = self.embed(batch, training=False, steps=steps)
            if self.config.decoder == "ar":
                return ArContext(self.ar_fixed(h, hg), self.params, batch.coords,
                                 self.config.heads, self.config.clip)
            return NarContext.from_logits(self.nar_logits(state, hg, batch), batch)

    def embeddings(self, instances, steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        with ad.no_grad():
            _, h, hg = self.embed(self.batch(instances), steps=steps)
        return h.data, hg.data

    # checkpoints ---------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        tensors = {f"param:{k}": p.data for k, p in self.params.items()}
        for name, stats in self.buffers.items():
            for stat, arr in stats.items():
                tensors[f"buffer:{name}:{stat}"] = arr
        save_tensors(path, tensors, {"model": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["Model", dict]:
        tensors, meta = load_tensors(path)
        if "model" not in meta:
            raise CheckpointError(f"{path}: no model configuration in manifest")
        config = ModelConfig.from_dict(meta["model"])
        params, buffers = {}, {}
        for key, arr in tensors.items():
            kind, _, rest = key.partition(":")
            if kind == "param":
                params[rest] = Tensor(arr, True, rest)
            elif kind == "buffer":
                name, _, stat = rest.rpartition(":")
                buffers.setdefault(name, {})[stat] = arr
        d = config.encoder.hidden
        if params[f"enc.in_node.W"].shape[1] != d:
            raise CheckpointError(f"{path}: hidden size mismatch between weights and config")
        return cls(config, params, buffers), meta


def as_instances(coords: np.ndarray) -> list[TspInstance]:
    return [TspInstance(c) for c in coords]
