"""Neural building blocks and the per-party encoder stack.

A party's model holds two towers: a cross-party encoder (backbone f_c,
projector, predictor h_c) trained on aligned samples, and a local
encoder split into bottom/top (f_lb, f_lt) with its own projector and
predictor h_l, plus an optional EMA target copy. Categorical inputs go
through per-tower embedding tables whose last row is a reserved,
never-trained corruption vector. The active party additionally owns a
top classifier for the supervised split network.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, FingerprintError, FormatError, VersionError

CHECKPOINT_MAGIC = b"VFLH"
CHECKPOINT_VERSION = 1


def init_weights(layer, rng):
    """Glorot-uniform weights, zero biases."""
    fan_in, fan_out = layer.weight.shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    layer.weight.values[:] = rng.uniform(-bound, bound, size=layer.weight.shape)
    layer.bias.values[:] = 0.0


class DenseLayer:
    def __init__(self, in_dim, out_dim, activation="identity", rng=None):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"dense dims must be positive, got {in_dim}x{out_dim}")
        if activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.weight = T.Tensor(np.zeros((in_dim, out_dim)), requires_grad=True)
        self.bias = T.Tensor(np.zeros((1, out_dim)), requires_grad=True)
        self.activation = activation
        if rng is not None:
            init_weights(self, rng)

    def forward(self, x):
        out = T.add(T.matmul(x, self.weight), self.bias)
        if self.activation == "relu":
            out = T.relu(out)
        return out

    def params(self):
        return [self.weight, self.bias]


class Identity:
    """Parameter-free predictor used by the MoCo variant."""

    def forward(self, x):
        return x

    def params(self):
        return []


class MLP:
    def __init__(self, dims, rng, hidden_activation="relu", final_activation="identity"):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least one layer")
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            act = final_activation if i == len(dims) - 2 else hidden_activation
            self.layers.append(DenseLayer(a, b, activation=act, rng=rng))

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class EmbeddingLayer:
    """Lookup table with a reserved corruption row at index ``vocab``.

    The corruption row is excluded from gradient updates; augmentation
    maps corrupted categorical cells onto it.
    """

    def __init__(self, vocab, dim, rng):
        if vocab <= 0 or dim <= 0:
            raise ConfigError(f"embedding dims must be positive, got {vocab}x{dim}")
        bound = np.sqrt(6.0 / (vocab + 1 + dim))
        values = rng.uniform(-bound, bound, size=(vocab + 1, dim))
        self.table = T.Tensor(values, requires_grad=True)
        self.vocab = vocab
        self.dim = dim
        self.corruption_index = vocab

    def forward(self, indices):
        return T.embedding_lookup(self.table, indices, frozen_rows=(self.corruption_index,))

    def params(self):
        return [self.table]


class EmaTracker:
    """theta_tgt <- m*theta_tgt + (1-m)*theta for every registered pair."""

    def __init__(self, momentum, pairs):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError("EMA momentum must be in [0, 1]")
        self.momentum = momentum
        self.pairs = list(pairs)

    def update(self):
        m = self.momentum
        for online, target in self.pairs:
            target.values *= m
            target.values += (1.0 - m) * online.values


@dataclass
class ModelConfig:
    """Per-party model dimensions shared by every party.

    ``input_dim`` is the continuous feature count; categorical columns
    are described by ``cat_cardinalities`` and enter through embeddings.
    ``finetune_encoders`` picks the fine-tune representation: local
    backbone only, cross backbone only, or their concatenation.
    """

    input_dim: int
    num_classes: int
    num_parties: int = 2
    cat_cardinalities: tuple = ()
    embed_dim: int = 8
    hidden_dim: int = 64
    repr_dim: int = 64
    projector_dims: tuple = (64, 64, 64)
    predictor_dims: tuple = (16, 64)
    moco_projector_out: int = 64
    finetune_encoders: str = "concat"  # local | cross | concat
    aggregator: str = "concat"

    def __post_init__(self):
        for name in ("num_classes", "num_parties", "hidden_dim", "repr_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.input_dim < 0 or self.encoded_input_dim() <= 0:
            raise ConfigError("party must have at least one feature after encoding")
        if self.finetune_encoders not in ("local", "cross", "concat"):
            raise ConfigError(f"unknown finetune_encoders {self.finetune_encoders!r}")
        if self.predictor_dims[-1] != self.projector_dims[-1]:
            raise ConfigError(
                f"predictor output dim {self.predictor_dims[-1]} must equal "
                f"projector output dim {self.projector_dims[-1]}"
            )

    def encoded_input_dim(self):
        return self.input_dim + self.embed_dim * len(self.cat_cardinalities)

    def finetune_repr_dim(self):
        return self.repr_dim * (2 if self.finetune_encoders == "concat" else 1)

    def top_input_dim(self):
        per_party = self.finetune_repr_dim()
        if self.aggregator == "concat":
            return per_party * self.num_parties
        return per_party

    @staticmethod
    def paper_scale(**overrides):
        """Appendix-style dims: 512-wide towers, [512,512,512] projector,
        512->128->512 predictor, MoCo projector output 128."""
        defaults = dict(
            hidden_dim=512,
            repr_dim=512,
            projector_dims=(512, 512, 512),
            predictor_dims=(128, 512),
            moco_projector_out=128,
            embed_dim=32,
        )
        defaults.update(overrides)
        return ModelConfig(**defaults)


class EncoderStack:
    """One party's full model: local tower, cross tower, optional EMA target."""

    def __init__(self, cfg: ModelConfig, variant: str, rng):
        self.cfg = cfg
        self.variant = variant
        in_dim = cfg.encoded_input_dim()

        # Local tower. The backbone is 2 dense layers; the top layer is
        # the aggregation unit shared through PMA.
        self.embed_l = [EmbeddingLayer(v, cfg.embed_dim, rng) for v in cfg.cat_cardinalities]
        self.f_lb = MLP([in_dim, cfg.hidden_dim], rng, final_activation="relu")
        self.f_lt = DenseLayer(cfg.hidden_dim, cfg.repr_dim, rng=rng)
        proj_out = cfg.moco_projector_out if variant == "moco" else cfg.projector_dims[-1]
        self.projector_l = MLP(
            [cfg.repr_dim, cfg.projector_dims[0], cfg.projector_dims[1], proj_out], rng
        )
        if variant == "moco":
            self.h_l = Identity()
        else:
            self.h_l = MLP([proj_out, cfg.predictor_dims[0], proj_out], rng)

        # Cross-party tower.
        self.embed_c = [EmbeddingLayer(v, cfg.embed_dim, rng) for v in cfg.cat_cardinalities]
        self.f_c = MLP([in_dim, cfg.hidden_dim, cfg.repr_dim], rng, final_activation="identity")
        self.projector_c = MLP(
            [cfg.repr_dim, cfg.projector_dims[0], cfg.projector_dims[1], proj_out], rng
        )
        if variant == "moco":
            self.h_c = Identity()
        else:
            self.h_c = MLP([proj_out, cfg.predictor_dims[0], proj_out], rng)

        # EMA target of the local tower (BYOL/MoCo only; SimSiam reuses
        # the online tower under stop-gradient).
        self.target = None
        self.ema = None
        if variant in ("byol", "moco"):
            momentum = 0.995 if variant == "byol" else 0.99
            self.target = {
                name: T.Tensor(p.values.copy())
                for name, p in self._local_target_named()
            }
            pairs = [(p, self.target[name]) for name, p in self._local_target_named()]
            self.ema = EmaTracker(momentum, pairs)

    # -- parameter bookkeeping ------------------------------------------
    def _named(self, prefix, module):
        if isinstance(module, MLP):
            out = []
            for i, layer in enumerate(module.layers):
                out.append((f"{prefix}.{i}.weight", layer.weight))
                out.append((f"{prefix}.{i}.bias", layer.bias))
            return out
        if isinstance(module, DenseLayer):
            return [(f"{prefix}.weight", module.weight), (f"{prefix}.bias", module.bias)]
        if isinstance(module, Identity):
            return []
        raise TypeError(module)

    def _local_target_named(self):
        out = [(f"embed_l.{i}.table", e.table) for i, e in enumerate(self.embed_l)]
        out += self._named("f_lb", self.f_lb)
        out += self._named("f_lt", self.f_lt)
        out += self._named("projector_l", self.projector_l)
        return out

    def named_params(self):
        out = [(f"embed_l.{i}.table", e.table) for i, e in enumerate(self.embed_l)]
        out += self._named("f_lb", self.f_lb)
        out += self._named("f_lt", self.f_lt)
        out += self._named("projector_l", self.projector_l)
        out += self._named("h_l", self.h_l)
        out += [(f"embed_c.{i}.table", e.table) for i, e in enumerate(self.embed_c)]
        out += self._named("f_c", self.f_c)
        out += self._named("projector_c", self.projector_c)
        out += self._named("h_c", self.h_c)
        if self.target is not None:
            out += [(f"target.{name}", p) for name, p in sorted(self.target.items())]
        return out

    def params_cross(self):
        ps = [e.table for e in self.embed_c]
        ps += self.f_c.params() + self.projector_c.params() + self.h_c.params()
        return ps

    def params_local(self):
        ps = [e.table for e in self.embed_l]
        ps += self.f_lb.params() + [self.f_lt.weight, self.f_lt.bias]
        ps += self.projector_l.params() + self.h_l.params()
        return ps

    def named_pma_params(self):
        """f_lt and h_l parameters in a canonical order shared by all parties."""
        return self._named("f_lt", self.f_lt) + self._named("h_l", self.h_l)

    def params_finetune(self):
        mode = self.cfg.finetune_encoders
        ps = []
        if mode in ("local", "concat"):
            ps += [e.table for e in self.embed_l]
            ps += self.f_lb.params() + [self.f_lt.weight, self.f_lt.bias]
        if mode in ("cross", "concat"):
            ps += [e.table for e in self.embed_c]
            ps += self.f_c.params()
        return ps

    # -- forward paths ----------------------------------------------------
    def _encode_input(self, cont, cats, embeds):
        parts = []
        if cont.shape[1]:
            parts.append(T.Tensor(cont))
        for j, emb in enumerate(embeds):
            parts.append(emb.forward(cats[:, j]))
        if not parts:
            raise ConfigError("party has no features")
        return parts[0] if len(parts) == 1 else T.concat_cols(parts)

    def local_backbone(self, cont, cats):
        x = self._encode_input(cont, cats, self.embed_l)
        return self.f_lt.forward(self.f_lb.forward(x))

    def local_projected(self, cont, cats):
        return self.projector_l.forward(self.local_backbone(cont, cats))

    def local_predicted(self, cont, cats):
        return self.h_l.forward(self.local_projected(cont, cats))

    def target_projected(self, cont, cats):
        """Target-tower representation; constants for SimSiam via the
        online tower (losses stop the gradient), EMA weights otherwise."""
        if self.target is None:
            return self.local_projected(cont, cats)
        t = self.target
        parts = []
        if cont.shape[1]:
            parts.append(T.Tensor(cont))
        for j, emb in enumerate(self.embed_l):
            tbl = t[f"embed_l.{j}.table"]
            parts.append(T.embedding_lookup(tbl, cats[:, j]))
        x = parts[0] if len(parts) == 1 else T.concat_cols(parts)

        def dense(x, prefix, activation):
            out = T.add(T.matmul(x, t[f"{prefix}.weight"]), t[f"{prefix}.bias"])
            return T.relu(out) if activation == "relu" else out

        for i, layer in enumerate(self.f_lb.layers):
            x = dense(x, f"f_lb.{i}", layer.activation)
        x = dense(x, "f_lt", self.f_lt.activation)
        for i, layer in enumerate(self.projector_l.layers):
            x = dense(x, f"projector_l.{i}", layer.activation)
        return x

    def cross_backbone(self, cont, cats):
        x = self._encode_input(cont, cats, self.embed_c)
        return self.f_c.forward(x)

    def cross_projected(self, cont, cats):
        return self.projector_c.forward(self.cross_backbone(cont, cats))

    def cross_predicted_from(self, z_c):
        return self.h_c.forward(z_c)

    def finetune_repr(self, cont, cats):
        mode = self.cfg.finetune_encoders
        if mode == "local":
            return self.local_backbone(cont, cats)
        if mode == "cross":
            return self.cross_backbone(cont, cats)
        return T.concat_cols([self.local_backbone(cont, cats), self.cross_backbone(cont, cats)])


class PartyModel:
    """EncoderStack plus the active party's top classifier."""

    def __init__(self, stack: EncoderStack, top_model=None):
        self.stack = stack
        self.top_model = top_model

    def named_params(self):
        out = list(self.stack.named_params())
        if self.top_model is not None:
            out += self.stack._named("top_model", self.top_model)
        return out


def build_party_model(cfg: ModelConfig, role, variant, rng) -> PartyModel:
    if role not in ("active", "passive"):
        raise ConfigError(f"unknown role {role!r}")
    if variant not in ("simsiam", "byol", "moco"):
        raise ConfigError(f"unknown SSL variant {variant!r}")
    stack = EncoderStack(cfg, variant, rng)
    top = None
    if role == "active":
        top = DenseLayer(cfg.top_input_dim(), cfg.num_classes, rng=rng)
    return PartyModel(stack, top)


# -- checkpoints -------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    config_fingerprint: str
    seeds: list
    party_params: list  # list of {name: ndarray} dicts, one per party

    def restore_into(self, models):
        if len(models) != len(self.party_params):
            raise FingerprintError(
                f"checkpoint holds {len(self.party_params)} parties, got {len(models)} models"
            )
        for model, blob in zip(models, self.party_params):
            named = dict(model.named_params())
            if set(named) != set(blob):
                missing = set(named) ^ set(blob)
                raise FingerprintError(f"parameter names disagree: {sorted(missing)[:4]}")
            for name, values in blob.items():
                if named[name].shape != values.shape:
                    raise FingerprintError(f"shape mismatch for {name}")
                named[name].values[:] = values


def config_fingerprint(config) -> str:
    if isinstance(config, ModelConfig):
        config = asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, models, config, seeds=()):
    header = {
        "version": CHECKPOINT_VERSION,
        "party_count": len(models),
        "config_fingerprint": config if isinstance(config, str) else config_fingerprint(config),
        "seeds": list(seeds),
        "parties": [
            [{"name": name, "rows": p.rows, "cols": p.cols} for name, p in m.named_params()]
            for m in models
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for m in models:
            for _, p in m.named_params():
                fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_checkpoint(path, expect_fingerprint=None) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 6)
    if len(raw) < 10 + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(raw[10 : 10 + hlen])
    except ValueError as exc:
        raise FormatError("corrupt checkpoint header") from exc
    if expect_fingerprint is not None and header["config_fingerprint"] != expect_fingerprint:
        raise FingerprintError("checkpoint fingerprint does not match config")
    offset = 10 + hlen
    party_params = []
    for party in header["parties"]:
        blob = {}
        for entry in party:
            nbytes = entry["rows"] * entry["cols"] * 8
            if offset + nbytes > len(raw):
                raise FormatError("truncated checkpoint payload")
            arr = np.frombuffer(raw, dtype="<f8", count=entry["rows"] * entry["cols"], offset=offset)
            blob[entry["name"]] = arr.reshape(entry["rows"], entry["cols"]).copy()
            offset += nbytes
        party_params.append(blob)
    if offset != len(raw):
        raise FormatError("trailing bytes in checkpoint")
    return Checkpoint(
        version=version,
        config_fingerprint=header["config_fingerprint"],
        seeds=header["seeds"],
        party_params=party_params,
    )
