"""Modality encoders, projection layers, the fusion head and the assembled model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FACIAL_MODALITIES, MODALITIES, MODALITY_DIMS, N_CLASSES
from .errors import DimensionError, ValidationError

EMBED_DIM = 128


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(1.0 / fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Mixin collecting named parameters from ``self.params``."""

    params: dict[str, Tensor]

    def named_parameters(self, prefix=""):
        return {f"{prefix}{k}": v for k, v in self.params.items()}


class GruEncoder(Module):
    """Single-layer GRU whose final hidden state is the sequence embedding.

    z = s(x W_z + h U_z + b_z), r = s(x W_r + h U_r + b_r),
    h~ = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * h~
    """

    def __init__(self, input_dim, hidden_dim=64, dropout=0.1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.dropout = dropout
        p = {}
        for g in ("z", "r", "h"):
            p[f"W_{g}"] = _uniform(rng, input_dim, (input_dim, hidden_dim))
            p[f"U_{g}"] = _uniform(rng, hidden_dim, (hidden_dim, hidden_dim))
            p[f"b_{g}"] = ad.parameter(np.zeros(hidden_dim))
        self.params = p

    def forward(self, seqs: Sequence[np.ndarray], training=False, rng=None) -> Tensor:
        """Encode a batch of (T_b x input_dim) sequences to a (B x hidden) tensor."""
        if not seqs:
            raise ValidationError("empty batch")
        lengths = np.array([s.shape[0] for s in seqs])
        if lengths.min() == 0:
            raise ValidationError("sequence has no timesteps (T == 0)")
        for s in seqs:
            if s.ndim != 2 or s.shape[1] != self.input_dim:
                raise DimensionError("gru", s.shape, (None, self.input_dim))
        B, T = len(seqs), int(lengths.max())
        X = np.zeros((T, B, self.input_dim))
        for b, s in enumerate(seqs):
            X[: s.shape[0], b] = s
        p = self.params
        use_dropout = training and self.dropout > 0
        if use_dropout and rng is None:
            raise ValidationError("training-mode dropout needs an rng")
        keep = 1.0 - self.dropout
        ragged = lengths.min() != T
        h = Tensor(np.zeros((B, self.hidden_dim)))
        for t in range(T):
            h_in = h
            if use_dropout and t > 0:
                mask = (rng.random((B, self.hidden_dim)) < keep) / keep
                h_in = ad.mul(h, mask)
            x = X[t]
            z = ad.sigmoid(x @ p["W_z"] + h_in @ p["U_z"] + p["b_z"])
            r = ad.sigmoid(x @ p["W_r"] + h_in @ p["U_r"] + p["b_r"])
            cand = ad.tanh(x @ p["W_h"] + ad.mul(r, h_in) @ p["U_h"] + p["b_h"])
            h_new = h_in + ad.mul(z, cand - h_in)
            if ragged:
                active = (t < lengths).astype(np.float64)[:, None]
                # finished sequences keep their last (undropped) state
                h = h + ad.mul(h_new - h, active)
            else:
                h = h_new
        return h

    def encode_sequence(self, seq, training=False, rng=None) -> Tensor:
        return self.forward([np.asarray(seq, dtype=np.float64)], training, rng)


class TraceEncoder(Module):
    """Per-event feedforward 768 -> hidden -> out with tanh, mean-pooled over events."""

    def __init__(self, input_dim=768, hidden_dim=128, out_dim=64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.out_dim = out_dim
        self.params = {
            "W1": _uniform(rng, input_dim, (input_dim, hidden_dim)),
            "b1": ad.parameter(np.zeros(hidden_dim)),
            "W2": _uniform(rng, hidden_dim, (hidden_dim, out_dim)),
            "b2": ad.parameter(np.zeros(out_dim)),
        }

    def forward(self, seqs: Sequence[np.ndarray], training=False, rng=None) -> Tensor:
        if not seqs:
            raise ValidationError("empty batch")
        lengths = [s.shape[0] for s in seqs]
        if min(lengths) == 0:
            raise ValidationError("trace sequence has no events (T == 0)")
        for s in seqs:
            if s.ndim != 2 or s.shape[1] != self.input_dim:
                raise DimensionError("trace encoder", s.shape, (None, self.input_dim))
        rows = np.concatenate(seqs, axis=0)
        pool = np.zeros((len(seqs), rows.shape[0]))
        start = 0
        for b, n in enumerate(lengths):
            pool[b, start:start + n] = 1.0 / n
            start += n
        p = self.params
        hidden = ad.tanh(rows @ p["W1"] + p["b1"])
        return Tensor(pool) @ (hidden @ p["W2"] + p["b2"])

    def encode_trace(self, seq, training=False, rng=None) -> Tensor:
        return self.forward([np.asarray(seq, dtype=np.float64)])


class ProjectionLayer(Module):
    def __init__(self, d_in, d_out=EMBED_DIM, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = d_in
        self.d_out = d_out
        self.params = {"W": _uniform(rng, d_in, (d_in, d_out)), "B": ad.parameter(np.zeros(d_out))}

    def __call__(self, e: Tensor) -> Tensor:
        e = ad.as_tensor(e)
        if e.data.ndim != 2 or e.shape[1] != self.d_in:
            raise DimensionError("project", e.shape, (None, self.d_in))
        return e @ self.params["W"] + self.params["B"]


def project(p: ProjectionLayer, e) -> Tensor:
    return p(e)


class ClassifierHead(Module):
    """Affine map from the concatenated 4 x 128 representation to class logits."""

    def __init__(self, d_in=len(MODALITIES) * EMBED_DIM, n_class=N_CLASSES, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = d_in
        self.params = {"W_FC": _uniform(rng, d_in, (d_in, n_class)), "b_FC": ad.parameter(np.zeros(n_class))}

    def logits(self, u) -> Tensor:
        u = ad.as_tensor(u)
        if u.data.ndim == 1:
            u = ad.reshape(u, (1, -1))
        if u.shape[1] != self.d_in:
            raise DimensionError("classify", u.shape, (None, self.d_in))
        return u @ self.params["W_FC"] + self.params["b_FC"]

    def __call__(self, u) -> Tensor:
        return ad.softmax(self.logits(u))


def classify(head: ClassifierHead, u) -> Tensor:
    return head(u)


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    return ad.softmax_cross_entropy(logits, labels)


def cross_entropy_from_probs(probs, labels) -> float:
    """Cross-entropy of already-normalised probability rows, floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise DimensionError("cross_entropy", probs.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValidationError(f"label outside valid range 0-{probs.shape[1] - 1}")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, ad.PROB_FLOOR))))


# ---------------------------------------------------------------- full model

@dataclass
class ModelConfig:
    gru_hidden: int = 64
    trace_hidden: int = 128
    trace_out: int = 64
    embed_dim: int = EMBED_DIM
    dropout: float = 0.1
    use_projection: bool = True
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class MultimodalModel:
    """Encoders -> projections -> concatenation -> shared head.

    Without projection the raw encoder outputs are zero-padded to
    ``embed_dim`` so the head input keeps its width.
    """

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        self.encoders: dict[str, GruEncoder | TraceEncoder] = {
            m: GruEncoder(MODALITY_DIMS[m], c.gru_hidden, c.dropout, rng) for m in FACIAL_MODALITIES}
        self.encoders["Trace"] = TraceEncoder(MODALITY_DIMS["Trace"], c.trace_hidden, c.trace_out, rng)
        self.projections: dict[str, ProjectionLayer] = {}
        if c.use_projection:
            for m in MODALITIES:
                d_in = c.trace_out if m == "Trace" else c.gru_hidden
                self.projections[m] = ProjectionLayer(d_in, c.embed_dim, rng)
        self.head = ClassifierHead(len(MODALITIES) * c.embed_dim, N_CLASSES, rng)

    def named_parameters(self, modalities=MODALITIES) -> dict[str, Tensor]:
        out = {}
        for m in MODALITIES:
            if m not in modalities:
                continue
            out.update(self.encoders[m].named_parameters(f"enc.{m}."))
            if m in self.projections:
                out.update(self.projections[m].named_parameters(f"proj.{m}."))
        out.update(self.head.named_parameters("head."))
        return out

    def parameters(self, modalities=MODALITIES):
        return list(self.named_parameters(modalities).values())

    def embed(self, records, modalities=MODALITIES, training=False, rng=None) -> dict[str, Tensor]:
        """Per-modality (B x embed_dim) embeddings; absent modalities come back as zeros."""
        B = len(records)
        out = {}
        for m in MODALITIES:
            if m not in modalities:
                continue
            e = self.encoders[m].forward([r.sequences[m] for r in records], training, rng)
            if m in self.projections:
                e = self.projections[m](e)
            elif e.shape[1] < self.config.embed_dim:
                e = ad.concat([e, Tensor(np.zeros((B, self.config.embed_dim - e.shape[1])))], axis=1)
            missing = np.array([m in r.absent for r in records])
            if missing.any():
                e = ad.mul(e, (~missing).astype(np.float64)[:, None])
            out[m] = e
        return out

    def fuse(self, embeddings: dict[str, Tensor], batch_size) -> Tensor:
        zeros = None
        parts = []
        for m in MODALITIES:
            if m in embeddings:
                parts.append(embeddings[m])
            else:
                if zeros is None:
                    zeros = Tensor(np.zeros((batch_size, self.config.embed_dim)))
                parts.append(zeros)
        return ad.concat(parts, axis=1)

    def logits(self, embeddings, batch_size) -> Tensor:
        return self.head.logits(self.fuse(embeddings, batch_size))

    def predict_proba(self, records, modalities=MODALITIES) -> np.ndarray:
        emb = self.embed(records, modalities, training=False)
        return ad.softmax(self.logits(emb, len(records))).data

    def predict(self, records, modalities=MODALITIES) -> np.ndarray:
        return np.argmax(self.predict_proba(records, modalities), axis=1)

    # -- persistence

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ValidationError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"load {k}", p.shape, state[k].shape)
            p.data[...] = state[k]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(directory / "model.ckpt", self.state())
        (directory / "model_config.json").write_text(json.dumps(self.config.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        cfg = ModelConfig.from_dict(json.loads((directory / "model_config.json").read_text()))
        model = cls(cfg)
        model.load_state(ad.load_checkpoint(directory / "model.ckpt"))
        return model
