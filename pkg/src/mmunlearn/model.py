"""Toy multimodal model: trainable visual module + frozen language head.

Layout (row-vector convention, activations are rows):

  visual module   h0 = X @ w_in            (P x d_img -> P x d)
                  h  = tanh(adapted(h, enc_i))   per encoder layer (d x d)
                  H  = adapted(h, proj)          (P x d_lm), the IVRs
  fusion          mean over the concatenation of visual tokens H and
                  question-token embeddings
  language head   two tanh layers (d_lm x d_lm) then a linear answer head

Low-rank adapters attach to every square encoder layer and the projector.
They are stored transposed relative to the usual column-vector notation:
``a_t`` holds the frozen basis as columns (d_in x r, equal to the
null-space block U_perp) and ``b_t`` (r x d_out) is the trainable factor,
so the adapted forward is x @ w + (x @ a_t) @ b_t without ever
materializing the rank-r product.

QA forwards never touch the visual module; VQA questions carry no name
token, so entity identity can only enter through the image.

Checkpoint files ("NSUC"): magic, config echo as length-prefixed UTF-8
JSON, then a named-tensor table in the NSUM matrix format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .autodiff import Param, Tape
from .errors import ConfigError, ContractError, DimensionError, InputError
from .rng import stream

CHECKPOINT_MAGIC = b"NSUC"


@dataclass(frozen=True)
class ModelConfig:
    d_img: int = 16
    patches: int = 16
    d: int = 32
    d_lm: int = 32
    encoder_depth: int = 2
    text_vocab: int = 65
    answer_vocab: int = 8

    def validate(self) -> None:
        if min(self.d_img, self.patches, self.d, self.d_lm,
               self.text_vocab, self.answer_vocab) < 1 or self.encoder_depth < 1:
            raise ConfigError("model config: all dimensions must be >= 1")


class LoraAdapter:
    """Rank-r adapter for one layer; a_t frozen, b_t trainable."""

    def __init__(self, layer_id: str, a_t: np.ndarray, d_out: int):
        a_t = np.asarray(a_t, dtype=np.float64)
        if a_t.ndim != 2:
            raise DimensionError(f"adapter {layer_id}: a_t must be 2-D")
        self.layer_id = layer_id
        self.rank = a_t.shape[1]
        self.a_t = Param(a_t, trainable=False, name=f"lora.{layer_id}.a_t")
        self.b_t = Param(np.zeros((self.rank, d_out)), trainable=True,
                         name=f"lora.{layer_id}.b_t")

    @property
    def a(self) -> np.ndarray:
        """A in the conventional orientation (r x d_in)."""
        return self.a_t.value.T

    @property
    def b(self) -> np.ndarray:
        """B in the conventional orientation (d_out x r)."""
        return self.b_t.value.T


def adapted_layer_forward(w: np.ndarray, adapter: Optional[LoraAdapter],
                          x: np.ndarray) -> np.ndarray:
    """x @ w plus the factored low-rank correction (x @ a_t) @ b_t."""
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"adapted_layer_forward: {x.shape} x {w.shape}")
    y = x @ w
    if adapter is not None:
        if adapter.a_t.value.shape[0] != w.shape[0] or \
                adapter.b_t.value.shape[1] != w.shape[1]:
            raise DimensionError(
                f"adapter {adapter.layer_id}: rank shapes do not match layer {w.shape}")
        y = y + (x @ adapter.a_t.value) @ adapter.b_t.value
    return y


class ToyModel:
    """Parameter container plus eval-path forwards and tape graph builders."""

    def __init__(self, config: ModelConfig, params: dict[str, Param]):
        config.validate()
        self.config = config
        self.params = params
        self.adapters: dict[str, LoraAdapter] = {}

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ToyModel":
        config.validate()

        def make(name, shape):
            fan_in = shape[0]
            vals = stream(seed, f"init/{name}").uniform(-1.0, 1.0, shape)
            return Param(vals / np.sqrt(fan_in), name=name)

        params = {"w_in": make("w_in", (config.d_img, config.d))}
        for i in range(config.encoder_depth):
            params[f"enc{i}"] = make(f"enc{i}", (config.d, config.d))
        params["proj"] = make("proj", (config.d, config.d_lm))
        params["emb"] = make("emb", (config.text_vocab, config.d_lm))
        params["body0"] = make("body0", (config.d_lm, config.d_lm))
        params["body1"] = make("body1", (config.d_lm, config.d_lm))
        params["head"] = make("head", (config.d_lm, config.answer_vocab))
        return cls(config, params)

    @property
    def adapted_layer_ids(self) -> list[str]:
        return [f"enc{i}" for i in range(self.config.encoder_depth)] + ["proj"]

    @property
    def visual_param_names(self) -> list[str]:
        return ["w_in"] + self.adapted_layer_ids

    @property
    def lm_param_names(self) -> list[str]:
        return ["emb", "body0", "body1", "head"]

    def set_trainable(self, names: Sequence[str], flag: bool) -> None:
        for n in names:
            self.params[n].trainable = flag

    def trainable_params(self) -> list[Param]:
        out = [p for p in self.params.values() if p.trainable]
        for ad in self.adapters.values():
            out.extend(p for p in (ad.a_t, ad.b_t) if p.trainable)
        return out

    def all_params(self) -> list[Param]:
        out = list(self.params.values())
        for ad in self.adapters.values():
            out.extend((ad.a_t, ad.b_t))
        return out

    def clone(self) -> "ToyModel":
        params = {n: Param(p.value.copy(), trainable=p.trainable, name=p.name)
                  for n, p in self.params.items()}
        m = ToyModel(self.config, params)
        for lid, ad in self.adapters.items():
            copy = LoraAdapter(lid, ad.a_t.value.copy(), ad.b_t.value.shape[1])
            copy.b_t.value[...] = ad.b_t.value
            copy.b_t.trainable = ad.b_t.trainable
            m.adapters[lid] = copy
        return m

    # -- validation --------------------------------------------------------

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not (0 <= t < self.config.text_vocab):
                raise InputError(f"token {t} outside vocab of {self.config.text_vocab}")

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (self.config.patches, self.config.d_img):
            raise InputError(
                f"image shape {image.shape} != ({self.config.patches}, {self.config.d_img})")
        return image

    # -- eval-path forwards (plain numpy) -----------------------------------

    def _adapter_for(self, layer_id: str, enabled: bool) -> Optional[LoraAdapter]:
        return self.adapters.get(layer_id) if enabled else None

    def encode(self, x: np.ndarray, adapters_enabled: bool,
               record_inputs: Optional[dict] = None) -> np.ndarray:
        """Visual module over patch rows; optionally records layer inputs."""
        h = x @ self.params["w_in"].value
        for i in range(self.config.encoder_depth):
            lid = f"enc{i}"
            if record_inputs is not None:
                record_inputs[lid] = h.copy()
            h = np.tanh(adapted_layer_forward(self.params[lid].value,
                                              self._adapter_for(lid, adapters_enabled), h))
        if record_inputs is not None:
            record_inputs["proj"] = h.copy()
        return adapted_layer_forward(self.params["proj"].value,
                                     self._adapter_for("proj", adapters_enabled), h)

    def extract_ivr(self, image: np.ndarray,
                    adapters_enabled: bool) -> tuple[np.ndarray, np.ndarray]:
        image = self._check_image(image)
        h = self.encode(image, adapters_enabled)
        return h, h.mean(axis=0)

    def _body(self, fused: np.ndarray) -> np.ndarray:
        h = np.tanh(fused @ self.params["body0"].value)
        h = np.tanh(h @ self.params["body1"].value)
        return h @ self.params["head"].value

    def forward_vqa(self, image: np.ndarray, question_tokens: Sequence[int],
                    adapters_enabled: bool) -> np.ndarray:
        image = self._check_image(image)
        self._check_tokens(question_tokens)
        h_ivr, _ = self.extract_ivr(image, adapters_enabled)
        q_emb = self.params["emb"].value[list(question_tokens)]
        p, l = h_ivr.shape[0], q_emb.shape[0]
        fused = (p * h_ivr.mean(axis=0, keepdims=True) + q_emb.sum(axis=0, keepdims=True)) / (p + l)
        return self._body(fused)[0]

    def forward_qa(self, question_tokens: Sequence[int]) -> np.ndarray:
        self._check_tokens(question_tokens)
        q_emb = self.params["emb"].value[list(question_tokens)]
        fused = q_emb.mean(axis=0, keepdims=True)
        return self._body(fused)[0]

    # -- tape graph builders (training path) --------------------------------

    def visual_graph(self, tape: Tape, x_node, adapters_enabled: bool):
        """Build the visual module on a tape; returns the IVR node."""
        h = tape.matmul(x_node, tape.param(self.params["w_in"]))
        for i in range(self.config.encoder_depth):
            lid = f"enc{i}"
            h = tape.tanh(self._adapted_graph(tape, lid, h, adapters_enabled))
        return self._adapted_graph(tape, "proj", h, adapters_enabled)

    def _adapted_graph(self, tape: Tape, layer_id: str, x, adapters_enabled: bool):
        y = tape.matmul(x, tape.param(self.params[layer_id]))
        adapter = self._adapter_for(layer_id, adapters_enabled)
        if adapter is not None:
            low = tape.matmul(tape.matmul(x, tape.param(adapter.a_t)),
                              tape.param(adapter.b_t))
            y = tape.add(y, low)
        return y

    def body_graph(self, tape: Tape, fused):
        h = tape.tanh(tape.matmul(fused, tape.param(self.params["body0"])))
        h = tape.tanh(tape.matmul(h, tape.param(self.params["body1"])))
        return tape.matmul(h, tape.param(self.params["head"]))

    def fused_vqa_graph(self, tape: Tape, images: Sequence[np.ndarray],
                        token_rows: Sequence[Sequence[int]], adapters_enabled: bool):
        """Batched VQA fusion; returns (fused node BxD, IVR node (B*P)xD, pooled Z node BxD)."""
        if len(images) != len(token_rows) or not images:
            raise ContractError("fused_vqa_graph: empty or mismatched batch")
        p = self.config.patches
        b = len(images)
        stacked = np.concatenate([self._check_image(im) for im in images], axis=0)
        h_ivr = self.visual_graph(tape, tape.const(stacked), adapters_enabled)
        pool = np.zeros((b, b * p))
        for i in range(b):
            pool[i, i * p:(i + 1) * p] = 1.0 / p
        z = tape.matmul(tape.const(pool), h_ivr)
        sel = np.zeros((b, self.config.text_vocab))
        n_tok = len(token_rows[0])
        for i, row in enumerate(token_rows):
            self._check_tokens(row)
            if len(row) != n_tok:
                raise ContractError("fused_vqa_graph: ragged token rows")
            for t in row:
                sel[i, t] += 1.0
        q_sum = tape.matmul(tape.const(sel), tape.param(self.params["emb"]))
        fused = tape.scale(tape.add(tape.scale(z, float(p)), q_sum), 1.0 / (p + n_tok))
        return fused, h_ivr, z

    def ivr_graph(self, tape: Tape, images: Sequence[np.ndarray],
                  adapters_enabled: bool):
        """Batched IVR extraction; returns (IVR node (B*P)xD, pooled node BxD)."""
        if not images:
            raise ContractError("ivr_graph: empty batch")
        p = self.config.patches
        b = len(images)
        stacked = np.concatenate([self._check_image(im) for im in images], axis=0)
        h_ivr = self.visual_graph(tape, tape.const(stacked), adapters_enabled)
        pool = np.zeros((b, b * p))
        for i in range(b):
            pool[i, i * p:(i + 1) * p] = 1.0 / p
        return h_ivr, tape.matmul(tape.const(pool), h_ivr)

    def qa_fused_graph(self, tape: Tape, token_rows: Sequence[Sequence[int]]):
        sel = np.zeros((len(token_rows), self.config.text_vocab))
        for i, row in enumerate(token_rows):
            self._check_tokens(row)
            for t in row:
                sel[i, t] += 1.0 / len(row)
        return tape.matmul(tape.const(sel), tape.param(self.params["emb"]))

    # -- checkpointing -------------------------------------------------------

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        meta = {
            "config": asdict(self.config),
            "adapters": {lid: {"rank": ad.rank,
                               "d_out": ad.b_t.value.shape[1]}
                         for lid, ad in sorted(self.adapters.items())},
        }
        if extra_meta:
            meta["extra"] = extra_meta
        tensors: list[tuple[str, np.ndarray]] = [
            (name, p.value) for name, p in sorted(self.params.items())]
        for lid, ad in sorted(self.adapters.items()):
            tensors.append((f"lora.{lid}.a_t", ad.a_t.value))
            tensors.append((f"lora.{lid}.b_t", ad.b_t.value))
        payload = json.dumps(meta, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", len(tensors)))
            for name, value in tensors:
                nb = name.encode()
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                linalg.write_matrix(fh, value)

    @classmethod
    def load(cls, path: str) -> "ToyModel":
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise ContractError(f"{path}: not a checkpoint file")
            (meta_len,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(meta_len).decode())
            (n_tensors,) = struct.unpack("<I", fh.read(4))
            tensors = {}
            for _ in range(n_tensors):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode()
                tensors[name] = linalg.read_matrix(fh)
        config = ModelConfig(**meta["config"])
        params = {name: Param(value, name=name)
                  for name, value in tensors.items() if not name.startswith("lora.")}
        model = cls(config, params)
        for lid, info in meta.get("adapters", {}).items():
            ad = LoraAdapter(lid, tensors[f"lora.{lid}.a_t"], info["d_out"])
            ad.b_t.value[...] = tensors[f"lora.{lid}.b_t"]
            model.adapters[lid] = ad
        return model

    @staticmethod
    def checkpoint_meta(path: str) -> dict:
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise ContractError(f"{path}: not a checkpoint file")
            (meta_len,) = struct.unpack("<I", fh.read(4))
            return json.loads(fh.read(meta_len).decode())
