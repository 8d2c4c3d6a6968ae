"""Deterministic synthetic entity universe.

Each entity has a glyph (a pseudo-random +-1 patch pattern standing in for
a portrait image), a unique name token, and one fact per attribute slot.
Every (entity, attribute) pair yields one VQA sample (image + attribute
query, no name token: the only route to the answer is visual
identification) and one QA sample (name token + attribute query, no
image: a purely textual route).

Entities are split into Forget / Retain / RealWorld sets. RealWorld
glyphs are drawn with a constant patch-statistics offset so they form an
out-of-distribution slice; they take part in vanilla training but never
in unlearning supervision.

World files ("NSUW"): magic, u32 version, then length-prefixed sections
(config, entities, samples, splits, continual tasks). All matrices use
the NSUM format from linalg.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .errors import ConfigError, ContractError
from .rng import stream

WORLD_MAGIC = b"NSUW"
WORLD_VERSION = 1

VQA = "VQA"
QA = "QA"
FORGET = "Forget"
RETAIN = "Retain"
REALWORLD = "RealWorld"

REALWORLD_GLYPH_OFFSET = 0.5  # constant shift marking the OOD glyph distribution


@dataclass(frozen=True)
class Entity:
    id: int
    name_token: int
    glyph_seed: int
    facts: tuple[tuple[int, int], ...]  # (attribute_id, value_id) per slot


@dataclass(frozen=True)
class Sample:
    entity_id: int
    modality: str  # VQA or QA
    question_tokens: tuple[int, ...]
    image: Optional[np.ndarray]  # P x d_img, present iff VQA
    answer_id: int
    split: str


@dataclass(frozen=True)
class WorldConfig:
    n_entities: int = 60
    n_attributes: int = 4
    values_per_attribute: int = 8
    forget_fraction: float = 0.1
    realworld_fraction: float = 0.15
    patches: int = 16
    d_img: int = 16
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_entities, self.n_attributes, self.values_per_attribute,
               self.patches, self.d_img) < 1:
            raise ConfigError("world config: all counts must be >= 1")
        if not (0.0 < self.forget_fraction < 1.0 and 0.0 < self.realworld_fraction < 1.0):
            raise ConfigError("world config: fractions must lie in (0, 1)")
        if self.forget_fraction + self.realworld_fraction >= 1.0:
            raise ConfigError("world config: forget + realworld fractions must be < 1")
        if self.noise_sigma < 0:
            raise ConfigError("world config: noise_sigma must be >= 0")


@dataclass(frozen=True)
class World:
    config: WorldConfig
    entities: tuple[Entity, ...]
    samples: tuple[Sample, ...]
    text_vocab: int
    answer_vocab: int
    forget_entity_ids: tuple[int, ...]
    retain_entity_ids: tuple[int, ...]
    realworld_entity_ids: tuple[int, ...]
    continual_tasks: Optional[tuple[tuple[int, ...], ...]] = None

    # token layout: entity names, then attribute queries, then the image
    # placeholder as the last id
    def attr_token(self, attribute_id: int) -> int:
        return self.config.n_entities + attribute_id

    @property
    def image_token(self) -> int:
        return self.config.n_entities + self.config.n_attributes

    def split_samples(self, split: str, modality: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split and s.modality == modality]

    def samples_for_entities(self, entity_ids, modality: str) -> list[Sample]:
        ids = set(entity_ids)
        return [s for s in self.samples if s.entity_id in ids and s.modality == modality]


def render_glyph(glyph_seed: int, patches: int, d_img: int, noise_sigma: float,
                 sample_seed: int, mean_offset: float = 0.0) -> np.ndarray:
    """Base +-1 pattern from glyph_seed plus per-sample Gaussian noise."""
    if patches < 1 or d_img < 1:
        raise ConfigError("render_glyph: patches and d_img must be >= 1")
    if noise_sigma < 0:
        raise ConfigError("render_glyph: noise_sigma must be >= 0")
    base_rng = stream(glyph_seed, "glyph-base")
    base = np.where(base_rng.random((patches, d_img)) < 0.5, -1.0, 1.0) + mean_offset
    if noise_sigma == 0.0:
        return base
    noise = stream(sample_seed, "glyph-noise").standard_normal((patches, d_img))
    return base + noise_sigma * noise


def generate_world(config: WorldConfig) -> World:
    config.validate()
    n = config.n_entities
    seed = config.seed

    n_forget = max(1, int(round(n * config.forget_fraction)))
    n_rw = max(1, int(round(n * config.realworld_fraction)))
    if n_forget + n_rw >= n:
        raise ConfigError("world config: no entities left for the retain split")

    perm = stream(seed, "split").permutation(n)
    forget_ids = tuple(sorted(int(i) for i in perm[:n_forget]))
    rw_ids = tuple(sorted(int(i) for i in perm[n_forget:n_forget + n_rw]))
    retain_ids = tuple(sorted(int(i) for i in perm[n_forget + n_rw:]))
    rw_set = set(rw_ids)
    forget_set = set(forget_ids)

    fact_rng = stream(seed, "facts")
    glyph_rng = stream(seed, "glyph-seeds")
    entities = []
    for eid in range(n):
        facts = tuple((a, int(fact_rng.integers(config.values_per_attribute)))
                      for a in range(config.n_attributes))
        entities.append(Entity(id=eid, name_token=eid,
                               glyph_seed=int(glyph_rng.integers(2**62)),
                               facts=facts))

    img_token = n + config.n_attributes
    samples = []
    for ent in entities:
        split = (FORGET if ent.id in forget_set
                 else REALWORLD if ent.id in rw_set else RETAIN)
        offset = REALWORLD_GLYPH_OFFSET if split == REALWORLD else 0.0
        for attr_id, value_id in ent.facts:
            attr_token = n + attr_id
            sample_seed = (seed * 1_000_003 + ent.id * 101 + attr_id) & (2**62 - 1)
            image = render_glyph(ent.glyph_seed, config.patches, config.d_img,
                                 config.noise_sigma, sample_seed, offset)
            samples.append(Sample(entity_id=ent.id, modality=VQA,
                                  question_tokens=(img_token, attr_token),
                                  image=image, answer_id=value_id, split=split))
            samples.append(Sample(entity_id=ent.id, modality=QA,
                                  question_tokens=(ent.name_token, attr_token),
                                  image=None, answer_id=value_id, split=split))

    return World(config=config,
                 entities=tuple(entities),
                 samples=tuple(samples),
                 text_vocab=img_token + 1,
                 answer_vocab=config.values_per_attribute,
                 forget_entity_ids=forget_ids,
                 retain_entity_ids=retain_ids,
                 realworld_entity_ids=rw_ids)


def partition_continual(world: World, n_tasks: int, seed: int) -> World:
    """Seeded shuffle of the forget ids, split into near-equal disjoint tasks."""
    forget = list(world.forget_entity_ids)
    if n_tasks < 1 or n_tasks > len(forget):
        raise ConfigError(
            f"partition_continual: n_tasks {n_tasks} outside [1, {len(forget)}]")
    order = stream(seed, "continual-partition").permutation(len(forget))
    shuffled = [forget[i] for i in order]
    base, extra = divmod(len(shuffled), n_tasks)
    tasks = []
    pos = 0
    for t in range(n_tasks):
        size = base + (1 if t < extra else 0)
        tasks.append(tuple(shuffled[pos:pos + size]))
        pos += size
    return dataclasses.replace(world, continual_tasks=tuple(tasks))


# -- serialization --------------------------------------------------------

def _pack_section(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def _matrix_bytes(m: np.ndarray) -> bytes:
    buf = io.BytesIO()
    linalg.write_matrix(buf, m)
    return buf.getvalue()


def save_world(world: World, path: str) -> None:
    cfg_payload = json.dumps(dataclasses.asdict(world.config), sort_keys=True).encode()

    ent_buf = io.BytesIO()
    ent_buf.write(struct.pack("<I", len(world.entities)))
    for e in world.entities:
        ent_buf.write(struct.pack("<IIq", e.id, e.name_token, e.glyph_seed))
        ent_buf.write(struct.pack("<I", len(e.facts)))
        for a, v in e.facts:
            ent_buf.write(struct.pack("<II", a, v))

    smp_buf = io.BytesIO()
    smp_buf.write(struct.pack("<I", len(world.samples)))
    for s in world.samples:
        smp_buf.write(struct.pack("<IBI", s.entity_id, 1 if s.modality == VQA else 0,
                                  s.answer_id))
        smp_buf.write(struct.pack("<B", {FORGET: 0, RETAIN: 1, REALWORLD: 2}[s.split]))
        smp_buf.write(struct.pack("<I", len(s.question_tokens)))
        for t in s.question_tokens:
            smp_buf.write(struct.pack("<I", t))
        if s.modality == VQA:
            smp_buf.write(_matrix_bytes(s.image))

    split_buf = io.BytesIO()
    for ids in (world.forget_entity_ids, world.retain_entity_ids,
                world.realworld_entity_ids):
        split_buf.write(struct.pack("<I", len(ids)))
        for i in ids:
            split_buf.write(struct.pack("<I", i))
    split_buf.write(struct.pack("<II", world.text_vocab, world.answer_vocab))

    task_buf = io.BytesIO()
    tasks = world.continual_tasks or ()
    task_buf.write(struct.pack("<I", len(tasks)))
    for task in tasks:
        task_buf.write(struct.pack("<I", len(task)))
        for i in task:
            task_buf.write(struct.pack("<I", i))

    with open(path, "wb") as fh:
        fh.write(WORLD_MAGIC)
        fh.write(struct.pack("<I", WORLD_VERSION))
        for payload in (cfg_payload, ent_buf.getvalue(), smp_buf.getvalue(),
                        split_buf.getvalue(), task_buf.getvalue()):
            fh.write(_pack_section(payload))


def load_world(path: str) -> World:
    with open(path, "rb") as fh:
        if fh.read(4) != WORLD_MAGIC:
            raise ContractError(f"{path}: not a world file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WORLD_VERSION:
            raise ContractError(f"{path}: unsupported world version {version}")

        def section() -> io.BytesIO:
            (length,) = struct.unpack("<Q", fh.read(8))
            return io.BytesIO(fh.read(length))

        config = WorldConfig(**json.loads(section().read().decode()))

        ent_buf = section()
        (n_ent,) = struct.unpack("<I", ent_buf.read(4))
        entities = []
        for _ in range(n_ent):
            eid, name_token, glyph_seed = struct.unpack("<IIq", ent_buf.read(16))
            (n_facts,) = struct.unpack("<I", ent_buf.read(4))
            facts = tuple(struct.unpack("<II", ent_buf.read(8)) for _ in range(n_facts))
            entities.append(Entity(eid, name_token, glyph_seed, facts))

        smp_buf = section()
        (n_smp,) = struct.unpack("<I", smp_buf.read(4))
        samples = []
        split_names = {0: FORGET, 1: RETAIN, 2: REALWORLD}
        for _ in range(n_smp):
            eid, is_vqa, answer = struct.unpack("<IBI", smp_buf.read(9))
            (split_code,) = struct.unpack("<B", smp_buf.read(1))
            (n_tok,) = struct.unpack("<I", smp_buf.read(4))
            tokens = tuple(struct.unpack("<I", smp_buf.read(4))[0] for _ in range(n_tok))
            image = linalg.read_matrix(smp_buf) if is_vqa else None
            samples.append(Sample(eid, VQA if is_vqa else QA, tokens, image,
                                  answer, split_names[split_code]))

        split_buf = section()
        id_sets = []
        for _ in range(3):
            (k,) = struct.unpack("<I", split_buf.read(4))
            id_sets.append(tuple(struct.unpack("<I", split_buf.read(4))[0]
                                 for _ in range(k)))
        text_vocab, answer_vocab = struct.unpack("<II", split_buf.read(8))

        task_buf = section()
        (n_tasks,) = struct.unpack("<I", task_buf.read(4))
        tasks = None
        if n_tasks:
            tasks = []
            for _ in range(n_tasks):
                (k,) = struct.unpack("<I", task_buf.read(4))
                tasks.append(tuple(struct.unpack("<I", task_buf.read(4))[0]
                                   for _ in range(k)))
            tasks = tuple(tasks)

    return World(config=config, entities=tuple(entities), samples=tuple(samples),
                 text_vocab=text_vocab, answer_vocab=answer_vocab,
                 forget_entity_ids=id_sets[0], retain_entity_ids=id_sets[1],
                 realworld_entity_ids=id_sets[2], continual_tasks=tasks)


def world_to_json(world: World) -> str:
    """Human-readable mirror of the binary container (for --dump-json)."""
    doc = {
        "config": dataclasses.asdict(world.config),
        "text_vocab": world.text_vocab,
        "answer_vocab": world.answer_vocab,
        "forget_entity_ids": list(world.forget_entity_ids),
        "retain_entity_ids": list(world.retain_entity_ids),
        "realworld_entity_ids": list(world.realworld_entity_ids),
        "continual_tasks": [list(t) for t in world.continual_tasks]
        if world.continual_tasks else None,
        "entities": [
            {"id": e.id, "name_token": e.name_token, "glyph_seed": e.glyph_seed,
             "facts": [list(f) for f in e.facts]}
            for e in world.entities
        ],
        "samples": [
            {"entity_id": s.entity_id, "modality": s.modality,
             "question_tokens": list(s.question_tokens),
             "answer_id": s.answer_id, "split": s.split,
             "image": None if s.image is None else
             [[format(v, ".17g") for v in row] for row in s.image]}
            for s in world.samples
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)
